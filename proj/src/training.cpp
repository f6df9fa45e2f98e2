#include "stpp/training.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <iomanip>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "stpp/binary_io.hpp"
#include "stpp/errors.hpp"

namespace stpp {

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0)) throw ConfigError(std::string(name) + " must be > 0");
  };
  positive(warmup_lr, "warmup_lr");
  positive(joint_lr_backbone, "joint_lr_backbone");
  positive(joint_lr_addon_proto, "joint_lr_addon_proto");
  positive(fc_lr, "fc_lr");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must lie in (0,1]");
  if (lr_decay_period < 1) throw ConfigError("lr_decay_period must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (l1_weight < 0) throw ConfigError("l1_weight must be >= 0");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  for (double l : {loss.lambda1, loss.lambda2_support, loss.lambda2_trivial, loss.lambda3, loss.lambda4})
    if (!(l >= 0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and >= 0");
}

void adam_step(std::span<Tensor> params, const std::vector<std::vector<double>>& grads, AdamState& adam, double lr,
               double weight_decay) {
  if (grads.size() != params.size()) throw DimensionError("adam: gradient count does not match parameters");
  if (adam.m.empty()) {
    for (const auto& p : params) {
      adam.m.emplace_back(p.size(), 0.0);
      adam.v.emplace_back(p.size(), 0.0);
    }
  }
  if (adam.m.size() != params.size()) throw DimensionError("adam: state built for a different parameter list");
  ++adam.step;
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(adam.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].mutable_data();
    auto& m = adam.m[k];
    auto& v = adam.v[k];
    const auto& g = grads[k];
    if (g.size() != p.size() || m.size() != p.size())
      throw DimensionError("adam: buffer size mismatch for parameter " + std::to_string(k));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g[i];
      v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g[i] * g[i];
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      p[i] -= lr * mh / (std::sqrt(vh) + adam.eps);
      if (weight_decay > 0) p[i] -= lr * weight_decay * p[i];
    }
  }
}

std::string log_to_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream out;
  out.precision(10);
  out << "step,stage,branch,ce,ct,sp,cls_or_dsc,ort,total\n";
  for (const auto& r : log)
    out << r.step << ',' << r.stage << ',' << to_string(r.branch) << ',' << r.ce << ',' << r.ct << ',' << r.sp << ','
        << r.cls_or_dsc << ',' << r.ort << ',' << r.total << '\n';
  return out.str();
}

namespace {

std::vector<std::vector<double>> grads_of(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> g;
  for (const auto& p : params) g.push_back(p.grad());
  return g;
}

void zero_grads(const std::vector<Tensor>& params) {
  for (auto p : params) p.zero_grad();
}

std::string dump(const LossBreakdown& b) {
  std::ostringstream s;
  s << "ce=" << b.ce << " ct=" << b.ct << " sp=" << b.sp << " cls_or_dsc=" << b.cls_or_dsc << " ort=" << b.ort
    << " total=" << b.total_value;
  return s.str();
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

JointTrainer::JointTrainer(ModelState& state, const TrainConfig& cfg) : state_(state), cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
}

BranchKind JointTrainer::branch_for_batch(std::size_t batch) const {
  const std::size_t offset = cfg_.first_branch == BranchKind::support ? 0 : 1;
  return (batch + offset) % 2 == 0 ? BranchKind::support : BranchKind::trivial;
}

std::pair<double, double> JointTrainer::learning_rates(std::size_t epoch) const {
  if (epoch < cfg_.warmup_epochs) return {0.0, cfg_.warmup_lr};
  const std::size_t joint = epoch - cfg_.warmup_epochs;
  const double f = std::pow(cfg_.lr_decay, static_cast<double>(joint / cfg_.lr_decay_period));
  return {cfg_.joint_lr_backbone * f, cfg_.joint_lr_addon_proto * f};
}

LossBreakdown JointTrainer::step(const Tensor& x, std::span<const int> labels, BranchKind kind, bool freeze_backbone,
                                 double lr_backbone, double lr_branch) {
  auto& tape = Tape::active();
  tape.clear();
  FeatureBatch features;
  {
    std::optional<NoGradGuard> guard;
    if (freeze_backbone) guard.emplace();
    features = backbone_forward(state_, x);
  }
  const auto r = forward_branch(state_, kind, features);
  const PrototypeSet& protos = state_.branch(kind).protos;
  LossBreakdown b = branch_composite(r, labels, protos, cfg_.loss);
  if (!std::isfinite(b.total_value)) {
    tape.clear();
    throw NumericalError("non-finite loss in " + std::string(to_string(kind)) + " branch at batch " +
                         std::to_string(batches_) + ": " + dump(b));
  }
  backward(b.total);

  auto bb = state_.backbone_parameters();
  auto br = state_.branch_parameters(kind);
  AdamState& adam = kind == BranchKind::support ? adam_support_ : adam_trivial_;
  if (!freeze_backbone) adam_step(bb, grads_of(bb), adam_backbone_, lr_backbone, cfg_.weight_decay);
  adam_step(br, grads_of(br), adam, lr_branch, 0.0);
  // decoupled decay on the add-on tensors (all but the trailing prototype tensor)
  if (cfg_.weight_decay > 0)
    for (std::size_t k = 0; k + 1 < br.size(); ++k)
      for (double& v : br[k].mutable_data()) v -= lr_branch * cfg_.weight_decay * v;
  zero_grads(bb);
  zero_grads(state_.branch_parameters(BranchKind::support));
  zero_grads(state_.branch_parameters(BranchKind::trivial));
  normalize_prototypes(state_.branch(kind).protos, rng_);
  return b;
}

void JointTrainer::run_epoch(const LabeledData& data, std::size_t epoch) {
  const auto [lr_bb, lr_br] = learning_rates(epoch);
  const bool warm = epoch < cfg_.warmup_epochs;
  const auto order = shuffled(data.size(), rng_);
  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    std::span<const std::size_t> idx(order.data() + start, end - start);
    const BranchKind kind = branch_for_batch(batches_);
    const auto labels = data.batch_labels(idx);
    const auto b = step(data.batch(idx), labels, kind, warm, lr_bb, lr_br);
    log_.push_back({batches_, warm ? "warmup" : "joint", kind, b.ce, b.ct, b.sp, b.cls_or_dsc, b.ort, b.total_value});
    ++batches_;
  }
}

std::vector<TrainLogRow> stage1_joint(ModelState& state, const LabeledData& data, const TrainConfig& cfg) {
  JointTrainer trainer(state, cfg);
  const std::size_t epochs = cfg.warmup_epochs + cfg.joint_epochs;
  for (std::size_t e = 0; e < epochs; ++e) trainer.run_epoch(data, e);
  return trainer.log();
}

void project_prototypes(ModelState& state, const LabeledData& data) {
  for (BranchKind kind : {BranchKind::support, BranchKind::trivial}) {
    BranchParams& br = state.branch(kind);
    const auto bank = collect_latents(state, kind, data);
    const std::size_t d = br.protos.dim();
    br.unprojected = br.protos.values.detach();
    br.provenance.assign(br.protos.count(), {0, 0, 0});
    auto values = br.protos.values.mutable_data();
    const auto latent = bank.latent.data();
    for (std::size_t m = 0; m < br.protos.count(); ++m) {
      const int cls = br.protos.class_of[m];
      const auto row = nearest_row(bank, br.unprojected.data().subspan(m * d, d), state.config.similarity, cls);
      if (!row) throw ConfigError("class " + std::to_string(cls) + " is absent from the training data");
      double nn = 0;
      for (std::size_t j = 0; j < d; ++j) nn += latent[*row * d + j] * latent[*row * d + j];
      const double scale = nn > 0 ? 1.0 / std::sqrt(nn) : 1.0;
      for (std::size_t j = 0; j < d; ++j) values[m * d + j] = latent[*row * d + j] * scale;
      br.provenance[m] = bank.where[*row];
    }
  }
}

std::vector<TrainLogRow> stage3_fc(ModelState& state, const LabeledData& data, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<TrainLogRow> log;
  std::mt19937_64 rng(cfg.seed ^ 0x3fcu);
  std::size_t step = 0;
  for (BranchKind kind : {BranchKind::support, BranchKind::trivial}) {
    BranchParams& br = state.branch(kind);
    const std::size_t m = br.protos.count();
    const std::size_t c = state.config.num_classes;
    std::vector<double> pooled;
    {
      NoGradGuard guard;
      for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(data.size(), start + cfg.batch_size);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto r = forward_branch(state, kind, data.batch(idx));
        pooled.insert(pooled.end(), r.pooled.data().begin(), r.pooled.data().end());
      }
    }
    std::vector<double> incorrect(m * c);
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t k = 0; k < c; ++k) incorrect[p * c + k] = br.protos.class_of[p] == static_cast<int>(k) ? 0.0 : 1.0;
    const Tensor mask(Shape{m, c}, incorrect);

    Tensor w = br.fc.weights;
    w.set_requires_grad(true);
    AdamState adam;
    std::vector<Tensor> params{w};
    for (std::size_t it = 0; it < cfg.fc_iters; ++it) {
      const auto order = shuffled(data.size(), rng);
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<double> rows;
        std::vector<int> labels;
        for (std::size_t k = start; k < end; ++k) {
          rows.insert(rows.end(), pooled.begin() + static_cast<std::ptrdiff_t>(order[k] * m),
                      pooled.begin() + static_cast<std::ptrdiff_t>((order[k] + 1) * m));
          labels.push_back(data.labels[order[k]]);
        }
        Tape::active().clear();
        const Tensor x(Shape{end - start, m}, std::move(rows));
        const Tensor ce = cross_entropy(matmul(x, w), labels);
        const Tensor l1 = sum(abs(mul(w, mask)));
        const Tensor total = add(ce, mul(l1, cfg.l1_weight));
        if (!std::isfinite(total.item()))
          throw NumericalError("non-finite FC loss in " + std::string(to_string(kind)) + " branch");
        backward(total);
        adam_step(params, grads_of(params), adam, cfg.fc_lr);
        w.zero_grad();
        TrainLogRow row;
        row.step = step++;
        row.stage = "fc";
        row.branch = kind;
        row.ce = ce.item();
        row.total = total.item();
        log.push_back(row);
      }
    }
    w.set_requires_grad(false);
  }
  return log;
}

ExperimentResult run_experiment(const ModelConfig& model, const TrainConfig& cfg, const LabeledData& train,
                                const LabeledData& test, const ExperimentOptions& options) {
  cfg.validate();
  model.validate();
  if (train.num_classes != model.num_classes)
    throw ConfigError("model has " + std::to_string(model.num_classes) + " classes, training data has " +
                      std::to_string(train.num_classes));
  ExperimentResult res;
  res.state = ModelState::initialize(model, cfg.seed);
  res.log = stage1_joint(res.state, train, cfg);
  if (options.out_dir) save_checkpoint(res.state, *options.out_dir / "stage1.stpp");
  if (cfg.project) {
    project_prototypes(res.state, train);
    if (options.out_dir) save_checkpoint(res.state, *options.out_dir / "projected.stpp");
  }
  auto fc_log = stage3_fc(res.state, train, cfg);
  const std::size_t offset = res.log.size();
  for (auto& r : fc_log) {
    r.step += offset;
    res.log.push_back(r);
  }
  if (options.evaluate) res.report = evaluate(res.state, test, train, options.eval);
  if (options.out_dir) {
    save_checkpoint(res.state, *options.out_dir / "final.stpp");
    io::write_file_atomic(*options.out_dir / "loss.csv", log_to_csv(res.log));
    if (options.evaluate) io::write_file_atomic(*options.out_dir / "metrics.json", report_to_json(res.report));
  }
  return res;
}

std::vector<SweepRow> sweep_lambda3(const ModelConfig& model, const TrainConfig& cfg, const EvalOptions& eval,
                                    const LabeledData& train, const LabeledData& test, std::span<const double> values,
                                    std::size_t threads) {
  for (double v : values)
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("lambda3 values must be finite and >= 0");
  std::vector<SweepRow> rows(values.size());
  std::vector<std::exception_ptr> errors(values.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < values.size(); i = next++) {
      try {
        TrainConfig c = cfg;
        c.loss.lambda3 = values[i];
        ExperimentOptions opts;
        opts.eval = eval;
        rows[i].lambda3 = values[i];
        rows[i].report = run_experiment(model, c, train, test, opts).report;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(values.size(), 1));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "lambda3,accuracy,ch,oirr,iou,dauc,aipd_s,aifd_s,aipd_t,aifd_t\n";
  for (const auto& r : rows) {
    const auto& s = r.report.support;
    const auto& t = r.report.trivial;
    out << r.lambda3 << ',' << r.report.accuracy << ',' << s.ch << ',' << s.oirr << ',' << s.iou << ',' << s.dauc << ','
        << s.aipd << ',' << s.aifd << ',' << t.aipd << ',' << t.aifd << '\n';
  }
  return out.str();
}

MoonGeometry two_moon_geometry(const ModelState& state, const LabeledData& train) {
  if (train.inputs.rank() != 2) throw DimensionError("geometry statistics need point data");
  const std::size_t dim = train.inputs.dim(1);
  const auto x = train.inputs.data();
  auto stat = [&](const BranchParams& br) {
    if (br.provenance.size() != br.protos.count()) throw ContractError("geometry needs projected prototypes");
    double total = 0;
    for (std::size_t m = 0; m < br.protos.count(); ++m) {
      const std::size_t src = br.provenance[m][0];
      const int cls = br.protos.class_of[m];
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t n = 0; n < train.size(); ++n) {
        if (train.labels[n] == cls) continue;
        double d2 = 0;
        for (std::size_t j = 0; j < dim; ++j) d2 += (x[src * dim + j] - x[n * dim + j]) * (x[src * dim + j] - x[n * dim + j]);
        best = std::min(best, std::sqrt(d2));
      }
      total += best;
    }
    return total / static_cast<double>(br.protos.count());
  };
  return {stat(state.support), stat(state.trivial)};
}

}  // namespace stpp
