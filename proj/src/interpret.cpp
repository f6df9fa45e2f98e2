#include "stpp/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "stpp/errors.hpp"

namespace stpp {

ActivationMap::ActivationMap(std::size_t h_, std::size_t w_, std::vector<double> v)
    : h(h_), w(w_), values(std::move(v)) {
  if (values.size() != h * w)
    throw DimensionError("activation map of " + std::to_string(h) + "x" + std::to_string(w) + " given " +
                         std::to_string(values.size()) + " values");
}

ActivationMap upsample_map(const ActivationMap& map, std::size_t out_h, std::size_t out_w) {
  if (map.h == out_h && map.w == out_w) return map;
  NoGradGuard guard;
  Tensor t(Shape{1, map.h, map.w, 1}, map.values);
  Tensor up = upsample_bilinear(t, out_h, out_w);
  return ActivationMap(out_h, out_w, std::vector<double>(up.data().begin(), up.data().end()));
}

ActivationMap clamp_nonnegative(ActivationMap map) {
  for (double& v : map.values) v = std::max(v, 0.0);
  return map;
}

ActivationMap prototype_map(const SimilarityResult& r, std::size_t b, std::size_t m) {
  std::vector<double> v(r.h * r.w);
  for (std::size_t i = 0; i < r.h; ++i)
    for (std::size_t j = 0; j < r.w; ++j) v[i * r.w + j] = r.map_at(b, m, i, j);
  return ActivationMap(r.h, r.w, std::move(v));
}

ActivationMap class_map(const SimilarityResult& r, const PrototypeSet& protos, std::size_t b, int cls,
                        std::size_t out_h, std::size_t out_w) {
  const auto members = protos.members(cls);
  if (members.empty()) throw ConfigError("class " + std::to_string(cls) + " has no prototypes");
  std::vector<double> v(r.h * r.w, 0.0);
  for (std::size_t m : members) {
    const auto pm = prototype_map(r, b, m);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] += pm.values[k];
  }
  for (double& x : v) x /= static_cast<double>(members.size());
  return upsample_map(ActivationMap(r.h, r.w, std::move(v)), out_h, out_w);
}

namespace {

void check_mask(const ActivationMap& map, std::span<const std::uint8_t> mask) {
  if (mask.size() != map.values.size())
    throw DimensionError("mask has " + std::to_string(mask.size()) + " pixels, map has " +
                         std::to_string(map.values.size()));
}

}  // namespace

double content_heatmap(const ActivationMap& map, std::span<const std::uint8_t> mask) {
  check_mask(map, mask);
  double inside = 0, total = 0;
  for (std::size_t k = 0; k < mask.size(); ++k) {
    const double v = std::max(map.values[k], 0.0);
    total += v;
    if (mask[k]) inside += v;
  }
  return total == 0 ? 0.0 : 100.0 * inside / total;
}

double oirr(const ActivationMap& map, std::span<const std::uint8_t> mask) {
  check_mask(map, mask);
  double in = 0, out = 0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t k = 0; k < mask.size(); ++k) {
    const double v = std::max(map.values[k], 0.0);
    if (mask[k]) {
      in += v;
      ++n_in;
    } else {
      out += v;
      ++n_out;
    }
  }
  if (n_in == 0 || n_out == 0) throw DomainError("OIRR needs pixels both inside and outside the mask");
  const double mean_in = in / static_cast<double>(n_in);
  const double mean_out = out / static_cast<double>(n_out);
  if (mean_in == 0) return std::numeric_limits<double>::infinity();
  return mean_out / mean_in;
}

double iou_at_half(const ActivationMap& map, std::span<const std::uint8_t> mask) {
  check_mask(map, mask);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : map.values) {
    lo = std::min(lo, std::max(v, 0.0));
    hi = std::max(hi, std::max(v, 0.0));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < mask.size(); ++k) {
    const bool sel = hi > lo ? (std::max(map.values[k], 0.0) - lo) / (hi - lo) > 0.5 : true;
    const bool obj = mask[k] != 0;
    inter += sel && obj;
    uni += sel || obj;
  }
  return uni == 0 ? 0.0 : 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::size_t> deletion_order(const ActivationMap& map) {
  std::vector<std::size_t> order(map.values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::max(map.values[a], 0.0) > std::max(map.values[b], 0.0);
  });
  return order;
}

double deletion_auc(const BatchProbabilityFn& model, std::span<const double> image, std::size_t channels,
                    const ActivationMap& map, std::size_t steps) {
  if (steps < 2) throw DomainError("deletion AUC needs at least 2 steps");
  const std::size_t n = map.values.size();
  if (image.size() != n * channels)
    throw DimensionError("image has " + std::to_string(image.size()) + " values, map covers " +
                         std::to_string(n) + " pixels x " + std::to_string(channels) + " channels");
  const auto order = deletion_order(map);
  const std::size_t per = image.size();
  std::vector<double> batch(per * (steps + 1));
  std::vector<double> current(image.begin(), image.end());
  std::size_t deleted = 0;
  for (std::size_t k = 0; k <= steps; ++k) {
    const std::size_t target = k * n / steps;
    for (; deleted < target; ++deleted)
      for (std::size_t c = 0; c < channels; ++c) current[order[deleted] * channels + c] = 0.0;
    std::copy(current.begin(), current.end(), batch.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  const auto probs = model(batch, steps + 1);
  const std::size_t classes = probs.size() / (steps + 1);
  if (classes == 0 || probs.size() != classes * (steps + 1)) throw DimensionError("model returned a ragged batch");
  const std::size_t pred = static_cast<std::size_t>(std::max_element(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(classes)) - probs.begin());
  double area = 0;
  for (std::size_t k = 0; k < steps; ++k)
    area += 0.5 * (probs[k * classes + pred] + probs[(k + 1) * classes + pred]) / static_cast<double>(steps);
  return 100.0 * area;
}

// ---------------------------------------------------------------- latents

LatentBank collect_latents(const ModelState& state, BranchKind kind, const LabeledData& data, std::size_t batch_size) {
  if (data.size() == 0) throw DomainError("cannot collect latents from an empty dataset");
  NoGradGuard guard;
  LatentBank bank;
  std::vector<double> rows;
  std::size_t dim = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto r = forward_branch(state, kind, data.batch(idx));
    dim = r.latent.dim(1);
    rows.insert(rows.end(), r.latent.data().begin(), r.latent.data().end());
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t i = 0; i < r.h; ++i)
        for (std::size_t j = 0; j < r.w; ++j) {
          bank.label.push_back(data.labels[idx[b]]);
          bank.where.push_back({idx[b], i, j});
        }
  }
  bank.latent = Tensor(Shape{bank.label.size(), dim}, std::move(rows));
  return bank;
}

namespace {

double row_similarity(const LatentBank& bank, std::size_t row, std::span<const double> proto, SimilarityKind kind) {
  const std::size_t d = proto.size();
  const auto data = bank.latent.data();
  double dot = 0;
  for (std::size_t j = 0; j < d; ++j) dot += data[row * d + j] * proto[j];
  return kind == SimilarityKind::projection ? std::fabs(dot) : dot;
}

std::span<const double> row_of(const Tensor& t, std::size_t i) {
  const std::size_t d = t.dim(1);
  return t.data().subspan(i * d, d);
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  if (aa == 0 || bb == 0) return 1.0;
  return 1.0 - ab / std::sqrt(aa * bb);
}

double mean_cross_class_distance(const std::vector<std::vector<double>>& vecs, const std::vector<int>& class_of) {
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < vecs.size(); ++a)
    for (std::size_t b = a + 1; b < vecs.size(); ++b) {
      if (class_of[a] == class_of[b]) continue;
      total += cosine_distance(vecs[a], vecs[b]);
      ++pairs;
    }
  if (pairs == 0) throw DomainError("AIPD/AIFD need prototypes from at least two classes");
  return total / static_cast<double>(pairs);
}

}  // namespace

std::optional<std::size_t> nearest_row(const LatentBank& bank, std::span<const double> proto, SimilarityKind kind,
                                       std::optional<int> cls) {
  std::optional<std::size_t> best;
  double best_s = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < bank.rows(); ++r) {
    if (cls && bank.label[r] != *cls) continue;
    const double s = row_similarity(bank, r, proto, kind);
    if (!best || s > best_s) {
      best = r;
      best_s = s;
    }
  }
  return best;
}

ProtoDistances aipd_aifd(const Tensor& prototypes, const std::vector<int>& class_of, const LatentBank& bank,
                         SimilarityKind kind) {
  if (bank.rows() == 0) throw DomainError("AIFD needs latent training features");
  std::vector<std::vector<double>> protos, feats;
  for (std::size_t m = 0; m < class_of.size(); ++m) {
    const auto p = row_of(prototypes, m);
    protos.emplace_back(p.begin(), p.end());
    const auto near = nearest_row(bank, p, kind, class_of[m]);
    if (!near) throw DomainError("class " + std::to_string(class_of[m]) + " has no latent features");
    const auto f = row_of(bank.latent, *near);
    feats.emplace_back(f.begin(), f.end());
  }
  return {mean_cross_class_distance(protos, class_of), mean_cross_class_distance(feats, class_of)};
}

// ---------------------------------------------------------------- pruning

void PruneConfig::validate() const {
  if (tau < 1 || tau > k_nearest) throw ConfigError("prune: need 1 <= tau <= k_nearest");
}

std::size_t PruneDecision::removed() const {
  return static_cast<std::size_t>(std::count(remove.begin(), remove.end(), true));
}

PruneDecision prune_decisions(const Tensor& prototypes, const std::vector<int>& class_of, std::size_t num_classes,
                              const LatentBank& bank, SimilarityKind kind, const PruneConfig& cfg) {
  cfg.validate();
  if (cfg.k_nearest > bank.rows())
    throw DomainError("prune: k_nearest " + std::to_string(cfg.k_nearest) + " exceeds " +
                      std::to_string(bank.rows()) + " training patches");
  const std::size_t m = class_of.size();
  PruneDecision out;
  out.own_counts.resize(m);
  out.remove.resize(m);
  std::vector<std::size_t> order(bank.rows());
  std::vector<double> sims(bank.rows());
  for (std::size_t p = 0; p < m; ++p) {
    const auto proto = row_of(prototypes, p);
    for (std::size_t r = 0; r < bank.rows(); ++r) sims[r] = row_similarity(bank, r, proto, kind);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.k_nearest), order.end(),
                      [&](std::size_t a, std::size_t b) { return sims[a] > sims[b] || (sims[a] == sims[b] && a < b); });
    std::size_t own = 0;
    for (std::size_t k = 0; k < cfg.k_nearest; ++k) own += bank.label[order[k]] == class_of[p];
    out.own_counts[p] = own;
    out.remove[p] = own < cfg.tau;
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::optional<std::size_t> best;
    bool any_kept = false;
    for (std::size_t p = 0; p < m; ++p) {
      if (class_of[p] != static_cast<int>(c)) continue;
      if (!out.remove[p]) any_kept = true;
      if (!best || out.own_counts[p] > out.own_counts[*best]) best = p;
    }
    if (best && !any_kept) {
      out.remove[*best] = false;
      out.kept_last.push_back(*best);
    }
  }
  return out;
}

void remove_prototypes(BranchParams& branch, const std::vector<bool>& remove) {
  auto& protos = branch.protos;
  if (remove.size() != protos.count()) throw DimensionError("prune mask does not match prototype count");
  const std::size_t d = protos.dim();
  const std::size_t c = branch.fc.weights.dim(1);
  std::vector<double> values, fc, unproj;
  std::vector<int> cls;
  std::vector<std::array<std::size_t, 3>> prov;
  const bool has_unproj = branch.unprojected.rank() == 2;
  for (std::size_t m = 0; m < remove.size(); ++m) {
    if (remove[m]) continue;
    const auto v = row_of(protos.values, m);
    values.insert(values.end(), v.begin(), v.end());
    const auto f = row_of(branch.fc.weights, m);
    fc.insert(fc.end(), f.begin(), f.end());
    if (has_unproj) {
      const auto u = row_of(branch.unprojected, m);
      unproj.insert(unproj.end(), u.begin(), u.end());
    }
    if (!branch.provenance.empty()) prov.push_back(branch.provenance[m]);
    cls.push_back(protos.class_of[m]);
  }
  const std::size_t kept = cls.size();
  const bool rg = protos.values.requires_grad();
  protos.values = Tensor(Shape{kept, d}, std::move(values), rg);
  protos.class_of = std::move(cls);
  branch.fc.weights = Tensor(Shape{kept, c}, std::move(fc));
  if (has_unproj) branch.unprojected = Tensor(Shape{kept, d}, std::move(unproj));
  branch.provenance = std::move(prov);
}

std::size_t prune_branch(ModelState& state, BranchKind kind, const LabeledData& train, const PruneConfig& cfg) {
  BranchParams& br = state.branch(kind);
  const auto bank = collect_latents(state, kind, train);
  const auto decision =
      prune_decisions(br.protos.values, br.protos.class_of, br.protos.num_classes, bank, state.config.similarity, cfg);
  for (std::size_t p : decision.kept_last)
    std::cerr << "warning: pruning would remove every " << to_string(kind) << " prototype of class "
              << br.protos.class_of[p] << "; keeping prototype " << p << '\n';
  remove_prototypes(br, decision.remove);
  return decision.removed();
}

// ---------------------------------------------------------------- report

namespace {

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
double number_from(const nlohmann::json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

nlohmann::json branch_json(const BranchMetrics& b) {
  return {{"accuracy", b.accuracy},   {"ch", number_or_null(b.ch)},     {"oirr", number_or_null(b.oirr)},
          {"oirr_infinite", b.oirr_infinite}, {"iou", number_or_null(b.iou)}, {"dauc", number_or_null(b.dauc)},
          {"aipd", number_or_null(b.aipd)},   {"aifd", number_or_null(b.aifd)}, {"prototypes", b.prototypes},
          {"pruned", b.pruned}};
}

BranchMetrics branch_from(const nlohmann::json& j) {
  BranchMetrics b;
  b.accuracy = j.at("accuracy").get<double>();
  b.ch = number_from(j.at("ch"));
  b.oirr = number_from(j.at("oirr"));
  b.oirr_infinite = j.at("oirr_infinite").get<std::size_t>();
  b.iou = number_from(j.at("iou"));
  b.dauc = number_from(j.at("dauc"));
  b.aipd = number_from(j.at("aipd"));
  b.aifd = number_from(j.at("aifd"));
  b.prototypes = j.at("prototypes").get<std::size_t>();
  b.pruned = j.at("pruned").get<std::size_t>();
  return b;
}

}  // namespace

std::string report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["accuracy"] = r.accuracy;
  j["support"] = branch_json(r.support);
  j["trivial"] = branch_json(r.trivial);
  j["has_saliency"] = r.has_saliency;
  j["test_samples"] = r.test_samples;
  j["dauc_samples"] = r.dauc_samples;
  j["metadata"] = {{"prototype_source", r.prototype_source},
                   {"aifd_pairing", "nearest own-class feature first, then cross-class pairs"},
                   {"dauc_probability", "ensemble"},
                   {"saliency_map", "true-class mean prototype map, bilinear, negatives clamped"},
                   {"oirr_units", "percent"}};
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.support = branch_from(j.at("support"));
    r.trivial = branch_from(j.at("trivial"));
    r.has_saliency = j.at("has_saliency").get<bool>();
    r.test_samples = j.at("test_samples").get<std::size_t>();
    r.dauc_samples = j.at("dauc_samples").get<std::size_t>();
    r.prototype_source = j.at("metadata").at("prototype_source").get<std::string>();
    return r;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("metrics JSON: ") + e.what(), e.byte);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("metrics JSON: ") + e.what(), 0);
  }
}

// ---------------------------------------------------------------- evaluation

std::vector<int> predict(const ModelState& state, const LabeledData& data, std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<int> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto f = backbone_forward(state, data.batch(idx));
    const Tensor logits = ensemble_logits(forward_branch(state, BranchKind::support, f),
                                          forward_branch(state, BranchKind::trivial, f));
    const std::size_t c = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = logits.data().subspan(b * c, c);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

namespace {

std::size_t argmax_row(const Tensor& logits, std::size_t b) {
  const std::size_t c = logits.dim(1);
  const auto row = logits.data().subspan(b * c, c);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct RunningMean {
  double sum = 0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double value() const { return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN(); }
};

}  // namespace

MetricsReport evaluate(const ModelState& state, const LabeledData& test, const LabeledData& train,
                       const EvalOptions& options) {
  if (test.size() == 0) throw DomainError("evaluation needs a non-empty test set");
  NoGradGuard guard;
  MetricsReport report;
  report.test_samples = test.size();
  const auto& bb = state.config.backbone;
  const bool images = bb.kind == BackboneSpec::Kind::conv;
  report.has_saliency = options.saliency && images && !test.masks.empty();
  const std::size_t H = bb.image_h, W = bb.image_w, R = bb.channels;

  std::size_t correct_e = 0, correct_s = 0, correct_t = 0;
  RunningMean ch[2], oi[2], io[2];
  std::size_t oirr_inf[2] = {0, 0};
  const BranchKind kinds[2] = {BranchKind::support, BranchKind::trivial};

  for (std::size_t start = 0; start < test.size(); start += options.batch_size) {
    const std::size_t end = std::min(test.size(), start + options.batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto f = backbone_forward(state, test.batch(idx));
    const auto rs = forward_branch(state, BranchKind::support, f);
    const auto rt = forward_branch(state, BranchKind::trivial, f);
    const Tensor le = ensemble_logits(rs, rt);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto y = static_cast<std::size_t>(test.labels[idx[b]]);
      correct_e += argmax_row(le, b) == y;
      correct_s += argmax_row(rs.logits, b) == y;
      correct_t += argmax_row(rt.logits, b) == y;
      if (!report.has_saliency) continue;
      const auto mask = test.mask(idx[b]);
      for (int k = 0; k < 2; ++k) {
        const auto& r = k == 0 ? rs : rt;
        const auto map = class_map(r, state.branch(kinds[k]).protos, b, static_cast<int>(y), H, W);
        ch[k].add(content_heatmap(map, mask));
        io[k].add(iou_at_half(map, mask));
        const double o = oirr(map, mask);
        if (std::isfinite(o))
          oi[k].add(100.0 * o);
        else
          ++oirr_inf[k];
      }
    }
  }
  const double n = static_cast<double>(test.size());
  report.accuracy = static_cast<double>(correct_e) / n;
  report.support.accuracy = static_cast<double>(correct_s) / n;
  report.trivial.accuracy = static_cast<double>(correct_t) / n;

  if (report.has_saliency) {
    const BatchProbabilityFn model = [&](std::span<const double> imgs, std::size_t count) {
      Tensor x(Shape{count, H, W, R}, std::vector<double>(imgs.begin(), imgs.end()));
      const auto f = backbone_forward(state, x);
      return softmax_rows(ensemble_logits(forward_branch(state, BranchKind::support, f),
                                          forward_branch(state, BranchKind::trivial, f)));
    };
    const std::size_t nd = std::min(options.dauc_samples, test.size());
    report.dauc_samples = nd;
    RunningMean da[2];
    for (std::size_t s = 0; s < nd; ++s) {
      const std::size_t one[1] = {s};
      const Tensor x = test.batch(one);
      const auto f = backbone_forward(state, x);
      for (int k = 0; k < 2; ++k) {
        const auto r = forward_branch(state, kinds[k], f);
        const auto map = class_map(r, state.branch(kinds[k]).protos, 0, test.labels[s], H, W);
        da[k].add(deletion_auc(model, x.data(), R, map, options.dauc_steps));
      }
    }
    for (int k = 0; k < 2; ++k) {
      auto& m = report.branch(kinds[k]);
      m.ch = ch[k].value();
      m.iou = io[k].value();
      m.oirr = oi[k].value();
      m.oirr_infinite = oirr_inf[k];
      m.dauc = da[k].value();
    }
  } else {
    for (auto k : kinds) {
      auto& m = report.branch(k);
      m.ch = m.oirr = m.iou = m.dauc = std::numeric_limits<double>::quiet_NaN();
    }
  }

  bool all_unprojected = true;
  for (auto k : kinds) {
    const auto& br = state.branch(k);
    auto& m = report.branch(k);
    m.prototypes = br.protos.count();
    const bool use_unproj = br.unprojected.rank() == 2 && br.unprojected.dim(0) == br.protos.count();
    all_unprojected = all_unprojected && use_unproj;
    const auto bank = collect_latents(state, k, train, options.batch_size);
    const auto d = aipd_aifd(use_unproj ? br.unprojected : br.protos.values, br.protos.class_of, bank,
                             state.config.similarity);
    m.aipd = d.aipd;
    m.aifd = d.aifd;
  }
  report.prototype_source = all_unprojected ? "unprojected" : "current";
  return report;
}

// ---------------------------------------------------------------- export

std::string map_to_pgm(const ActivationMap& map) {
  double hi = 0;
  for (double v : map.values) hi = std::max(hi, v);
  std::ostringstream out;
  out << "P5\n" << map.w << ' ' << map.h << "\n255\n";
  for (double v : map.values) {
    const double s = hi > 0 ? std::max(v, 0.0) / hi : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * s))));
  }
  return out.str();
}

std::string overlay_svg(std::span<const double> image, const ActivationMap& map, std::span<const std::uint8_t> mask,
                        std::size_t scale) {
  const std::size_t h = map.h, w = map.w;
  if (image.size() % (h * w) != 0) throw DimensionError("overlay: image does not match map resolution");
  if (!mask.empty()) check_mask(map, mask);
  const std::size_t channels = image.size() / (h * w);
  double lo = 0, hi = 0, mhi = 0;
  for (double v : image) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : map.values) mhi = std::max(mhi, v);
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w * scale << "\" height=\"" << h * scale << "\">\n";
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double g = 0;
      for (std::size_t c = 0; c < channels; ++c) g += image[(i * w + j) * channels + c];
      g /= static_cast<double>(channels);
      const int level = hi > lo ? static_cast<int>(std::lround(255.0 * (g - lo) / (hi - lo))) : 0;
      const double a = mhi > 0 ? 0.6 * std::max(map.at(i, j), 0.0) / mhi : 0.0;
      out << "<rect x=\"" << j * scale << "\" y=\"" << i * scale << "\" width=\"" << scale << "\" height=\"" << scale
          << "\" fill=\"rgb(" << level << ',' << level << ',' << level << ")\"/>";
      if (a > 0)
        out << "<rect x=\"" << j * scale << "\" y=\"" << i * scale << "\" width=\"" << scale << "\" height=\""
            << scale << "\" fill=\"red\" fill-opacity=\"" << a << "\"/>";
      out << '\n';
    }
  if (!mask.empty()) {
    auto inside = [&](long i, long j) {
      return i >= 0 && j >= 0 && i < static_cast<long>(h) && j < static_cast<long>(w) &&
             mask[static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j)];
    };
    for (long i = 0; i < static_cast<long>(h); ++i)
      for (long j = 0; j < static_cast<long>(w); ++j) {
        if (!inside(i, j)) continue;
        const auto x0 = static_cast<std::size_t>(j) * scale, y0 = static_cast<std::size_t>(i) * scale;
        const auto x1 = x0 + scale, y1 = y0 + scale;
        auto line = [&](std::size_t ax, std::size_t ay, std::size_t bx, std::size_t by) {
          out << "<line x1=\"" << ax << "\" y1=\"" << ay << "\" x2=\"" << bx << "\" y2=\"" << by
              << "\" stroke=\"yellow\" stroke-width=\"1\"/>\n";
        };
        if (!inside(i - 1, j)) line(x0, y0, x1, y0);
        if (!inside(i + 1, j)) line(x0, y1, x1, y1);
        if (!inside(i, j - 1)) line(x0, y0, x0, y1);
        if (!inside(i, j + 1)) line(x1, y0, x1, y1);
      }
  }
  std::vector<double> sorted = map.values;
  std::sort(sorted.begin(), sorted.end());
  const double cut = sorted[static_cast<std::size_t>(0.95 * static_cast<double>(sorted.size() - 1))];
  std::size_t i0 = h, i1 = 0, j0 = w, j1 = 0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      if (map.at(i, j) >= cut) {
        i0 = std::min(i0, i);
        i1 = std::max(i1, i);
        j0 = std::min(j0, j);
        j1 = std::max(j1, j);
      }
  if (i0 <= i1)
    out << "<rect x=\"" << j0 * scale << "\" y=\"" << i0 * scale << "\" width=\"" << (j1 - j0 + 1) * scale
        << "\" height=\"" << (i1 - i0 + 1) * scale << "\" fill=\"none\" stroke=\"lime\" stroke-width=\"2\"/>\n";
  out << "</svg>\n";
  return out.str();
}

}  // namespace stpp
