#include "stpp/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stpp/binary_io.hpp"
#include "stpp/config.hpp"
#include "stpp/datasets.hpp"
#include "stpp/errors.hpp"
#include "stpp/interpret.hpp"
#include "stpp/svg.hpp"
#include "stpp/training.hpp"

namespace stpp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::size_t thread_budget() {
  const char* env = std::getenv("STPP_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError(std::string("STPP_THREADS: expected a positive integer, got \"") + env + "\"");
  return static_cast<std::size_t>(v);
}

bool is_csv(const fs::path& p) { return p.extension() == ".csv"; }

LabeledData load_data(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("no such file: " + p.string());
  return is_csv(p) ? load_points_csv(p) : load_image_set(p).data;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

ModelState load_model(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("no such file: " + p.string());
  return load_checkpoint(p);
}

std::size_t input_numel(const BackboneSpec& b) {
  if (b.kind == BackboneSpec::Kind::mlp) return b.widths.empty() ? 0 : b.widths.front();
  return b.image_h * b.image_w * b.channels;
}

void check_compatible(const ModelConfig& m, const LabeledData& d, const std::string& what) {
  if (d.num_classes != m.num_classes)
    throw ConfigError("model.num_classes: model has " + std::to_string(m.num_classes) + ", " + what + " has " +
                      std::to_string(d.num_classes) + " classes");
  if (d.sample_numel() != input_numel(m.backbone))
    throw ConfigError("model.backbone: expects " + std::to_string(input_numel(m.backbone)) + " values per sample, " +
                      what + " has " + std::to_string(d.sample_numel()));
}

RunConfig resolve_config(const std::string& path, const std::string& preset) {
  return path.empty() ? preset_config(preset) : load_config(path);
}

void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty())
    out << text;
  else
    io::write_file_atomic(path, text);
}

// ------------------------------------------------------------------ twomoon plots

struct Box {
  double x0, x1, y0, y1;
};

Box data_box(const LabeledData& d) {
  Box b{1e300, -1e300, 1e300, -1e300};
  const auto x = d.inputs.data();
  for (std::size_t n = 0; n < d.size(); ++n) {
    b.x0 = std::min(b.x0, x[2 * n]);
    b.x1 = std::max(b.x1, x[2 * n]);
    b.y0 = std::min(b.y0, x[2 * n + 1]);
    b.y1 = std::max(b.y1, x[2 * n + 1]);
  }
  const double px = 0.1 * (b.x1 - b.x0), py = 0.1 * (b.y1 - b.y0);
  return {b.x0 - px, b.x1 + px, b.y0 - py, b.y1 + py};
}

const char* class_color(int c) { return c == 0 ? "#1f77b4" : "#d62728"; }
const char* class_tint(int c) { return c == 0 ? "#aec7e8" : "#ff9896"; }
const char* branch_color(BranchKind k) { return k == BranchKind::support ? "#2ca02c" : "#ff7f0e"; }

void draw_points(SvgCanvas& svg, const LabeledData& d) {
  const auto x = d.inputs.data();
  for (std::size_t n = 0; n < d.size(); ++n) svg.circle(x[2 * n], x[2 * n + 1], 2.0, class_color(d.labels[n]));
}

void draw_prototype_sources(SvgCanvas& svg, const ModelState& st, const LabeledData& train) {
  const auto x = train.inputs.data();
  for (auto k : {BranchKind::support, BranchKind::trivial})
    for (const auto& p : st.branch(k).provenance) svg.marker_star(x[2 * p[0]], x[2 * p[0] + 1], 9, branch_color(k));
}

void legend(SvgCanvas& svg) {
  svg.label(40, 20, "support", 12, branch_color(BranchKind::support));
  svg.label(100, 20, "trivial", 12, branch_color(BranchKind::trivial));
}

std::string decision_svg(const ModelState& st, const LabeledData& train) {
  const Box b = data_box(train);
  SvgCanvas svg(520, 420, b.x0, b.x1, b.y0, b.y1);
  const std::size_t G = 100;
  LabeledData grid;
  std::vector<double> pts(G * G * 2);
  for (std::size_t i = 0; i < G; ++i)
    for (std::size_t j = 0; j < G; ++j) {
      pts[(i * G + j) * 2] = b.x0 + (static_cast<double>(j) + 0.5) * (b.x1 - b.x0) / G;
      pts[(i * G + j) * 2 + 1] = b.y0 + (static_cast<double>(i) + 0.5) * (b.y1 - b.y0) / G;
    }
  grid.inputs = Tensor({G * G, 2}, pts);
  grid.labels.assign(G * G, 0);
  grid.num_classes = st.config.num_classes;
  const auto pred = predict(st, grid, 1024);
  for (std::size_t i = 0; i < G; ++i)
    for (std::size_t j = 0; j < G; ++j) {
      const double x = b.x0 + static_cast<double>(j) * (b.x1 - b.x0) / G;
      const double y = b.y0 + static_cast<double>(i) * (b.y1 - b.y0) / G;
      svg.rect_data(x, y, x + (b.x1 - b.x0) / G, y + (b.y1 - b.y0) / G, class_tint(pred[i * G + j]));
    }
  draw_points(svg, train);
  if (!st.support.provenance.empty()) draw_prototype_sources(svg, st, train);
  svg.axes();
  legend(svg);
  return svg.str();
}

std::string data_space_svg(const ModelState& st, const LabeledData& train) {
  const Box b = data_box(train);
  SvgCanvas svg(520, 420, b.x0, b.x1, b.y0, b.y1);
  draw_points(svg, train);
  if (!st.support.provenance.empty()) draw_prototype_sources(svg, st, train);
  svg.axes();
  legend(svg);
  return svg.str();
}

std::string feature_space_svg(const ModelState& st, const LabeledData& train) {
  NoGradGuard guard;
  const auto f = backbone_forward(st, train.inputs);
  const auto z = f.positions.data();
  const std::size_t D = f.positions.dim(1);
  SvgCanvas svg(440, 440, 0, 1.05, 0, 1.05);
  for (std::size_t n = 0; n < train.size(); ++n) svg.circle(z[n * D], z[n * D + 1], 2.0, class_color(train.labels[n]));
  for (auto k : {BranchKind::support, BranchKind::trivial}) {
    const auto& p = st.branch(k).protos;
    const auto v = p.values.data();
    for (std::size_t m = 0; m < p.count(); ++m) {
      svg.line(0, 0, v[m * D], v[m * D + 1], branch_color(k), 1.5);
      svg.marker_star(v[m * D], v[m * D + 1], 8, branch_color(k));
    }
  }
  svg.axes();
  legend(svg);
  return svg.str();
}

std::string loss_svg(const std::vector<TrainLogRow>& log) {
  std::vector<std::pair<double, double>> s, t;
  double lo = 0, hi = 1e-12, xmax = 1;
  for (const auto& r : log) {
    if (r.stage == "fc") continue;
    (r.branch == BranchKind::support ? s : t).push_back({static_cast<double>(r.step), r.total});
    lo = std::min(lo, r.total);
    hi = std::max(hi, r.total);
    xmax = std::max(xmax, static_cast<double>(r.step));
  }
  SvgCanvas svg(560, 360, 0, xmax, lo, hi + 1e-9);
  svg.polyline(s, branch_color(BranchKind::support));
  svg.polyline(t, branch_color(BranchKind::trivial));
  svg.axes();
  legend(svg);
  return svg.str();
}

json accuracy_json(const MetricsReport& r) {
  return {{"ensemble", r.accuracy}, {"support", r.support.accuracy}, {"trivial", r.trivial.accuracy}};
}

// ------------------------------------------------------------------ commands

struct GenArgs {
  std::string kind = "synthetic";
  std::string out;
  std::uint64_t seed = 1;
  std::size_t classes = 5;
  std::size_t per_class = 200;
  std::size_t test_per_class = 50;
  double bc = 0.5;
  double amplitude = SyntheticOptions{}.texture_amplitude;
  double noise = 0.1;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  make_dir(a.out);
  const fs::path dir(a.out);
  if (a.kind == "twomoon") {
    const auto m = gen_two_moons(a.per_class, a.noise, a.seed);
    save_points_csv(m.train, dir / "train.csv");
    save_points_csv(m.test, dir / "test.csv");
    out << "wrote " << (dir / "train.csv").string() << " (" << m.train.size() << ") and " << (dir / "test.csv").string()
        << " (" << m.test.size() << ")\n";
    return 0;
  }
  if (a.kind != "synthetic") throw ConfigError("--kind: expected synthetic or twomoon, got \"" + a.kind + "\"");
  SyntheticOptions opt;
  opt.texture_amplitude = a.amplitude;
  const auto s = gen_synthetic_split(a.classes, a.per_class, a.test_per_class, a.bc, a.seed, opt);
  save_image_set(s.train, dir / "train.stds");
  save_image_set(s.test, dir / "test.stds");
  out << "wrote " << (dir / "train.stds").string() << " (" << s.train.data.size() << ") and "
      << (dir / "test.stds").string() << " (" << s.test.data.size() << ")\n";
  return 0;
}

struct TrainArgs {
  std::string config, preset = "synthetic", data, test, out;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = resolve_config(a.config, a.preset);
  if (a.seed) cfg.train.seed = *a.seed;
  const LabeledData train = load_data(a.data);
  check_compatible(cfg.model, train, "training data");
  std::optional<LabeledData> test;
  if (!a.test.empty()) {
    test = load_data(a.test);
    check_compatible(cfg.model, *test, "test data");
  }
  make_dir(a.out);
  io::write_file_atomic(fs::path(a.out) / "config.json", config_to_json(cfg));
  ExperimentOptions opts;
  opts.out_dir = fs::path(a.out);
  opts.eval = cfg.eval;
  opts.evaluate = test.has_value();
  const auto res = run_experiment(cfg.model, cfg.train, train, test ? *test : train, opts);
  out << "trained " << res.log.size() << " steps; checkpoints in " << a.out << "\n";
  if (test) out << accuracy_json(res.report).dump() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, train, config, out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const ModelState st = load_model(a.checkpoint);
  const LabeledData test = load_data(a.data);
  check_compatible(st.config, test, "test data");
  const LabeledData train = a.train.empty() ? test : load_data(a.train);
  check_compatible(st.config, train, "training data");
  const EvalOptions opts = a.config.empty() ? EvalOptions{} : load_config(a.config).eval;
  emit(report_to_json(evaluate(st, test, train, opts)), a.out, out);
  return 0;
}

struct PruneArgs {
  std::string checkpoint, data, out, config, branch = "both";
  std::optional<std::size_t> k, tau;
};

int cmd_prune(const PruneArgs& a, std::ostream& out) {
  ModelState st = load_model(a.checkpoint);
  const LabeledData train = load_data(a.data);
  check_compatible(st.config, train, "training data");
  PruneConfig pc = a.config.empty() ? PruneConfig{} : load_config(a.config).prune;
  if (a.k) pc.k_nearest = *a.k;
  if (a.tau) pc.tau = *a.tau;
  try {
    pc.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("prune: ") + e.what());
  }
  if (a.branch != "both" && a.branch != "support" && a.branch != "trivial")
    throw ConfigError("--branch: expected both, support or trivial");
  json counts = {{"support", 0}, {"trivial", 0}};
  for (auto k : {BranchKind::support, BranchKind::trivial})
    if (a.branch == "both" || a.branch == to_string(k)) counts[to_string(k)] = prune_branch(st, k, train, pc);
  save_checkpoint(st, a.out);
  out << counts.dump() << "\n";
  return 0;
}

struct SweepArgs {
  std::string config, preset = "synthetic", data, test, out;
  std::vector<double> values{0, 0.01, 0.1, 0.5, 1, 2, 5, 10};
  std::optional<std::uint64_t> seed;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
  RunConfig cfg = resolve_config(a.config, a.preset);
  if (a.seed) cfg.train.seed = *a.seed;
  const LabeledData train = load_data(a.data);
  check_compatible(cfg.model, train, "training data");
  const LabeledData test = load_data(a.test);
  check_compatible(cfg.model, test, "test data");
  const auto rows = sweep_lambda3(cfg.model, cfg.train, cfg.eval, train, test, a.values, thread_budget());
  emit(sweep_to_csv(rows), a.out, out);
  return 0;
}

struct VizArgs {
  std::string checkpoint, data, out;
  std::size_t index = 0;
};

int cmd_viz(const VizArgs& a, std::ostream& out) {
  const ModelState st = load_model(a.checkpoint);
  if (st.config.backbone.kind != BackboneSpec::Kind::conv) throw ConfigError("viz: needs an image model");
  const auto set = load_image_set(a.data);
  check_compatible(st.config, set.data, "data");
  if (a.index >= set.data.size())
    throw ConfigError("--index: " + std::to_string(a.index) + " out of range (" + std::to_string(set.data.size()) +
                      " samples)");
  make_dir(a.out);
  const fs::path dir(a.out);
  NoGradGuard guard;
  const std::size_t idx[1] = {a.index};
  const Tensor x = set.data.batch(idx);
  const auto f = backbone_forward(st, x);
  const int cls = set.data.labels[a.index];
  const auto& bb = st.config.backbone;
  const auto img = x.data();
  const auto mask = set.data.masks.empty() ? std::span<const std::uint8_t>{} : set.data.mask(a.index);
  for (auto k : {BranchKind::support, BranchKind::trivial}) {
    const auto r = forward_branch(st, k, f);
    const auto& protos = st.branch(k).protos;
    const std::string name = to_string(k);
    const auto cmap = class_map(r, protos, 0, cls, bb.image_h, bb.image_w);
    io::write_file_atomic(dir / (name + "_class.pgm"), map_to_pgm(clamp_nonnegative(cmap)));
    io::write_file_atomic(dir / (name + "_overlay.svg"), overlay_svg(img, clamp_nonnegative(cmap), mask));
    for (std::size_t m = 0; m < protos.count(); ++m) {
      if (protos.class_of[m] != cls) continue;
      const auto pm = upsample_map(prototype_map(r, 0, m), bb.image_h, bb.image_w);
      io::write_file_atomic(dir / (name + "_proto" + std::to_string(m) + ".pgm"), map_to_pgm(clamp_nonnegative(pm)));
    }
  }
  out << "wrote maps for sample " << a.index << " (class " << cls << ") to " << a.out << "\n";
  return 0;
}

struct MoonArgs {
  std::string out;
  std::uint64_t seed = 1;
  std::optional<std::size_t> epochs;
  std::size_t per_class = 400;
  double noise = 0.1;
};

int cmd_twomoon(const MoonArgs& a, std::ostream& out) {
  RunConfig cfg = preset_config("twomoon");
  cfg.train.seed = a.seed;
  if (a.epochs) cfg.train.joint_epochs = *a.epochs;
  const bool untrained = a.epochs && *a.epochs == 0;
  const auto moons = gen_two_moons(a.per_class, a.noise, a.seed);
  make_dir(a.out);
  const fs::path dir(a.out);

  ModelState st;
  std::vector<TrainLogRow> log;
  MetricsReport report;
  if (untrained) {
    st = ModelState::initialize(cfg.model, cfg.train.seed);
    report = evaluate(st, moons.test, moons.train, cfg.eval);
  } else {
    ExperimentOptions opts;
    opts.eval = cfg.eval;
    auto res = run_experiment(cfg.model, cfg.train, moons.train, moons.test, opts);
    st = std::move(res.state);
    log = std::move(res.log);
    report = res.report;
  }

  json rep;
  rep["seed"] = a.seed;
  rep["joint_epochs"] = cfg.train.joint_epochs;
  rep["trained"] = !untrained;
  rep["train_samples"] = moons.train.size();
  rep["test_samples"] = moons.test.size();
  rep["accuracy"] = accuracy_json(report);
  if (untrained) {
    rep["boundary_distance"] = nullptr;
  } else {
    const auto g = two_moon_geometry(st, moons.train);
    rep["boundary_distance"] = {{"support", g.support}, {"trivial", g.trivial}};
    json src = json::object();
    for (auto k : {BranchKind::support, BranchKind::trivial}) {
      json pts = json::array();
      for (const auto& p : st.branch(k).provenance)
        pts.push_back({moons.train.inputs.data()[2 * p[0]], moons.train.inputs.data()[2 * p[0] + 1]});
      src[to_string(k)] = pts;
    }
    rep["prototype_sources"] = src;
  }
  io::write_file_atomic(dir / "decision.svg", decision_svg(st, moons.train));
  io::write_file_atomic(dir / "data_space.svg", data_space_svg(st, moons.train));
  io::write_file_atomic(dir / "feature_space.svg", feature_space_svg(st, moons.train));
  io::write_file_atomic(dir / "loss.svg", loss_svg(log));
  io::write_file_atomic(dir / "report.json", rep.dump(2) + "\n");
  out << rep["accuracy"].dump() << "\n";
  if (!untrained) out << rep["boundary_distance"].dump() << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Support and trivial prototype networks"};
  app.require_subcommand(0, 1);
  bool print_default = false;
  std::string root_preset = "synthetic";
  app.add_flag("--print-default-config", print_default, "Print the default JSON configuration");
  app.add_option("--preset", root_preset, "Preset for --print-default-config (synthetic, twomoon)");

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a dataset (train and test files)");
  g->add_option("--kind", gen.kind, "synthetic or twomoon");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed);
  g->add_option("--classes", gen.classes, "Synthetic classes");
  g->add_option("--per-class", gen.per_class, "Training samples per class (two-moon: points per class)");
  g->add_option("--test-per-class", gen.test_per_class, "Synthetic test samples per class");
  g->add_option("--bc", gen.bc, "Background correlation");
  g->add_option("--amplitude", gen.amplitude, "Background texture amplitude");
  g->add_option("--noise", gen.noise, "Two-moon noise");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write checkpoints and the loss log");
  t->add_option("--config", tr.config, "JSON config (default: preset)");
  t->add_option("--preset", tr.preset);
  t->add_option("--data", tr.data, "Training set")->required();
  t->add_option("--test", tr.test, "Test set; enables metrics.json");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.seed);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint; prints the metrics JSON");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data, "Test set")->required();
  e->add_option("--train", ev.train, "Training set for AIPD/AIFD (default: --data)");
  e->add_option("--config", ev.config, "JSON config whose eval section is used");
  e->add_option("--out", ev.out, "Write the report here instead of stdout");

  PruneArgs pr;
  auto* p = app.add_subcommand("prune", "Prune prototypes by their nearest training patches");
  p->add_option("--checkpoint", pr.checkpoint)->required();
  p->add_option("--data", pr.data, "Training set")->required();
  p->add_option("--out", pr.out, "Pruned checkpoint")->required();
  p->add_option("--config", pr.config, "JSON config whose prune section is used");
  p->add_option("--k", pr.k, "Nearest patches per prototype");
  p->add_option("--tau", pr.tau, "Minimum own-class patches to keep a prototype");
  p->add_option("--branch", pr.branch, "both, support or trivial");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep-lambda3", "Train and evaluate once per lambda3 value; prints CSV");
  s->add_option("--config", sw.config);
  s->add_option("--preset", sw.preset);
  s->add_option("--data", sw.data, "Training set")->required();
  s->add_option("--test", sw.test, "Test set")->required();
  s->add_option("--values", sw.values, "Comma-separated lambda3 values")->delimiter(',');
  s->add_option("--out", sw.out, "Write the CSV here instead of stdout");
  s->add_option("--seed", sw.seed);

  VizArgs vz;
  auto* v = app.add_subcommand("viz", "Export activation maps of one sample as PGM and SVG");
  v->add_option("--checkpoint", vz.checkpoint)->required();
  v->add_option("--data", vz.data, "Image set")->required();
  v->add_option("--index", vz.index, "Sample index");
  v->add_option("--out", vz.out, "Output directory")->required();

  MoonArgs mo;
  auto* m = app.add_subcommand("twomoon", "Two-moon experiment with plots and a geometry report");
  m->add_option("--out", mo.out, "Output directory")->required();
  m->add_option("--seed", mo.seed);
  m->add_option("--epochs", mo.epochs, "Joint epochs (0 = untrained)");
  m->add_option("--per-class", mo.per_class);
  m->add_option("--noise", mo.noise);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& pe) {
    err << "error: " << pe.what() << "\n";
    return 2;
  }

  try {
    if (print_default) {
      out << config_to_json(preset_config(root_preset));
      return 0;
    }
    if (*g) return cmd_gen(gen, out);
    if (*t) return cmd_train(tr, out);
    if (*e) return cmd_eval(ev, out);
    if (*p) return cmd_prune(pr, out);
    if (*s) return cmd_sweep(sw, out);
    if (*v) return cmd_viz(vz, out);
    if (*m) return cmd_twomoon(mo, out);
    out << app.help();
    return 0;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return 2;
  } catch (const IoError& ex) {
    err << "i/o error: " << ex.what() << "\n";
    return 3;
  } catch (const ParseError& ex) {
    err << "i/o error: " << ex.what() << "\n";
    return 3;
  } catch (const NumericalError& ex) {
    err << "numerical error: " << ex.what() << "\n";
    return 4;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
}

}  // namespace stpp
