// Acceptance suite: one PASS/FAIL line per criterion. Arguments select a
// subset (e.g. "acceptance AC1 AC7"); no arguments runs everything.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "loss_cases.hpp"
#include "metric_oracles.hpp"
#include "stpp/binary_io.hpp"
#include "stpp/cli.hpp"
#include "stpp/config.hpp"
#include "stpp/datasets.hpp"
#include "stpp/training.hpp"

using namespace stpp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- synthetic

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

ExperimentResult synthetic_run(double bc, std::uint64_t seed, SimilarityKind kind) {
  RunConfig cfg = preset_config("synthetic");
  cfg.model.similarity = kind;
  cfg.train.seed = seed;
  const auto split = gen_synthetic_split(cfg.model.num_classes, 200, 50, bc, seed);
  ExperimentOptions opt;
  opt.eval = cfg.eval;
  return run_experiment(cfg.model, cfg.train, split.train.data, split.test.data, opt);
}

// The background_correlation = 0.8 models, shared by AC4-AC6.
struct CorrelatedRuns {
  std::vector<MetricsReport> reports;
  std::vector<std::pair<std::size_t, std::size_t>> pruned;  // support, trivial
  double seconds = 0;
};

const CorrelatedRuns& correlated_runs() {
  static const CorrelatedRuns runs = [] {
    CorrelatedRuns r;
    const auto t0 = std::chrono::steady_clock::now();
    const PruneConfig prune{6, 3};
    for (auto seed : kSeeds) {
      auto res = synthetic_run(0.8, seed, SimilarityKind::cosine);
      r.reports.push_back(res.report);
      const auto train = gen_synthetic_split(5, 200, 50, 0.8, seed).train.data;
      auto st = res.state.clone();
      const auto s = prune_branch(st, BranchKind::support, train, prune);
      const auto t = prune_branch(st, BranchKind::trivial, train, prune);
      r.pruned.push_back({s, t});
      std::printf("  bc=0.8 seed %llu: ensemble %.3f support %.3f trivial %.3f | CH %.2f / %.2f | OIRR %.2f / %.2f\n",
                  static_cast<unsigned long long>(seed), res.report.accuracy, res.report.support.accuracy,
                  res.report.trivial.accuracy, res.report.support.ch, res.report.trivial.ch, res.report.support.oirr,
                  res.report.trivial.oirr);
      std::fflush(stdout);
    }
    r.seconds = seconds_since(t0);
    return r;
  }();
  return runs;
}

// ---------------------------------------------------------------- criteria

Outcome ac1() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string where;
  std::size_t checks = 0;
  for (const auto& c : testutil::loss_cases())
    for (std::uint64_t s = 1; s <= 20; ++s) {
      const auto r = c.check(s);
      ++checks;
      if (r.max_rel > worst) worst = r.max_rel, where = c.name;
    }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60,
          fmt("%zu checks, max rel err %.2e (%s), %.1fs", checks, worst, where.c_str(), secs)};
}

Outcome ac2() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = preset_config("twomoon");
  const auto moons = gen_two_moons(400, 0.1, 1);
  ExperimentOptions opt;
  opt.eval = cfg.eval;
  const auto res = run_experiment(cfg.model, cfg.train, moons.train, moons.test, opt);
  const auto g = two_moon_geometry(res.state, moons.train);
  const double secs = seconds_since(t0);
  const double acc = res.report.accuracy;
  return {acc >= 0.99 && g.support < g.trivial && g.support < 0.5 * g.trivial && secs < 120,
          fmt("test acc %.4f, boundary distance support %.4f trivial %.4f, %.1fs", acc, g.support, g.trivial, secs)};
}

Outcome ac3() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = synthetic_run(0.5, 1, SimilarityKind::projection);
  const auto& s = res.report.support;
  const auto& t = res.report.trivial;
  const double secs = seconds_since(t0);
  return {s.aifd - s.aipd > 0.02 && t.aipd - t.aifd > 0.02 && secs < 600,
          fmt("support AIPD %.4f AIFD %.4f, trivial AIPD %.4f AIFD %.4f, %.1fs", s.aipd, s.aifd, t.aipd, t.aifd,
              secs)};
}

Outcome ac4() {
  const auto& runs = correlated_runs();
  bool ok = true;
  double e = 0, tr = 0;
  std::string per;
  for (const auto& r : runs.reports) {
    ok &= r.accuracy >= r.support.accuracy - 0.005 && r.accuracy >= r.trivial.accuracy - 0.005;
    e += r.accuracy;
    tr += r.trivial.accuracy;
    per += fmt(" %.3f/%.3f/%.3f", r.accuracy, r.support.accuracy, r.trivial.accuracy);
  }
  const double n = static_cast<double>(runs.reports.size());
  ok &= e / n >= tr / n;
  return {ok, fmt("ensemble/support/trivial:%s, mean ensemble %.4f trivial %.4f", per.c_str(), e / n, tr / n)};
}

Outcome ac5() {
  const auto& runs = correlated_runs();
  double chs = 0, cht = 0, os = 0, ot = 0;
  for (const auto& r : runs.reports) {
    chs += r.support.ch;
    cht += r.trivial.ch;
    os += r.support.oirr;
    ot += r.trivial.oirr;
  }
  const double n = static_cast<double>(runs.reports.size());
  chs /= n, cht /= n, os /= n, ot /= n;
  return {chs >= cht + 5 && os < ot,
          fmt("mean CH support %.2f trivial %.2f (gap %+.2f), mean OIRR support %.2f trivial %.2f", chs, cht, chs - cht,
              os, ot)};
}

Outcome ac6() {
  const auto& runs = correlated_runs();
  bool ok = true;
  std::string per;
  for (auto [s, t] : runs.pruned) {
    ok &= t >= s;
    per += fmt(" %zu/%zu", s, t);
  }
  return {ok, fmt("pruned support/trivial per seed:%s", per.c_str())};
}

Outcome ac7() {
  const auto rep = testutil::run_metric_oracles(50, 2024);
  return {rep.instances == 50 && rep.mismatches == 0,
          fmt("%zu instances, %zu mismatches%s%s", rep.instances, rep.mismatches, rep.first.empty() ? "" : ", first ",
              rep.first.c_str())};
}

PrototypeSet proto_set(std::vector<double> rows, std::size_t per, std::size_t classes, std::size_t d) {
  PrototypeSet p;
  p.values = Tensor({per * classes, d}, std::move(rows));
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t j = 0; j < per; ++j) p.class_of.push_back(static_cast<int>(c));
  p.num_classes = classes;
  return p;
}

Outcome ac8() {
  double worst = 0;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0, 1);
  for (std::size_t classes : {2, 3, 5}) {
    const std::size_t per = 3, d = 6;
    // orthonormal rows per class by Gram-Schmidt
    std::vector<double> ortho;
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<std::vector<double>> basis;
      while (basis.size() < per) {
        std::vector<double> v(d);
        for (double& x : v) x = g(rng);
        for (const auto& b : basis) {
          const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
          for (std::size_t j = 0; j < d; ++j) v[j] -= dot * b[j];
        }
        const double nrm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        for (double& x : v) x /= nrm;
        basis.push_back(v);
      }
      for (const auto& b : basis) ortho.insert(ortho.end(), b.begin(), b.end());
    }
    auto ps = proto_set(ortho, per, classes, d);
    worst = std::max(worst, std::fabs(orthonormality_loss(ps).item()));

    std::vector<double> same;
    for (std::size_t i = 0; i < per * classes; ++i)
      for (std::size_t j = 0; j < d; ++j) same.push_back(j == 0 ? 1.0 : 0.0);
    const double pairs = classes * (classes - 1) / 2.0;
    auto id = proto_set(same, per, classes, d);
    worst = std::max(worst, std::fabs(closeness_loss(id).item() - pairs));
    id.kind = BranchKind::trivial;
    worst = std::max(worst, std::fabs(discrimination_loss(id).item() - pairs));

    const std::vector<double> flat(4 * classes, 0.37);
    const std::vector<int> labels{0, 1, 0, static_cast<int>(classes) - 1};
    worst = std::max(worst, std::fabs(cross_entropy(Tensor({4, classes}, flat), labels).item() -
                                      std::log(static_cast<double>(classes))));
  }
  return {worst <= 1e-10, fmt("max abs deviation %.2e over C in {2,3,5}", worst)};
}

// Runs every subcommand twice into separate directories and compares bytes.
Outcome ac9() {
  const auto root = fs::temp_directory_path() / "stpp_acceptance_determinism";
  fs::remove_all(root);
  auto run = [](std::vector<std::string> args, std::string& captured) {
    args.insert(args.begin(), "stpp");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    captured = out.str();
    return code;
  };
  RunConfig cfg = preset_config("synthetic");
  cfg.train.warmup_epochs = 1;
  cfg.train.joint_epochs = 2;
  cfg.train.fc_iters = 2;
  cfg.eval.dauc_samples = 4;
  fs::create_directories(root);
  const auto cfg_path = (root / "cfg.json").string();
  io::write_file_atomic(cfg_path, config_to_json(cfg));

  std::vector<std::string> stdouts[2];
  std::size_t compared = 0, differing = 0;
  std::string first_diff;
  bool all_ok = true;
  for (int rep = 0; rep < 2; ++rep) {
    const auto d = root / ("run" + std::to_string(rep));
    const auto p = [&](const char* name) { return (d / name).string(); };
    const std::vector<std::vector<std::string>> cmds = {
        {"gen-data", "--out", p("data"), "--per-class", "20", "--test-per-class", "6", "--bc", "0.8", "--seed", "4"},
        {"gen-data", "--kind", "twomoon", "--out", p("moondata"), "--per-class", "50", "--seed", "4"},
        {"train", "--config", cfg_path, "--data", p("data/train.stds"), "--test", p("data/test.stds"), "--out",
         p("train"), "--seed", "4"},
        {"eval", "--checkpoint", p("train/final.stpp"), "--data", p("data/test.stds"), "--train",
         p("data/train.stds"), "--config", cfg_path},
        {"prune", "--checkpoint", p("train/final.stpp"), "--data", p("data/train.stds"), "--out", p("pruned.stpp")},
        {"sweep-lambda3", "--config", cfg_path, "--data", p("data/train.stds"), "--test", p("data/test.stds"),
         "--values", "0,1", "--out", p("sweep.csv")},
        {"viz", "--checkpoint", p("train/final.stpp"), "--data", p("data/test.stds"), "--index", "2", "--out",
         p("viz")},
        {"twomoon", "--out", p("moon"), "--epochs", "30", "--per-class", "100", "--seed", "4"},
    };
    for (const auto& c : cmds) {
      std::string captured;
      if (run(c, captured) != 0) all_ok = false;
      stdouts[rep].push_back(captured);
    }
  }
  std::set<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root / "run0"))
    if (e.is_regular_file()) files.insert(fs::relative(e.path(), root / "run0"));
  for (const auto& f : files) {
    ++compared;
    const auto b = root / "run1" / f;
    if (!fs::exists(b) || io::read_file(root / "run0" / f) != io::read_file(b)) {
      if (differing++ == 0) first_diff = f.string();
    }
  }
  // stdout mentions the run directory, so compare with it masked out
  for (std::size_t i = 0; i < stdouts[0].size(); ++i) {
    auto mask = [&](std::string s, int rep) {
      const std::string dir = (root / ("run" + std::to_string(rep))).string();
      for (auto pos = s.find(dir); pos != std::string::npos; pos = s.find(dir)) s.replace(pos, dir.size(), "RUN");
      return s;
    };
    ++compared;
    if (mask(stdouts[0][i], 0) != mask(stdouts[1][i], 1) && differing++ == 0) first_diff = "stdout #" + std::to_string(i);
  }
  fs::remove_all(root);
  return {all_ok && differing == 0 && files.size() > 10,
          fmt("%s, %zu artifacts compared, %zu differ%s%s", all_ok ? "all commands exit 0" : "a command failed",
              compared, differing, first_diff.empty() ? "" : ", first ", first_diff.c_str())};
}

Outcome ac10() {
  const std::vector<double> values{0, 0.5, 1, 2, 10};
  std::size_t shaped = 0;
  std::string per;
  for (auto seed : kSeeds) {
    RunConfig cfg = preset_config("synthetic");
    cfg.train.seed = seed;
    const auto split = gen_synthetic_split(cfg.model.num_classes, 200, 50, 0.5, seed);
    const auto rows = sweep_lambda3(cfg.model, cfg.train, cfg.eval, split.train.data, split.test.data, values);
    const double mid = (rows[1].report.accuracy + rows[2].report.accuracy + rows[3].report.accuracy) / 3;
    const double ends = std::max(rows[0].report.accuracy, rows[4].report.accuracy);
    shaped += mid >= ends;
    per += fmt(" [%.3f %.3f %.3f %.3f %.3f]", rows[0].report.accuracy, rows[1].report.accuracy,
               rows[2].report.accuracy, rows[3].report.accuracy, rows[4].report.accuracy);
    std::printf("  lambda3 sweep seed %llu:%s\n", static_cast<unsigned long long>(seed),
                per.substr(per.rfind(" [")).c_str());
    std::fflush(stdout);
  }
  return {shaped >= 2, fmt("large-benchmark accuracies declared not reproducible; inverted U in %zu/3 seeds:%s",
                           shaped, per.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5},
      {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}, {"AC9", ac9}, {"AC10", ac10},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
