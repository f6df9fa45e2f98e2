#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "stpp/interpret.hpp"

namespace testutil {

inline double ch_oracle(const std::vector<double>& map, const std::vector<std::uint8_t>& mask) {
  double in = 0, all = 0;
  for (std::size_t k = 0; k < map.size(); ++k) {
    const double v = map[k] > 0 ? map[k] : 0;
    all += v;
    if (mask[k] == 1) in += v;
  }
  return all > 0 ? 100 * in / all : 0;
}

inline double oirr_oracle(const std::vector<double>& map, const std::vector<std::uint8_t>& mask) {
  std::vector<double> in, out;
  for (std::size_t k = 0; k < map.size(); ++k) (mask[k] ? in : out).push_back(map[k] > 0 ? map[k] : 0);
  double a = 0, b = 0;
  for (double v : in) a += v;
  for (double v : out) b += v;
  return (b / out.size()) / (a / in.size());
}

inline double iou_oracle(const std::vector<double>& map, const std::vector<std::uint8_t>& mask) {
  std::vector<double> c(map.size());
  for (std::size_t k = 0; k < map.size(); ++k) c[k] = std::max(map[k], 0.0);
  const double lo = *std::min_element(c.begin(), c.end()), hi = *std::max_element(c.begin(), c.end());
  std::set<std::size_t> sel, obj, inter, uni;
  for (std::size_t k = 0; k < c.size(); ++k) {
    if (hi == lo || (c[k] - lo) / (hi - lo) > 0.5) sel.insert(k);
    if (mask[k]) obj.insert(k);
  }
  std::set_intersection(sel.begin(), sel.end(), obj.begin(), obj.end(), std::inserter(inter, inter.begin()));
  std::set_union(sel.begin(), sel.end(), obj.begin(), obj.end(), std::inserter(uni, uni.begin()));
  return uni.empty() ? 0 : 100.0 * inter.size() / uni.size();
}

// Softmax of fixed random linear scores over the pixels.
struct ProbeModel {
  std::size_t classes = 3;
  std::vector<double> w;
  ProbeModel(std::size_t pixels, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0, 1);
    w.resize(classes * pixels);
    for (double& v : w) v = g(rng);
  }
  std::vector<double> probs(const std::vector<double>& img) const {
    const std::size_t n = img.size();
    std::vector<double> z(classes, 0);
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t i = 0; i < n; ++i) z[c] += w[c * n + i] * img[i];
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (double& v : z) s += (v = std::exp(v - m));
    for (double& v : z) v /= s;
    return z;
  }
  stpp::BatchProbabilityFn fn() const {
    return [this](std::span<const double> images, std::size_t count) {
      std::vector<double> out;
      const std::size_t n = images.size() / count;
      for (std::size_t b = 0; b < count; ++b) {
        auto p = probs(std::vector<double>(images.begin() + b * n, images.begin() + (b + 1) * n));
        out.insert(out.end(), p.begin(), p.end());
      }
      return out;
    };
  }
};

// One pixel deleted per step, every intermediate image scored on its own.
inline double dauc_oracle(const ProbeModel& model, std::vector<double> img, const std::vector<double>& map) {
  std::vector<std::pair<double, std::size_t>> rank;
  for (std::size_t k = 0; k < map.size(); ++k) rank.push_back({-std::max(map[k], 0.0), k});
  std::stable_sort(rank.begin(), rank.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  const auto p0 = model.probs(img);
  const std::size_t pred = std::max_element(p0.begin(), p0.end()) - p0.begin();
  std::vector<double> curve{p0[pred]};
  for (const auto& [v, k] : rank) {
    img[k] = 0;
    curve.push_back(model.probs(img)[pred]);
  }
  double area = 0;
  const double n = static_cast<double>(map.size());
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) area += (curve[i] + curve[i + 1]) / 2 / n;
  return 100 * area;
}

inline double cos_dist(const double* a, const double* b, std::size_t d) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t j = 0; j < d; ++j) ab += a[j] * b[j], aa += a[j] * a[j], bb += b[j] * b[j];
  return 1 - ab / std::sqrt(aa * bb);
}

inline double sim(const double* a, const double* b, std::size_t d, stpp::SimilarityKind kind) {
  double ab = 0, bb = 0;
  for (std::size_t j = 0; j < d; ++j) ab += a[j] * b[j], bb += b[j] * b[j];
  return kind == stpp::SimilarityKind::cosine ? ab / std::sqrt(bb) : std::fabs(ab);
}

inline stpp::ProtoDistances aipd_aifd_oracle(const stpp::Tensor& protos, const std::vector<int>& cls,
                                              const stpp::LatentBank& bank, stpp::SimilarityKind kind) {
  const std::size_t m = cls.size(), d = protos.dim(1);
  const double* p = protos.data().data();
  const double* z = bank.latent.data().data();
  std::vector<std::vector<double>> near(m);
  for (std::size_t i = 0; i < m; ++i) {
    double best = -1e300;
    std::size_t arg = 0;
    for (std::size_t r = 0; r < bank.rows(); ++r)
      if (bank.label[r] == cls[i] && sim(z + r * d, p + i * d, d, kind) > best)
        best = sim(z + r * d, p + i * d, d, kind), arg = r;
    near[i].assign(z + arg * d, z + (arg + 1) * d);
  }
  double a = 0, f = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j)
      if (cls[i] != cls[j]) {
        a += cos_dist(p + i * d, p + j * d, d);
        f += cos_dist(near[i].data(), near[j].data(), d);
        ++pairs;
      }
  return {a / pairs, f / pairs};
}

// Removal flags from a full sort of the bank for every prototype.
inline std::vector<bool> prune_oracle(const stpp::Tensor& protos, const std::vector<int>& cls,
                                      const stpp::LatentBank& bank, stpp::SimilarityKind kind, std::size_t k,
                                      std::size_t tau) {
  const std::size_t d = protos.dim(1);
  std::vector<bool> out;
  std::vector<std::size_t> owns;
  for (std::size_t i = 0; i < cls.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t r = 0; r < bank.rows(); ++r)
      all.push_back({-sim(bank.latent.data().data() + r * d, protos.data().data() + i * d, d, kind), r});
    std::sort(all.begin(), all.end());
    std::size_t own = 0;
    for (std::size_t t = 0; t < k; ++t) own += bank.label[all[t].second] == cls[i];
    out.push_back(own < tau);
    owns.push_back(own);
  }
  // a class never loses its last prototype: the one with most own hits stays
  for (int c = 0; c <= *std::max_element(cls.begin(), cls.end()); ++c) {
    int keep = -1;
    bool kept = false;
    for (std::size_t i = 0; i < cls.size(); ++i) {
      if (cls[i] != c) continue;
      kept |= !out[i];
      if (keep < 0 || owns[i] > owns[keep]) keep = static_cast<int>(i);
    }
    if (keep >= 0 && !kept) out[keep] = false;
  }
  return out;
}

inline stpp::LatentBank random_bank(std::size_t rows, std::size_t d, std::size_t classes, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 1);
  std::vector<double> v(rows * d);
  stpp::LatentBank bank;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      v[r * d + j] = g(rng);
      s += v[r * d + j] * v[r * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) v[r * d + j] /= std::sqrt(s);
    bank.label.push_back(static_cast<int>(r % classes));
    bank.where.push_back({r, 0, 0});
  }
  bank.latent = stpp::Tensor({rows, d}, std::move(v));
  return bank;
}

struct OracleReport {
  std::size_t instances = 0;
  std::size_t mismatches = 0;
  std::string first;
};

// Every saliency, distance and pruning metric against its reference on
// `count` random 4x4 instances with at most six prototypes.
inline OracleReport run_metric_oracles(std::size_t count, std::uint64_t seed) {
  OracleReport rep;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  auto fail = [&](const std::string& what) {
    if (rep.mismatches++ == 0) rep.first = what;
  };
  auto close = [](double a, double b) { return std::fabs(a - b) <= 1e-9 * std::max(1.0, std::fabs(b)); };
  for (std::size_t t = 0; t < count; ++t) {
    ++rep.instances;
    const std::size_t h = 4, w = 4, n = h * w;
    std::vector<double> map(n), img(n);
    std::vector<std::uint8_t> mask(n);
    for (std::size_t k = 0; k < n; ++k) {
      map[k] = g(rng) + 0.3;
      img[k] = g(rng);
      mask[k] = g(rng) > 0.3;
    }
    mask[0] = 1;
    mask[n - 1] = 0;
    const stpp::ActivationMap am(h, w, map);
    if (!close(stpp::content_heatmap(am, mask), ch_oracle(map, mask))) fail("CH");
    const double o = oirr_oracle(map, mask);
    if (std::isfinite(o) ? !close(stpp::oirr(am, mask), o) : std::isfinite(stpp::oirr(am, mask))) fail("OIRR");
    if (!close(stpp::iou_at_half(am, mask), iou_oracle(map, mask))) fail("IoU");
    ProbeModel model(n, rng);
    if (!close(stpp::deletion_auc(model.fn(), img, 1, am, n), dauc_oracle(model, img, map))) fail("DAUC");

    const std::size_t classes = 2 + t / 4 % 2, per = 1 + t / 2 % (classes == 2 ? 3 : 2), d = 3 + t % 4;
    const auto kind = t % 2 ? stpp::SimilarityKind::cosine : stpp::SimilarityKind::projection;
    auto bank = random_bank(classes * (4 + t % 5), d, classes, rng);
    auto protos = random_bank(classes * per, d, classes, rng);
    if (!close(stpp::aipd_aifd(protos.latent, protos.label, bank, kind).aipd,
               aipd_aifd_oracle(protos.latent, protos.label, bank, kind).aipd) ||
        !close(stpp::aipd_aifd(protos.latent, protos.label, bank, kind).aifd,
               aipd_aifd_oracle(protos.latent, protos.label, bank, kind).aifd))
      fail("AIPD/AIFD");
    const std::size_t k = 1 + t % 6, tau = 1 + t % k;
    const auto dec = stpp::prune_decisions(protos.latent, protos.label, classes, bank, kind, {k, tau});
    const auto want = prune_oracle(protos.latent, protos.label, bank, kind, k, tau);
    if (dec.remove != want) fail("prune");
  }
  return rep;
}

}  // namespace testutil
