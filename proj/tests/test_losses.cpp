#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "loss_cases.hpp"
#include "stpp/errors.hpp"
#include "stpp/losses.hpp"
#include "support.hpp"

using namespace stpp;
using testutil::random_tensor;
using testutil::unit_rows;

namespace {

PrototypeSet make_protos(BranchKind kind, Tensor values, std::size_t classes) {
  PrototypeSet p;
  p.kind = kind;
  const std::size_t per = values.dim(0) / classes;
  p.values = std::move(values);
  p.num_classes = classes;
  for (std::size_t i = 0; i < p.values.dim(0); ++i) p.class_of.push_back(static_cast<int>(i / per));
  return p;
}

double dot_rows(const Tensor& t, std::size_t a, std::size_t b) {
  const std::size_t d = t.dim(1);
  double s = 0;
  for (std::size_t j = 0; j < d; ++j) s += t[a * d + j] * t[b * d + j];
  return s;
}

// Sum over class pairs of the min or max cross-class dot product.
double pair_oracle(const PrototypeSet& p, bool take_max) {
  double total = 0;
  for (std::size_t c1 = 0; c1 < p.num_classes; ++c1)
    for (std::size_t c2 = c1 + 1; c2 < p.num_classes; ++c2) {
      double best = take_max ? -1e300 : 1e300;
      for (auto m : p.members(static_cast<int>(c1)))
        for (auto n : p.members(static_cast<int>(c2))) {
          const double v = dot_rows(p.values, m, n);
          best = take_max ? std::max(best, v) : std::min(best, v);
        }
      total += best;
    }
  return total;
}

double gram_oracle(const PrototypeSet& p) {
  double total = 0;
  for (std::size_t c = 0; c < p.num_classes; ++c) {
    const auto mem = p.members(static_cast<int>(c));
    for (std::size_t i = 0; i < mem.size(); ++i)
      for (std::size_t j = 0; j < mem.size(); ++j) {
        const double g = dot_rows(p.values, mem[i], mem[j]) - (i == j ? 1.0 : 0.0);
        total += g * g;
      }
  }
  return total;
}

ModelState plain_state(std::size_t channels, std::size_t classes, std::size_t per_class, SimilarityKind kind,
                       std::uint64_t seed) {
  ModelConfig cfg;
  cfg.backbone.conv.back().out_channels = channels;
  cfg.addon.enabled = false;
  cfg.num_classes = classes;
  cfg.protos_per_class = per_class;
  cfg.similarity = kind;
  return ModelState::initialize(cfg, seed);
}

double sim_oracle(const Tensor& feats, std::size_t row, const Tensor& protos, std::size_t m, SimilarityKind kind) {
  const std::size_t d = feats.dim(1);
  double n = 0, dot = 0, pn = 0;
  for (std::size_t j = 0; j < d; ++j) {
    n += feats[row * d + j] * feats[row * d + j];
    pn += protos[m * d + j] * protos[m * d + j];
    dot += feats[row * d + j] * protos[m * d + j];
  }
  const double c = dot / std::sqrt(n);
  return kind == SimilarityKind::cosine ? c / std::sqrt(pn) : std::fabs(c);
}

SimilarityResult forward_on(const ModelState& st, BranchKind k, const Tensor& feats, std::size_t batch) {
  return forward_branch(st, k, FeatureBatch{feats, batch, 2, 2});
}

}  // namespace

TEST_CASE("label_from_one_hot") {
  const std::vector<double> ok{0, 0, 1};
  CHECK(label_from_one_hot(ok) == 2);
  const std::vector<double> none{0, 0, 0}, two{1, 0, 1}, frac{0.5, 0.5};
  CHECK_THROWS_AS(label_from_one_hot(none), DomainError);
  CHECK_THROWS_AS(label_from_one_hot(two), DomainError);
  CHECK_THROWS_AS(label_from_one_hot(frac), DomainError);
}

TEST_CASE("cross entropy examples") {
  const std::vector<int> zero{0}, one{1};
  CHECK(cross_entropy(Tensor({1, 2}, {0, 0}), zero).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(cross_entropy(Tensor({1, 2}, {50, 0}), zero).item() < 1e-20);
  const double z = std::exp(1.2) + std::exp(-0.3) + std::exp(0.5);
  CHECK(std::fabs(cross_entropy(Tensor({1, 3}, {1.2, -0.3, 0.5}), one).item() + std::log(std::exp(-0.3) / z)) <
        1e-12);
  const std::vector<int> two{0, 1};
  CHECK(cross_entropy(Tensor({2, 2}, {0, 0, 50, 0}), two).item() ==
        doctest::Approx((std::log(2.0) + 50 + std::log1p(std::exp(-50.0))) / 2).epsilon(1e-12));
}

TEST_CASE("cross entropy is nonnegative and finite for large logits") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    auto logits = random_tensor({4, 5}, rng, 200.0, false);
    std::vector<int> y{0, 1, 2, 4};
    const double v = cross_entropy(logits, y).item();
    CHECK(std::isfinite(v));
    CHECK(v >= 0);
  }
}

TEST_CASE("clustering and separation on exact matches") {
  auto st = plain_state(3, 2, 1, SimilarityKind::cosine, 1);
  st.support.protos.values = Tensor({2, 3}, {1, 0, 0, 0, 1, 0}, true);
  const std::vector<int> y{0};
  // one position equals the own-class prototype, others orthogonal to both
  Tensor feats({4, 3}, {2, 0, 0, 0, 0, 1, 0, 0, -1, 0, 0, 3});
  auto r = forward_on(st, BranchKind::support, feats, 1);
  CHECK(clustering_loss(r.pooled, y, st.support.protos).item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::fabs(separation_loss(r.pooled, y, st.support.protos).item()) < 1e-12);

  Tensor feats2({4, 3}, {0, 0, 1, 0, 5, 0, 0, 0, 2, 0, 0, 1});
  r = forward_on(st, BranchKind::support, feats2, 1);
  CHECK(std::fabs(clustering_loss(r.pooled, y, st.support.protos).item()) < 1e-12);
  CHECK(separation_loss(r.pooled, y, st.support.protos).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("clustering and separation equal an exhaustive pair scan") {
  std::mt19937_64 rng(11);
  for (auto kind : {SimilarityKind::cosine, SimilarityKind::projection}) {
    for (int t = 0; t < 30; ++t) {
      const std::size_t classes = 5, batch = 3, d = 6;
      auto st = plain_state(d, classes, 1, kind, 7);
      st.trivial.protos.values = unit_rows(classes, d, rng);
      auto feats = random_tensor({batch * 4, d}, rng, 1.0, false);
      std::vector<int> y{t % 5, (t + 2) % 5, (3 * t + 1) % 5};
      auto r = forward_on(st, BranchKind::trivial, feats, batch);
      double ct = 0, sp = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        double own = -1e300, other = -1e300;
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t m = 0; m < classes; ++m) {
            const double s = sim_oracle(feats, b * 4 + i, st.trivial.protos.values, m, kind);
            if (static_cast<int>(m) == y[b]) own = std::max(own, s);
            else other = std::max(other, s);
          }
        ct += own / batch;
        sp += other / batch;
      }
      CHECK(clustering_loss(r.pooled, y, st.trivial.protos).item() == doctest::Approx(ct).epsilon(1e-12));
      CHECK(separation_loss(r.pooled, y, st.trivial.protos).item() == doctest::Approx(sp).epsilon(1e-12));
    }
  }
}

TEST_CASE("clustering and separation errors") {
  auto single = make_protos(BranchKind::support, Tensor({2, 2}, {1, 0, 0, 1}), 1);
  const std::vector<int> y{0};
  Tensor pooled({1, 2}, {0.1, 0.2});
  CHECK_THROWS_AS(separation_loss(pooled, y, single), ConfigError);
  CHECK(clustering_loss(pooled, y, single).item() == doctest::Approx(0.2));

  auto starved = make_protos(BranchKind::support, Tensor({2, 2}, {1, 0, 0, 1}), 2);
  starved.num_classes = 3;
  const std::vector<int> y2{2};
  CHECK_THROWS_AS(clustering_loss(pooled, y2, starved), ConfigError);
  CHECK_THROWS_AS(clustering_loss(Tensor({1, 3}, {0, 0, 0}), y, starved), DimensionError);
}

TEST_CASE("closeness and discrimination examples") {
  auto same_s = make_protos(BranchKind::support, Tensor({2, 2}, {0.6, 0.8, 0.6, 0.8}), 2);
  auto same_t = make_protos(BranchKind::trivial, Tensor({2, 2}, {0.6, 0.8, 0.6, 0.8}), 2);
  CHECK(closeness_loss(same_s).item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(discrimination_loss(same_t).item() == doctest::Approx(1.0).epsilon(1e-12));

  auto orth = make_protos(BranchKind::support, Tensor({2, 2}, {1, 0, 0, 1}), 2);
  CHECK(std::fabs(closeness_loss(orth).item()) < 1e-15);

  auto anti = make_protos(BranchKind::trivial, Tensor({2, 2}, {0.6, 0.8, -0.6, -0.8}), 2);
  CHECK(discrimination_loss(anti).item() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("closeness, discrimination and orthonormality equal enumeration oracles") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t classes = 2 + t % 4, per = 1 + t % 3, d = 4 + t % 5;
    auto v = unit_rows(classes * per, d, rng);
    auto s = make_protos(BranchKind::support, v, classes);
    auto tr = make_protos(BranchKind::trivial, v, classes);
    CHECK(closeness_loss(s).item() == doctest::Approx(pair_oracle(s, false)).epsilon(1e-12));
    CHECK(discrimination_loss(tr).item() == doctest::Approx(pair_oracle(tr, true)).epsilon(1e-12));
    CHECK(orthonormality_loss(s).item() == doctest::Approx(gram_oracle(s)).epsilon(1e-12));
  }
}

TEST_CASE("orthonormality examples") {
  auto ortho = make_protos(BranchKind::support, Tensor({4, 2}, {1, 0, 0, 1, 0.6, 0.8, -0.8, 0.6}), 2);
  CHECK(std::fabs(orthonormality_loss(ortho).item()) < 1e-15);
  auto dup = make_protos(BranchKind::trivial, Tensor({2, 3}, {0, 0, 1, 0, 0, 1}), 1);
  CHECK(orthonormality_loss(dup).item() == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("wrong prototype kind is a contract error") {
  auto s = make_protos(BranchKind::support, Tensor({2, 2}, {1, 0, 0, 1}), 2);
  auto t = make_protos(BranchKind::trivial, Tensor({2, 2}, {1, 0, 0, 1}), 2);
  CHECK_THROWS_AS(closeness_loss(t), ContractError);
  CHECK_THROWS_AS(discrimination_loss(s), ContractError);

  auto st = plain_state(3, 2, 1, SimilarityKind::cosine, 2);
  std::mt19937_64 rng(1);
  auto r = forward_on(st, BranchKind::support, random_tensor({4, 3}, rng, 1.0, false), 1);
  const std::vector<int> y{1};
  const LossWeights w;
  CHECK_THROWS_AS(support_composite(r, y, st.trivial.protos, w), ContractError);
  CHECK_THROWS_AS(trivial_composite(r, y, st.support.protos, w), ContractError);
  CHECK_NOTHROW(branch_composite(r, y, st.trivial.protos, w));
}

TEST_CASE("loss weight defaults") {
  const LossWeights w;
  CHECK(w.lambda1 == 0.8);
  CHECK(w.lambda2(BranchKind::support) == 0.48);
  CHECK(w.lambda2(BranchKind::trivial) == 0.08);
  CHECK(w.lambda3 == 1.0);
  CHECK(w.lambda4 == 0.001);
}

TEST_CASE("composites recombine their parts") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> lam(0.0, 2.0);
  for (int t = 0; t < 30; ++t) {
    const auto kind = t % 2 ? SimilarityKind::cosine : SimilarityKind::projection;
    testutil::LossFixture fx(100 + t, kind);
    LossWeights w{lam(rng), lam(rng), lam(rng), lam(rng), lam(rng)};
    for (auto k : {BranchKind::support, BranchKind::trivial}) {
      const auto& protos = fx.state.branch(k).protos;
      auto r = fx.forward(k);
      auto b = branch_composite(r, fx.labels, protos, w);
      const double ce = cross_entropy(r.logits, fx.labels).item();
      const double ct = clustering_loss(r.pooled, fx.labels, protos).item();
      const double sp = separation_loss(r.pooled, fx.labels, protos).item();
      const double pair = k == BranchKind::support ? closeness_loss(protos).item() : discrimination_loss(protos).item();
      const double ort = orthonormality_loss(protos).item();
      CHECK(b.ce == ce);
      CHECK(b.ct == ct);
      CHECK(b.sp == sp);
      CHECK(b.cls_or_dsc == pair);
      CHECK(b.ort == ort);
      const double sign = k == BranchKind::support ? -1.0 : 1.0;
      const double hand = ce - w.lambda1 * ct + w.lambda2(k) * sp + sign * w.lambda3 * pair + w.lambda4 * ort;
      CHECK(std::fabs(b.total_value - hand) < 1e-10);
      CHECK(std::fabs(b.total.item() - hand) < 1e-10);
    }
  }
}

TEST_CASE("zero weights leave cross entropy") {
  testutil::LossFixture fx(9, SimilarityKind::cosine);
  const LossWeights zero{0, 0, 0, 0, 0};
  for (auto k : {BranchKind::support, BranchKind::trivial}) {
    auto r = fx.forward(k);
    auto b = branch_composite(r, fx.labels, fx.state.branch(k).protos, zero);
    CHECK(b.total_value == b.ce);
    CHECK(b.total.item() == cross_entropy(r.logits, fx.labels).item());
  }
}

TEST_CASE("raising the cross-class maximum raises the trivial total") {
  testutil::LossFixture fx(4, SimilarityKind::cosine);
  auto& protos = fx.state.trivial.protos;
  const LossWeights w;
  const double before = trivial_composite(fx.forward(BranchKind::trivial), fx.labels, protos, w).total_value;
  const double dsc_before = discrimination_loss(protos).item();
  // pull the class-1 arg partner toward the class-0 prototype it best matches
  std::size_t bm = 0, bn = 0;
  double best = -2;
  for (auto m : protos.members(0))
    for (auto n : protos.members(1))
      if (dot_rows(protos.values, m, n) > best) best = dot_rows(protos.values, m, n), bm = m, bn = n;
  auto v = protos.values.mutable_data();
  const std::size_t d = protos.dim();
  double norm = 0;
  for (std::size_t j = 0; j < d; ++j) {
    v[bn * d + j] = 0.7 * v[bn * d + j] + 0.3 * v[bm * d + j];
    norm += v[bn * d + j] * v[bn * d + j];
  }
  for (std::size_t j = 0; j < d; ++j) v[bn * d + j] /= std::sqrt(norm);
  CHECK(discrimination_loss(protos).item() > dsc_before);
  auto r = fx.forward(BranchKind::trivial);
  auto after = trivial_composite(r, fx.labels, protos, w);
  auto no_pair = w;
  no_pair.lambda3 = 0;
  const double rest = trivial_composite(r, fx.labels, protos, no_pair).total_value;
  CHECK(after.total_value - rest > 0);
  CHECK(after.total_value - rest == doctest::Approx(w.lambda3 * after.cls_or_dsc));
  (void)before;
}

TEST_CASE("closeness never exceeds discrimination and summands are bounded") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    const std::size_t classes = 2 + t % 5, per = 1 + t % 4;
    auto v = unit_rows(classes * per, 7, rng);
    auto s = make_protos(BranchKind::support, v, classes);
    auto tr = make_protos(BranchKind::trivial, v, classes);
    const double cls = closeness_loss(s).item(), dsc = discrimination_loss(tr).item();
    const double pairs = classes * (classes - 1) / 2.0;
    CHECK(cls <= dsc + 1e-15);
    CHECK(cls >= -pairs - 1e-12);
    CHECK(dsc <= pairs + 1e-12);
    for (std::size_t c1 = 0; c1 < classes; ++c1)
      for (std::size_t c2 = c1 + 1; c2 < classes; ++c2) {
        std::vector<double> rows;
        for (int c : {static_cast<int>(c1), static_cast<int>(c2)})
          for (auto m : s.members(c)) rows.insert(rows.end(), v.data().begin() + m * 7, v.data().begin() + m * 7 + 7);
        auto sub = make_protos(BranchKind::support, Tensor({2 * per, 7}, rows), 2);
        const double one = closeness_loss(sub).item();
        CHECK(one >= -1 - 1e-12);
        CHECK(one <= 1 + 1e-12);
      }
  }
}

TEST_CASE("pair losses are invariant to reordering and relabeling") {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 30; ++t) {
    const std::size_t classes = 3 + t % 3, per = 2 + t % 2, d = 6;
    auto v = unit_rows(classes * per, d, rng, false);
    std::vector<std::size_t> cls_perm(classes), in_perm(per);
    std::iota(cls_perm.begin(), cls_perm.end(), 0);
    std::iota(in_perm.begin(), in_perm.end(), 0);
    std::shuffle(cls_perm.begin(), cls_perm.end(), rng);
    std::vector<double> rows;
    for (std::size_t c = 0; c < classes; ++c) {
      std::shuffle(in_perm.begin(), in_perm.end(), rng);
      for (auto i : in_perm) {
        const std::size_t src = cls_perm[c] * per + i;
        rows.insert(rows.end(), v.data().begin() + src * d, v.data().begin() + (src + 1) * d);
      }
    }
    Tensor w({classes * per, d}, rows);
    for (auto kind : {BranchKind::support, BranchKind::trivial}) {
      auto a = make_protos(kind, v, classes), b = make_protos(kind, w, classes);
      auto pair = [&](const PrototypeSet& p) {
        return kind == BranchKind::support ? closeness_loss(p).item() : discrimination_loss(p).item();
      };
      CHECK(pair(a) == doctest::Approx(pair(b)).epsilon(1e-12));
      CHECK(orthonormality_loss(a).item() == doctest::Approx(orthonormality_loss(b).item()).epsilon(1e-12));
    }
  }
}

TEST_CASE("orthonormality is invariant to a shared coordinate permutation") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 20; ++t) {
    const std::size_t d = 5;
    auto v = unit_rows(6, d, rng, false);
    std::vector<std::size_t> perm(d);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> rows(6 * d);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < d; ++j) rows[i * d + j] = v[i * d + perm[j]];
    auto a = make_protos(BranchKind::support, v, 2);
    auto b = make_protos(BranchKind::support, Tensor({6, d}, rows), 2);
    CHECK(orthonormality_loss(a).item() == doctest::Approx(orthonormality_loss(b).item()).epsilon(1e-12));
  }
}

TEST_CASE("gradients of every loss term match central differences") {
  for (const auto& c : testutil::loss_cases()) {
    CAPTURE(c.name);
    double worst = 0;
    for (std::uint64_t s = 0; s < 20; ++s) worst = std::max(worst, c.check(1000 + s).max_rel);
    CHECK(worst < 1e-4);
  }
}
