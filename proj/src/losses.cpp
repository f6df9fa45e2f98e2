#include "stpp/losses.hpp"

#include <cstdint>
#include <string>

#include "stpp/errors.hpp"

namespace stpp {

int label_from_one_hot(std::span<const double> y) {
  int label = -1;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 1.0) {
      if (label >= 0) throw DomainError("one-hot vector has more than one hot entry");
      label = static_cast<int>(i);
    } else if (y[i] != 0.0) {
      throw DomainError("one-hot vector entries must be 0 or 1");
    }
  }
  if (label < 0) throw DomainError("one-hot vector has no hot entry");
  return label;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

namespace {

std::vector<std::uint8_t> class_mask(std::span<const int> labels, const PrototypeSet& protos, bool own) {
  const std::size_t m = protos.count();
  std::vector<std::uint8_t> mask(labels.size() * m, 0);
  for (std::size_t b = 0; b < labels.size(); ++b)
    for (std::size_t j = 0; j < m; ++j) mask[b * m + j] = (protos.class_of[j] == labels[b]) == own ? 1 : 0;
  return mask;
}

void check_pooled(const Tensor& pooled, std::span<const int> labels, const PrototypeSet& protos) {
  if (pooled.rank() != 2 || pooled.dim(0) != labels.size() || pooled.dim(1) != protos.count()) {
    throw DimensionError("pooled scores " + shape_to_string(pooled.shape()) + " do not match " +
                         std::to_string(labels.size()) + " samples x " + std::to_string(protos.count()) +
                         " prototypes");
  }
}

// Flat indices into the M x M Gram matrix for every cross pair of two classes.
std::vector<std::size_t> cross_pairs(const PrototypeSet& protos, int c1, int c2) {
  const std::size_t m = protos.count();
  std::vector<std::size_t> idx;
  for (std::size_t a : protos.members(c1))
    for (std::size_t b : protos.members(c2)) idx.push_back(a * m + b);
  return idx;
}

Tensor pairwise_extreme(const PrototypeSet& protos, ReduceKind kind) {
  const int c = static_cast<int>(protos.num_classes);
  for (int k = 0; k < c; ++k)
    if (protos.members(k).empty()) throw ConfigError("class " + std::to_string(k) + " has no prototypes");
  Tensor gram = matmul(protos.values, transpose(protos.values));
  Tensor total = Tensor::scalar(0.0);
  bool first = true;
  for (int c1 = 0; c1 < c; ++c1) {
    for (int c2 = c1 + 1; c2 < c; ++c2) {
      const auto idx = cross_pairs(protos, c1, c2);
      Tensor term = reduce(kind, gather(gram, idx));
      total = first ? term : add(total, term);
      first = false;
    }
  }
  return total;
}

}  // namespace

Tensor clustering_loss(const Tensor& pooled, std::span<const int> labels, const PrototypeSet& protos) {
  check_pooled(pooled, labels, protos);
  for (int y : labels)
    if (protos.members(y).empty()) throw ConfigError("class " + std::to_string(y) + " has no prototypes");
  const auto mask = class_mask(labels, protos, true);
  return mean(masked_max_rows(pooled, mask));
}

Tensor separation_loss(const Tensor& pooled, std::span<const int> labels, const PrototypeSet& protos) {
  check_pooled(pooled, labels, protos);
  if (protos.num_classes < 2) throw ConfigError("separation loss needs at least two classes");
  const auto mask = class_mask(labels, protos, false);
  return mean(masked_max_rows(pooled, mask));
}

Tensor closeness_loss(const PrototypeSet& protos) {
  if (protos.kind != BranchKind::support) throw ContractError("closeness loss applies to support prototypes only");
  return pairwise_extreme(protos, ReduceKind::min);
}

Tensor discrimination_loss(const PrototypeSet& protos) {
  if (protos.kind != BranchKind::trivial)
    throw ContractError("discrimination loss applies to trivial prototypes only");
  return pairwise_extreme(protos, ReduceKind::max);
}

Tensor orthonormality_loss(const PrototypeSet& protos) {
  Tensor total = Tensor::scalar(0.0);
  bool first = true;
  const std::size_t d = protos.dim();
  for (int c = 0; c < static_cast<int>(protos.num_classes); ++c) {
    const auto members = protos.members(c);
    if (members.empty()) continue;
    std::vector<std::size_t> idx;
    for (std::size_t m : members)
      for (std::size_t j = 0; j < d; ++j) idx.push_back(m * d + j);
    // Rows are prototypes, so P_c^T P_c of the column layout is rows * rows^T.
    Tensor rows = reshape(gather(protos.values, idx), {members.size(), d});
    Tensor gram = matmul(rows, transpose(rows));
    const std::size_t k = members.size();
    std::vector<double> eye(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
    Tensor term = sum(square(sub(gram, Tensor(Shape{k, k}, std::move(eye)))));
    total = first ? term : add(total, term);
    first = false;
  }
  return total;
}

namespace {

LossBreakdown composite(const SimilarityResult& r, std::span<const int> labels, const PrototypeSet& protos,
                        const LossWeights& w) {
  const bool support = protos.kind == BranchKind::support;
  Tensor ce = cross_entropy(r.logits, labels);
  Tensor ct = clustering_loss(r.pooled, labels, protos);
  Tensor sp = separation_loss(r.pooled, labels, protos);
  Tensor pair = support ? closeness_loss(protos) : discrimination_loss(protos);
  Tensor ort = orthonormality_loss(protos);

  const double sign3 = support ? -1.0 : 1.0;
  Tensor total = add(ce, mul(ct, -w.lambda1));
  total = add(total, mul(sp, w.lambda2(protos.kind)));
  total = add(total, mul(pair, sign3 * w.lambda3));
  total = add(total, mul(ort, w.lambda4));

  LossBreakdown out;
  out.ce = ce.item();
  out.ct = ct.item();
  out.sp = sp.item();
  out.cls_or_dsc = pair.item();
  out.ort = ort.item();
  out.total_value = total.item();
  out.total = total;
  return out;
}

}  // namespace

LossBreakdown support_composite(const SimilarityResult& r, std::span<const int> labels,
                                const PrototypeSet& protos, const LossWeights& w) {
  if (protos.kind != BranchKind::support) throw ContractError("support_composite needs support prototypes");
  return composite(r, labels, protos, w);
}

LossBreakdown trivial_composite(const SimilarityResult& r, std::span<const int> labels,
                                const PrototypeSet& protos, const LossWeights& w) {
  if (protos.kind != BranchKind::trivial) throw ContractError("trivial_composite needs trivial prototypes");
  return composite(r, labels, protos, w);
}

LossBreakdown branch_composite(const SimilarityResult& r, std::span<const int> labels,
                               const PrototypeSet& protos, const LossWeights& w) {
  return composite(r, labels, protos, w);
}

}  // namespace stpp
