#pragma once

#include <span>
#include <vector>

#include "stpp/network.hpp"
#include "stpp/tensor.hpp"

namespace stpp {

struct LossWeights {
  double lambda1 = 0.8;            // clustering
  double lambda2_support = 0.48;   // separation, support branch
  double lambda2_trivial = 0.08;   // separation, trivial branch
  double lambda3 = 1.0;            // closeness / discrimination
  double lambda4 = 0.001;          // orthonormality

  double lambda2(BranchKind k) const { return k == BranchKind::support ? lambda2_support : lambda2_trivial; }
};

// Per-term values of one composite evaluation. `total` is the differentiable
// scalar; the doubles are its parts as plain numbers.
struct LossBreakdown {
  double ce = 0, ct = 0, sp = 0, cls_or_dsc = 0, ort = 0;
  double total_value = 0;
  Tensor total;
};

// Label index of a one-hot vector; DomainError unless exactly one entry is 1.
int label_from_one_hot(std::span<const double> y);

// Batch mean of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Batch means over samples of the best own-class (clustering) or best
// other-class (separation) pooled similarity. pooled: [B, M].
Tensor clustering_loss(const Tensor& pooled, std::span<const int> labels, const PrototypeSet& protos);
Tensor separation_loss(const Tensor& pooled, std::span<const int> labels, const PrototypeSet& protos);

// Sum over class pairs c1 < c2 of the min (closeness, support prototypes) or
// max (discrimination, trivial prototypes) cross-class dot product.
Tensor closeness_loss(const PrototypeSet& protos);
Tensor discrimination_loss(const PrototypeSet& protos);

// Sum over classes of ||P_c^T P_c - I||_F^2.
Tensor orthonormality_loss(const PrototypeSet& protos);

// ce - l1*ct + l2*sp - l3*cls + l4*ort
LossBreakdown support_composite(const SimilarityResult& r, std::span<const int> labels,
                                const PrototypeSet& protos, const LossWeights& w);
// ce - l1*ct + l2*sp + l3*dsc + l4*ort
LossBreakdown trivial_composite(const SimilarityResult& r, std::span<const int> labels,
                                const PrototypeSet& protos, const LossWeights& w);
// Dispatches on protos.kind.
LossBreakdown branch_composite(const SimilarityResult& r, std::span<const int> labels,
                               const PrototypeSet& protos, const LossWeights& w);

}  // namespace stpp
