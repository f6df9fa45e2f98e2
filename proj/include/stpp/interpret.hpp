#pragma once

// Saliency metrics over prototype activation maps, prototype distance
// statistics, k-NN prototype pruning and the metrics report.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stpp/datasets.hpp"
#include "stpp/network.hpp"

namespace stpp {

struct ActivationMap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> values;  // row-major h*w

  ActivationMap() = default;
  ActivationMap(std::size_t h_, std::size_t w_, std::vector<double> v);
  double at(std::size_t i, std::size_t j) const { return values[i * w + j]; }
};

// Bilinear resize (half-pixel centres, edges clamped).
ActivationMap upsample_map(const ActivationMap& map, std::size_t out_h, std::size_t out_w);
ActivationMap clamp_nonnegative(ActivationMap map);

// Map of prototype m for sample b of a branch forward pass, at feature resolution.
ActivationMap prototype_map(const SimilarityResult& r, std::size_t b, std::size_t m);
// Mean of the maps of cls's prototypes, upsampled to out_h x out_w.
ActivationMap class_map(const SimilarityResult& r, const PrototypeSet& protos, std::size_t b, int cls,
                        std::size_t out_h, std::size_t out_w);

// Maps are clamped at zero inside each metric.
// Percent of activation mass inside the mask (0 when the map is all zero).
double content_heatmap(const ActivationMap& map, std::span<const std::uint8_t> mask);
// mean outside / mean inside; +infinity when the inside mean is 0.
double oirr(const ActivationMap& map, std::span<const std::uint8_t> mask);
// IoU (percent) of {normalised map > 0.5} with the mask. A constant map
// selects every pixel.
double iou_at_half(const ActivationMap& map, std::span<const std::uint8_t> mask);

// Probabilities for `count` images stored back to back; returns count*C values.
using BatchProbabilityFn = std::function<std::vector<double>(std::span<const double> images, std::size_t count)>;

// Deletes pixels (all channels set to 0) in descending map order; step k
// has floor(k*N/steps) pixels removed. Returns 100 * trapezoidal area under
// the probability of the class predicted on the intact image.
double deletion_auc(const BatchProbabilityFn& model, std::span<const double> image, std::size_t channels,
                    const ActivationMap& map, std::size_t steps);
// Pixel deletion order used by deletion_auc: value descending, ties by index.
std::vector<std::size_t> deletion_order(const ActivationMap& map);

// Every latent vector of a branch over a dataset, one row per position.
struct LatentBank {
  Tensor latent;                                // [N*P, D], unit rows
  std::vector<int> label;                       // per row
  std::vector<std::array<std::size_t, 3>> where;  // (sample, i, j) per row
  std::size_t rows() const { return label.size(); }
};

LatentBank collect_latents(const ModelState& state, BranchKind kind, const LabeledData& data,
                           std::size_t batch_size = 64);

// Index of the most similar bank row, optionally restricted to one class.
// Ties go to the lower row. Returns nullopt when no row qualifies.
std::optional<std::size_t> nearest_row(const LatentBank& bank, std::span<const double> proto, SimilarityKind kind,
                                       std::optional<int> cls = std::nullopt);

struct ProtoDistances {
  double aipd = 0;
  double aifd = 0;
};
// Mean cosine distance over cross-class prototype pairs, and the same over
// each prototype's nearest own-class latent vector.
ProtoDistances aipd_aifd(const Tensor& prototypes, const std::vector<int>& class_of, const LatentBank& bank,
                         SimilarityKind kind);

struct PruneConfig {
  std::size_t k_nearest = 6;
  std::size_t tau = 3;
  void validate() const;
};

struct PruneDecision {
  std::vector<std::size_t> own_counts;  // own-class hits among the k nearest
  std::vector<bool> remove;
  std::vector<std::size_t> kept_last;  // prototypes kept so that their class is not emptied
  std::size_t removed() const;
};

PruneDecision prune_decisions(const Tensor& prototypes, const std::vector<int>& class_of, std::size_t num_classes,
                              const LatentBank& bank, SimilarityKind kind, const PruneConfig& cfg);
// Drops the marked prototypes along with their FC rows and projection data.
void remove_prototypes(BranchParams& branch, const std::vector<bool>& remove);
// Prunes one branch in place and returns the number of prototypes removed.
std::size_t prune_branch(ModelState& state, BranchKind kind, const LabeledData& train, const PruneConfig& cfg);

struct BranchMetrics {
  double accuracy = 0;
  double ch = 0, oirr = 0, iou = 0, dauc = 0;  // percentages
  std::size_t oirr_infinite = 0;               // samples excluded from the OIRR mean
  double aipd = 0, aifd = 0;
  std::size_t prototypes = 0;
  std::size_t pruned = 0;
};

struct MetricsReport {
  double accuracy = 0;  // ensemble
  BranchMetrics support;
  BranchMetrics trivial;
  bool has_saliency = false;
  std::size_t test_samples = 0;
  std::size_t dauc_samples = 0;
  std::string prototype_source;  // "unprojected" or "current"

  BranchMetrics& branch(BranchKind k) { return k == BranchKind::support ? support : trivial; }
  const BranchMetrics& branch(BranchKind k) const { return k == BranchKind::support ? support : trivial; }
};

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);

struct EvalOptions {
  std::size_t batch_size = 64;
  std::size_t dauc_samples = 40;  // first n test images
  std::size_t dauc_steps = 49;
  bool saliency = true;           // needs masks and an image backbone
};

std::vector<int> predict(const ModelState& state, const LabeledData& data, std::size_t batch_size = 64);

MetricsReport evaluate(const ModelState& state, const LabeledData& test, const LabeledData& train,
                       const EvalOptions& options = {});

// 8-bit grayscale PGM of a map scaled to its maximum.
std::string map_to_pgm(const ActivationMap& map);
// Image with the map overlaid, the mask outline and the 95th-percentile
// activation bounding box.
std::string overlay_svg(std::span<const double> image, const ActivationMap& map, std::span<const std::uint8_t> mask,
                        std::size_t scale = 8);

}  // namespace stpp
