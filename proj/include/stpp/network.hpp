#pragma once

// Dual-branch prototype network: a shared backbone, and per branch an
// add-on projection, a prototype layer (1x1 prototypes, cosine or
// projection similarity, max-pooled over positions) and a bias-free linear
// head. The two branches' logits are summed for the final prediction.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stpp/tensor.hpp"

namespace stpp {

enum class Activation { identity, tanh, sigmoid, relu };
enum class SimilarityKind { cosine, projection };
enum class BranchKind { support, trivial };

const char* to_string(Activation a);
const char* to_string(SimilarityKind s);
const char* to_string(BranchKind b);
Activation activation_from_string(const std::string& s);
SimilarityKind similarity_from_string(const std::string& s);

Tensor apply_activation(Activation act, const Tensor& x);

struct ConvLayerSpec {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  Activation activation = Activation::relu;
};

struct BackboneSpec {
  enum class Kind { mlp, conv };
  Kind kind = Kind::conv;

  // mlp: widths[0] is the input size; activations[i] follows layer i.
  std::vector<std::size_t> widths;
  std::vector<Activation> activations;

  // conv: NHWC images of image_h x image_w x channels, "same"-padded layers.
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 1;
  std::vector<ConvLayerSpec> conv;

  // 2 -> 256 (tanh) -> 2 (sigmoid).
  static BackboneSpec two_moon();
  // Three stride-2 3x3 layers: 32x32xR -> 4x4x32.
  static BackboneSpec small_conv(std::size_t image_size = 32, std::size_t channels = 1);

  std::size_t feature_channels() const;
  std::size_t feature_h() const;
  std::size_t feature_w() const;
  void validate() const;
};

struct AddOnSpec {
  bool enabled = true;
  std::size_t mid_channels = 32;
  Activation mid_activation = Activation::tanh;
  Activation out_activation = Activation::tanh;
};

struct ModelConfig {
  BackboneSpec backbone = BackboneSpec::small_conv();
  AddOnSpec addon;
  std::size_t num_classes = 2;
  std::size_t protos_per_class = 2;  // per branch
  std::size_t proto_dim = 16;        // ignored when the add-on is disabled
  SimilarityKind similarity = SimilarityKind::cosine;
  bool shared_addon = false;
  // Bilinear upsampling factor applied to backbone feature maps (1 = off).
  std::size_t feature_upsample = 1;

  std::size_t latent_dim() const;
  std::size_t feature_h() const { return backbone.feature_h() * feature_upsample; }
  std::size_t feature_w() const { return backbone.feature_w() * feature_upsample; }
  void validate() const;
};

// Two 1x1 linear maps applied independently at every spatial position.
struct AddOnLayers {
  Tensor w1, b1, w2, b2;
  Activation mid_activation = Activation::tanh;
  Activation out_activation = Activation::tanh;
  bool enabled = true;

  Tensor forward(const Tensor& positions) const;
  std::vector<Tensor> parameters() const;
};

struct PrototypeSet {
  BranchKind kind = BranchKind::support;
  Tensor values;                // [M, D], one unit vector per row
  std::vector<int> class_of;    // prototype -> class
  std::size_t num_classes = 0;

  std::size_t count() const { return class_of.size(); }
  std::size_t dim() const { return values.rank() == 2 ? values.dim(1) : 0; }
  std::vector<std::size_t> members(int cls) const;
};

struct FcHead {
  Tensor weights;  // [M, C]

  // +1 on a prototype's own class, -0.5 elsewhere.
  static FcHead initial(const std::vector<int>& class_of, std::size_t num_classes);
};

struct BranchParams {
  AddOnLayers addon;
  PrototypeSet protos;
  FcHead fc;
  // Stage-1 prototypes saved before projection (empty until projected).
  Tensor unprojected;
  // Per prototype: (image index, row, col) of the latent patch it was
  // projected onto; empty until projected.
  std::vector<std::array<std::size_t, 3>> provenance;
};

struct ModelState {
  ModelConfig config;
  std::vector<Tensor> backbone_w;
  std::vector<Tensor> backbone_b;
  BranchParams support;
  BranchParams trivial;

  static ModelState initialize(const ModelConfig& config, std::uint64_t seed);

  BranchParams& branch(BranchKind k) { return k == BranchKind::support ? support : trivial; }
  const BranchParams& branch(BranchKind k) const { return k == BranchKind::support ? support : trivial; }
  // The add-on used by a branch (the support branch's when shared).
  const AddOnLayers& addon_for(BranchKind k) const;

  std::vector<Tensor> backbone_parameters() const;
  // Add-on (unless shared and k is trivial) + prototypes.
  std::vector<Tensor> branch_parameters(BranchKind k) const;

  // Deep copy with independent storage.
  ModelState clone() const;
};

// Backbone output, flattened to one row per spatial position.
struct FeatureBatch {
  Tensor positions;  // [B*h*w, D_bar]
  std::size_t batch = 0;
  std::size_t h = 1;
  std::size_t w = 1;
};

struct SimilarityResult {
  Tensor latent;  // [B*P, D] L2-normalised feature vectors
  Tensor maps;    // [B*P, M] similarity of every position to every prototype
  Tensor pooled;  // [B, M]   max over positions
  Tensor logits;  // [B, C]
  std::size_t batch = 0;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t positions() const { return h * w; }
  double map_at(std::size_t b, std::size_t m, std::size_t i, std::size_t j) const;
};

// x: [B, in] for an mlp backbone, [B, H, W, R] for a conv backbone.
FeatureBatch backbone_forward(const ModelState& state, const Tensor& x);
SimilarityResult forward_branch(const ModelState& state, BranchKind kind, const FeatureBatch& features);
SimilarityResult forward_branch(const ModelState& state, BranchKind kind, const Tensor& x);

// Prototype-vs-latent similarities for already-normalised latent rows.
Tensor similarity_matrix(const Tensor& latent, const Tensor& prototypes, SimilarityKind kind);

// Similarity of one feature vector to one prototype. v is normalised
// internally (a zero vector scores 0); p is assumed unit-norm.
double similarity(std::span<const double> v, std::span<const double> p, SimilarityKind kind);

Tensor ensemble_logits(const SimilarityResult& support, const SimilarityResult& trivial);

// Rescales every prototype to unit L2 norm. A zero-norm prototype is redrawn
// from a unit Gaussian (with a warning on stderr) using `rng`.
void normalize_prototypes(PrototypeSet& protos, std::mt19937_64& rng);

// "STPP" checkpoint container.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const ModelState& state);
ModelState decode_checkpoint(std::string_view bytes);

}  // namespace stpp
