#pragma once

// Deterministic data generators: the two-moon toy problem and a synthetic
// glyph-over-texture image benchmark with exact object masks.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "stpp/tensor.hpp"

namespace stpp {

// Samples of one split. inputs is [N, 2] for points, [N, H, W, R] for images.
struct LabeledData {
  Tensor inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  // N * H * W object masks (1 = object); empty when not applicable.
  std::vector<std::uint8_t> masks;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return size() ? inputs.size() / size() : 0; }
  // Copies the selected samples into a fresh batch tensor.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  std::span<const std::uint8_t> mask(std::size_t i) const;
};

struct TwoMoonSet {
  std::size_t n_per_class = 0;
  double noise = 0.0;
  LabeledData train;
  LabeledData test;
};

// n points per class on the two interleaved unit half-circles with
// Gaussian noise sigma, split 80/20 after a seeded shuffle.
TwoMoonSet gen_two_moons(std::size_t n_per_class, double noise, std::uint64_t seed);

// x,y,label rows with a header line.
void save_points_csv(const LabeledData& data, const std::filesystem::path& path);
LabeledData load_points_csv(const std::filesystem::path& path);

struct SyntheticOptions {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  std::size_t glyph_size = 9;
  // Fixed texture bank shared by every split generated with the same value.
  std::uint64_t texture_seed = 0x5eed7e47u;
  double texture_amplitude = 0.1;
  double pixel_noise = 0.05;
  double glyph_value = 1.0;
};

struct SyntheticImageSet {
  std::size_t height = 0, width = 0, channels = 0;
  double background_correlation = -1.0;  // unknown for loaded files
  LabeledData data;
  // Texture used for each sample's background (generator metadata only).
  std::vector<int> texture_ids;
};

// Number of glyphs in the built-in library.
std::size_t glyph_library_size();
// 0/1 pattern of glyph g at glyph_size x glyph_size (row-major).
std::vector<std::uint8_t> glyph_pattern(std::size_t g, std::size_t glyph_size = 9);

// Each image is class c's glyph at a random position over a background
// texture; with probability background_correlation that texture is the
// class's own, otherwise uniformly random.
SyntheticImageSet gen_synthetic_images(std::size_t num_classes, std::size_t n_per_class,
                                       double background_correlation, std::uint64_t seed,
                                       const SyntheticOptions& options = {});

struct SyntheticSplit {
  SyntheticImageSet train;
  SyntheticImageSet test;
};
// Train images come from stream 2*seed, test images from 2*seed+1.
SyntheticSplit gen_synthetic_split(std::size_t num_classes, std::size_t train_per_class, std::size_t test_per_class,
                                   double background_correlation, std::uint64_t seed,
                                   const SyntheticOptions& options = {});

// "STDS" container.
std::string encode_image_set(const SyntheticImageSet& set);
SyntheticImageSet decode_image_set(std::string_view bytes);
void save_image_set(const SyntheticImageSet& set, const std::filesystem::path& path);
SyntheticImageSet load_image_set(const std::filesystem::path& path);

}  // namespace stpp
