#include "stpp/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "stpp/binary_io.hpp"
#include "stpp/errors.hpp"

namespace stpp {

// ---------------------------------------------------------------- LabeledData

Tensor LabeledData::batch(std::span<const std::size_t> indices) const {
  const std::size_t per = sample_numel();
  Shape shape = inputs.shape();
  shape[0] = indices.size();
  std::vector<double> out(indices.size() * per);
  const auto src = inputs.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw DimensionError("batch index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor(std::move(shape), std::move(out));
}

std::vector<int> LabeledData::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

std::span<const std::uint8_t> LabeledData::mask(std::size_t i) const {
  if (masks.empty()) throw DomainError("dataset has no masks");
  const std::size_t per = masks.size() / size();
  return std::span<const std::uint8_t>(masks).subspan(i * per, per);
}

// ---------------------------------------------------------------- two moons

TwoMoonSet gen_two_moons(std::size_t n_per_class, double noise, std::uint64_t seed) {
  if (n_per_class < 1) throw DomainError("two-moon set needs n >= 1");
  if (noise < 0) throw DomainError("two-moon noise must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t n = n_per_class;
  std::vector<double> pts(2 * n * 2);
  std::vector<int> labels(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = n == 1 ? 0.0 : std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1);
    pts[2 * i] = std::cos(t);
    pts[2 * i + 1] = std::sin(t);
    labels[i] = 0;
    pts[2 * (n + i)] = 1.0 - std::cos(t);
    pts[2 * (n + i) + 1] = 0.5 - std::sin(t);
    labels[n + i] = 1;
  }
  if (noise > 0)
    for (double& v : pts) v += noise * gauss(rng);

  std::vector<std::size_t> order(2 * n);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = (order.size() * 4 + 4) / 5;

  auto take = [&](std::size_t begin, std::size_t end) {
    LabeledData d;
    d.num_classes = 2;
    std::vector<double> x;
    for (std::size_t k = begin; k < end; ++k) {
      x.push_back(pts[2 * order[k]]);
      x.push_back(pts[2 * order[k] + 1]);
      d.labels.push_back(labels[order[k]]);
    }
    d.inputs = Tensor(Shape{end - begin, 2}, std::move(x));
    return d;
  };
  TwoMoonSet set;
  set.n_per_class = n;
  set.noise = noise;
  set.train = take(0, n_train);
  set.test = take(n_train, order.size());
  return set;
}

void save_points_csv(const LabeledData& data, const std::filesystem::path& path) {
  if (data.inputs.rank() != 2 || data.inputs.dim(1) != 2) throw DimensionError("point CSV needs [N,2] inputs");
  std::ostringstream out;
  out.precision(17);
  out << "x,y,label\n";
  for (std::size_t i = 0; i < data.size(); ++i)
    out << data.inputs[2 * i] << ',' << data.inputs[2 * i + 1] << ',' << data.labels[i] << '\n';
  io::write_file_atomic(path, out.str());
}

LabeledData load_points_csv(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line) || line != "x,y,label") throw ParseError("expected header 'x,y,label'", 0);
  offset += line.size() + 1;
  LabeledData d;
  std::vector<double> x;
  int max_label = -1;
  while (std::getline(in, line)) {
    if (line.empty()) {
      offset += 1;
      continue;
    }
    double a = 0, b = 0;
    int label = 0;
    char c1 = 0, c2 = 0;
    std::istringstream row(line);
    if (!(row >> a >> c1 >> b >> c2 >> label) || c1 != ',' || c2 != ',' || label < 0)
      throw ParseError("malformed point row '" + line + "'", offset);
    x.push_back(a);
    x.push_back(b);
    d.labels.push_back(label);
    max_label = std::max(max_label, label);
    offset += line.size() + 1;
  }
  d.num_classes = static_cast<std::size_t>(max_label + 1);
  d.inputs = Tensor(Shape{d.labels.size(), 2}, std::move(x));
  return d;
}

// ---------------------------------------------------------------- glyphs

namespace {

using Grid = std::vector<std::uint8_t>;

// Patterns drawn on a unit square; g selects the shape.
bool glyph_pixel(std::size_t g, double y, double x) {
  // y, x in [0,1]; stroke width ~ 2/9.
  const double w = 0.12;
  auto near = [&](double a, double b) { return std::fabs(a - b) <= w; };
  const double cy = 0.5, cx = 0.5;
  const double r = std::hypot(y - cy, x - cx);
  switch (g) {
    case 0: return near(y, cy) || near(x, cx);                           // cross
    case 1: return std::fabs(r - 0.36) <= w;                             // ring
    case 2: return near(y, x) || near(y, 1.0 - x);                       // X
    case 3: return near(x, 0.12) || near(y, 0.88);                       // L
    case 4: return near(y, 0.12) || near(x, cx);                         // T
    case 5: return r <= 0.3;                                             // disc
    case 6: return near(y, 0.12) || near(y, 0.88) || near(x, 0.12) || near(x, 0.88);  // frame
    case 7: return near(x, 0.12) || near(x, 0.88) || near(y, cy);        // H
    case 8: return near(y, 0.12) || near(y, cy) || near(y, 0.88);        // three bars
    case 9: return near(y, cy) && x >= 0.05 && x <= 0.95;                // horizontal bar
    default: return false;
  }
}

constexpr std::size_t kGlyphs = 10;

// Periodic smoothed random field with zero mean and unit variance.
std::vector<double> make_texture(std::size_t k, std::size_t h, std::size_t w, std::uint64_t texture_seed) {
  std::seed_seq seq{static_cast<std::uint64_t>(texture_seed), static_cast<std::uint64_t>(k), std::uint64_t{0x7e47}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> f(h * w);
  for (double& v : f) v = gauss(rng);
  // Texture k differs in blur radius along each axis.
  const std::size_t ry = 1 + (k * 3) % 4;
  const std::size_t rx = 1 + (k * 5 + 2) % 4;
  std::vector<double> tmp(h * w);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = 0;
        for (std::size_t d = 0; d < 2 * rx + 1; ++d) s += f[i * w + (j + w + d - rx) % w];
        tmp[i * w + j] = s / static_cast<double>(2 * rx + 1);
      }
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = 0;
        for (std::size_t d = 0; d < 2 * ry + 1; ++d) s += tmp[((i + h + d - ry) % h) * w + j];
        f[i * w + j] = s / static_cast<double>(2 * ry + 1);
      }
  }
  double mu = 0, var = 0;
  for (double v : f) mu += v;
  mu /= static_cast<double>(f.size());
  for (double v : f) var += (v - mu) * (v - mu);
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  for (double& v : f) v = (v - mu) / sd;
  return f;
}

}  // namespace

std::size_t glyph_library_size() { return kGlyphs; }

std::vector<std::uint8_t> glyph_pattern(std::size_t g, std::size_t glyph_size) {
  if (g >= kGlyphs) throw DomainError("glyph index out of range");
  Grid out(glyph_size * glyph_size, 0);
  for (std::size_t i = 0; i < glyph_size; ++i)
    for (std::size_t j = 0; j < glyph_size; ++j) {
      const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(glyph_size);
      const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(glyph_size);
      out[i * glyph_size + j] = glyph_pixel(g, y, x) ? 1 : 0;
    }
  return out;
}

SyntheticImageSet gen_synthetic_images(std::size_t num_classes, std::size_t n_per_class,
                                       double background_correlation, std::uint64_t seed,
                                       const SyntheticOptions& opt) {
  if (num_classes < 2) throw ConfigError("synthetic images need at least 2 classes");
  if (num_classes > kGlyphs)
    throw ConfigError("glyph library has only " + std::to_string(kGlyphs) + " glyphs");
  if (background_correlation < 0 || background_correlation > 1)
    throw ConfigError("background_correlation must lie in [0,1]");
  if (opt.glyph_size > opt.height || opt.glyph_size > opt.width)
    throw ConfigError("glyph larger than image");
  if (opt.channels < 1) throw ConfigError("images need at least one channel");

  const std::size_t H = opt.height, W = opt.width, R = opt.channels, G = opt.glyph_size;
  const std::size_t textures = num_classes;
  std::vector<std::vector<double>> bank;
  for (std::size_t k = 0; k < textures; ++k) bank.push_back(make_texture(k, H, W, opt.texture_seed));
  std::vector<Grid> glyphs;
  for (std::size_t c = 0; c < num_classes; ++c) glyphs.push_back(glyph_pattern(c, G));

  const std::size_t N = num_classes * n_per_class;
  SyntheticImageSet set;
  set.height = H;
  set.width = W;
  set.channels = R;
  set.background_correlation = background_correlation;
  set.data.num_classes = num_classes;
  std::vector<double> images(N * H * W * R);
  set.data.masks.assign(N * H * W, 0);
  set.data.labels.resize(N);
  set.texture_ids.resize(N);

  for (std::size_t n = 0; n < N; ++n) {
    const int label = static_cast<int>(n / n_per_class);
    std::seed_seq seq{seed, static_cast<std::uint64_t>(n)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    int tex = label % static_cast<int>(textures);
    if (!(unit(rng) < background_correlation))
      tex = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, textures - 1)(rng));
    const std::size_t dy = std::uniform_int_distribution<std::size_t>(0, H - 1)(rng);
    const std::size_t dx = std::uniform_int_distribution<std::size_t>(0, W - 1)(rng);
    const std::size_t gy = std::uniform_int_distribution<std::size_t>(0, H - G)(rng);
    const std::size_t gx = std::uniform_int_distribution<std::size_t>(0, W - G)(rng);

    double* img = images.data() + n * H * W * R;
    std::uint8_t* mask = set.data.masks.data() + n * H * W;
    const auto& field = bank[static_cast<std::size_t>(tex)];
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double bg = opt.texture_amplitude * field[((i + dy) % H) * W + (j + dx) % W];
        for (std::size_t r = 0; r < R; ++r) img[(i * W + j) * R + r] = bg + opt.pixel_noise * gauss(rng);
      }
    const Grid& glyph = glyphs[static_cast<std::size_t>(label)];
    for (std::size_t i = 0; i < G; ++i)
      for (std::size_t j = 0; j < G; ++j) {
        if (!glyph[i * G + j]) continue;
        const std::size_t y = gy + i, x = gx + j;
        mask[y * W + x] = 1;
        for (std::size_t r = 0; r < R; ++r) img[(y * W + x) * R + r] = opt.glyph_value;
      }
    set.data.labels[n] = label;
    set.texture_ids[n] = tex;
  }
  set.data.inputs = Tensor(Shape{N, H, W, R}, std::move(images));
  return set;
}

// ---------------------------------------------------------------- STDS files

namespace {
constexpr std::string_view kDatasetMagic = "STDS";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

SyntheticSplit gen_synthetic_split(std::size_t num_classes, std::size_t train_per_class, std::size_t test_per_class,
                                   double background_correlation, std::uint64_t seed, const SyntheticOptions& options) {
  return {gen_synthetic_images(num_classes, train_per_class, background_correlation, 2 * seed, options),
          gen_synthetic_images(num_classes, test_per_class, background_correlation, 2 * seed + 1, options)};
}

std::string encode_image_set(const SyntheticImageSet& set) {
  io::ByteWriter w;
  const auto& d = set.data;
  w.bytes(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(d.size()));
  w.u32(static_cast<std::uint32_t>(d.num_classes));
  w.u32(static_cast<std::uint32_t>(set.height));
  w.u32(static_cast<std::uint32_t>(set.width));
  w.u32(static_cast<std::uint32_t>(set.channels));
  for (double v : d.inputs.data()) w.f64(v);
  for (int l : d.labels) w.u32(static_cast<std::uint32_t>(l));
  for (auto m : d.masks) w.u8(m);
  return w.buffer();
}

SyntheticImageSet decode_image_set(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != kDatasetMagic) throw ParseError("not an STDS dataset (bad magic)", 0);
  const auto version = r.u32("version");
  if (version != kDatasetVersion) throw ParseError("unsupported dataset version " + std::to_string(version), 4);
  const std::size_t N = r.u32("sample count");
  const std::size_t C = r.u32("class count");
  const std::size_t H = r.u32("height");
  const std::size_t W = r.u32("width");
  const std::size_t R = r.u32("channels");
  if (C < 1 || H < 1 || W < 1 || R < 1) throw ParseError("dataset header has a zero dimension", 8);
  const std::size_t payload = N * H * W * R * 8 + N * 4 + N * H * W;
  if (r.remaining() < payload) throw ParseError("truncated dataset payload", r.offset());
  SyntheticImageSet set;
  set.height = H;
  set.width = W;
  set.channels = R;
  set.data.num_classes = C;
  std::vector<double> images(N * H * W * R);
  for (double& v : images) v = r.f64("image payload");
  set.data.inputs = Tensor(Shape{N, H, W, R}, std::move(images));
  set.data.labels.resize(N);
  for (auto& l : set.data.labels) {
    const std::size_t at = r.offset();
    const auto v = r.u32("label");
    if (v >= C) throw ParseError("label " + std::to_string(v) + " out of range", at);
    l = static_cast<int>(v);
  }
  set.data.masks.resize(N * H * W);
  for (auto& m : set.data.masks) {
    const std::size_t at = r.offset();
    m = r.u8("mask");
    if (m > 1) throw ParseError("mask value must be 0 or 1", at);
  }
  if (!r.at_end()) throw ParseError("trailing bytes after dataset payload", r.offset());
  return set;
}

void save_image_set(const SyntheticImageSet& set, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_image_set(set));
}

SyntheticImageSet load_image_set(const std::filesystem::path& path) {
  return decode_image_set(io::read_file(path));
}

}  // namespace stpp
