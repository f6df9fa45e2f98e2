#include "stpp/network.hpp"

#include <cmath>
#include <iostream>
#include <map>

#include "stpp/binary_io.hpp"
#include "stpp/errors.hpp"

namespace stpp {

const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
  }
  return "?";
}

const char* to_string(SimilarityKind s) { return s == SimilarityKind::cosine ? "cosine" : "projection"; }
const char* to_string(BranchKind b) { return b == BranchKind::support ? "support" : "trivial"; }

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + s + "'");
}

SimilarityKind similarity_from_string(const std::string& s) {
  if (s == "cosine") return SimilarityKind::cosine;
  if (s == "projection") return SimilarityKind::projection;
  throw ConfigError("unknown similarity '" + s + "'");
}

Tensor apply_activation(Activation act, const Tensor& x) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::tanh: return tanh(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::relu: return relu(x);
  }
  return x;
}

// ---------------------------------------------------------------- specs

BackboneSpec BackboneSpec::two_moon() {
  BackboneSpec spec;
  spec.kind = Kind::mlp;
  spec.widths = {2, 256, 2};
  spec.activations = {Activation::tanh, Activation::sigmoid};
  return spec;
}

BackboneSpec BackboneSpec::small_conv(std::size_t image_size, std::size_t channels) {
  BackboneSpec spec;
  spec.kind = Kind::conv;
  spec.image_h = image_size;
  spec.image_w = image_size;
  spec.channels = channels;
  spec.conv = {{16, 3, 2, Activation::relu}, {32, 3, 2, Activation::relu}, {32, 3, 2, Activation::relu}};
  return spec;
}

namespace {
std::size_t conv_out(std::size_t in, const ConvLayerSpec& l) {
  const std::size_t pad = l.kernel / 2;
  return (in + 2 * pad - l.kernel) / l.stride + 1;
}
}  // namespace

std::size_t BackboneSpec::feature_channels() const {
  if (kind == Kind::mlp) return widths.empty() ? 0 : widths.back();
  return conv.empty() ? channels : conv.back().out_channels;
}

std::size_t BackboneSpec::feature_h() const {
  if (kind == Kind::mlp) return 1;
  std::size_t h = image_h;
  for (const auto& l : conv) h = conv_out(h, l);
  return h;
}

std::size_t BackboneSpec::feature_w() const {
  if (kind == Kind::mlp) return 1;
  std::size_t w = image_w;
  for (const auto& l : conv) w = conv_out(w, l);
  return w;
}

void BackboneSpec::validate() const {
  if (kind == Kind::mlp) {
    if (widths.size() < 2) throw ConfigError("mlp backbone needs at least input and output widths");
    if (activations.size() != widths.size() - 1)
      throw ConfigError("mlp backbone needs one activation per layer");
    for (auto w : widths)
      if (w == 0) throw ConfigError("mlp width must be positive");
    return;
  }
  if (image_h == 0 || image_w == 0 || channels == 0) throw ConfigError("conv backbone image dims must be positive");
  std::size_t h = image_h, w = image_w;
  for (const auto& l : conv) {
    if (l.kernel == 0 || l.stride == 0 || l.out_channels == 0)
      throw ConfigError("conv layer fields must be positive");
    if (h + 2 * (l.kernel / 2) < l.kernel || w + 2 * (l.kernel / 2) < l.kernel)
      throw ConfigError("conv kernel larger than its input");
    h = conv_out(h, l);
    w = conv_out(w, l);
  }
  if (h < 1 || w < 1) throw ConfigError("conv backbone produces an empty feature map");
}

std::size_t ModelConfig::latent_dim() const {
  return addon.enabled ? proto_dim : backbone.feature_channels();
}

void ModelConfig::validate() const {
  backbone.validate();
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (protos_per_class < 1) throw ConfigError("protos_per_class must be at least 1");
  if (addon.enabled && (proto_dim == 0 || addon.mid_channels == 0))
    throw ConfigError("add-on dims must be positive");
  if (feature_upsample < 1) throw ConfigError("feature_upsample must be >= 1");
  if (backbone.kind == BackboneSpec::Kind::mlp && feature_upsample != 1)
    throw ConfigError("feature_upsample applies to conv backbones only");
}

// ---------------------------------------------------------------- parameters

Tensor AddOnLayers::forward(const Tensor& positions) const {
  if (!enabled) return positions;
  Tensor h = apply_activation(mid_activation, linear(positions, w1, b1));
  return apply_activation(out_activation, linear(h, w2, b2));
}

std::vector<Tensor> AddOnLayers::parameters() const {
  if (!enabled) return {};
  return {w1, b1, w2, b2};
}

std::vector<std::size_t> PrototypeSet::members(int cls) const {
  std::vector<std::size_t> out;
  for (std::size_t m = 0; m < class_of.size(); ++m)
    if (class_of[m] == cls) out.push_back(m);
  return out;
}

FcHead FcHead::initial(const std::vector<int>& class_of, std::size_t num_classes) {
  Tensor w(Shape{class_of.size(), num_classes}, -0.5);
  auto d = w.mutable_data();
  for (std::size_t m = 0; m < class_of.size(); ++m) d[m * num_classes + static_cast<std::size_t>(class_of[m])] = 1.0;
  return FcHead{w};
}

namespace {

Tensor uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

AddOnLayers make_addon(const ModelConfig& cfg, std::mt19937_64& rng) {
  AddOnLayers a;
  a.enabled = cfg.addon.enabled;
  a.mid_activation = cfg.addon.mid_activation;
  a.out_activation = cfg.addon.out_activation;
  if (!a.enabled) return a;
  const std::size_t in = cfg.backbone.feature_channels();
  const std::size_t mid = cfg.addon.mid_channels;
  const std::size_t out = cfg.proto_dim;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(in));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(mid));
  a.w1 = uniform_param({in, mid}, std::sqrt(3.0) * b1, rng);
  a.b1 = uniform_param({mid}, b1, rng);
  a.w2 = uniform_param({mid, out}, std::sqrt(3.0) * b2, rng);
  a.b2 = uniform_param({out}, b2, rng);
  return a;
}

PrototypeSet make_prototypes(const ModelConfig& cfg, BranchKind kind, std::mt19937_64& rng) {
  PrototypeSet p;
  p.kind = kind;
  p.num_classes = cfg.num_classes;
  const std::size_t m = cfg.num_classes * cfg.protos_per_class;
  for (std::size_t i = 0; i < m; ++i) p.class_of.push_back(static_cast<int>(i / cfg.protos_per_class));
  // nonnegative latents get prototypes inside the positive orthant
  Activation last = cfg.addon.out_activation;
  if (!cfg.addon.enabled)
    last = cfg.backbone.kind == BackboneSpec::Kind::mlp ? cfg.backbone.activations.back()
                                                       : cfg.backbone.conv.back().activation;
  const bool nonnegative = last == Activation::sigmoid || last == Activation::relu;
  if (nonnegative) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> v(m * cfg.latent_dim());
    for (double& x : v) x = unit(rng);
    p.values = Tensor(Shape{m, cfg.latent_dim()}, std::move(v), true);
  } else {
    p.values = normal_param({m, cfg.latent_dim()}, 1.0, rng);
  }
  normalize_prototypes(p, rng);
  return p;
}

}  // namespace

ModelState ModelState::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelState s;
  s.config = config;
  std::mt19937_64 rng(seed);
  const auto& bb = config.backbone;
  if (bb.kind == BackboneSpec::Kind::mlp) {
    for (std::size_t i = 0; i + 1 < bb.widths.size(); ++i) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(bb.widths[i]));
      s.backbone_w.push_back(uniform_param({bb.widths[i], bb.widths[i + 1]}, bound, rng));
      s.backbone_b.push_back(uniform_param({bb.widths[i + 1]}, bound, rng));
    }
  } else {
    std::size_t in = bb.channels;
    for (const auto& l : bb.conv) {
      const std::size_t fan_in = l.kernel * l.kernel * in;
      const double gain = l.activation == Activation::relu ? 2.0 : 1.0;
      s.backbone_w.push_back(normal_param({fan_in, l.out_channels}, std::sqrt(gain / static_cast<double>(fan_in)), rng));
      s.backbone_b.push_back(Tensor({l.out_channels}, 0.0, true));
      in = l.out_channels;
    }
  }
  for (BranchKind k : {BranchKind::support, BranchKind::trivial}) {
    BranchParams& b = s.branch(k);
    b.addon = make_addon(config, rng);
    b.protos = make_prototypes(config, k, rng);
    b.fc = FcHead::initial(b.protos.class_of, config.num_classes);
  }
  return s;
}

const AddOnLayers& ModelState::addon_for(BranchKind k) const {
  return config.shared_addon ? support.addon : branch(k).addon;
}

std::vector<Tensor> ModelState::backbone_parameters() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < backbone_w.size(); ++i) {
    out.push_back(backbone_w[i]);
    out.push_back(backbone_b[i]);
  }
  return out;
}

std::vector<Tensor> ModelState::branch_parameters(BranchKind k) const {
  std::vector<Tensor> out;
  if (!(config.shared_addon && k == BranchKind::trivial)) out = branch(k).addon.parameters();
  out.push_back(branch(k).protos.values);
  return out;
}

namespace {
BranchParams clone_branch(const BranchParams& b) {
  BranchParams c = b;
  if (b.addon.enabled) {
    c.addon.w1 = b.addon.w1.clone();
    c.addon.b1 = b.addon.b1.clone();
    c.addon.w2 = b.addon.w2.clone();
    c.addon.b2 = b.addon.b2.clone();
  }
  c.protos.values = b.protos.values.clone();
  c.fc.weights = b.fc.weights.clone();
  c.unprojected = b.unprojected.clone();
  return c;
}
}  // namespace

ModelState ModelState::clone() const {
  ModelState c;
  c.config = config;
  for (const auto& w : backbone_w) c.backbone_w.push_back(w.clone());
  for (const auto& b : backbone_b) c.backbone_b.push_back(b.clone());
  c.support = clone_branch(support);
  c.trivial = clone_branch(trivial);
  return c;
}

// ---------------------------------------------------------------- forward

FeatureBatch backbone_forward(const ModelState& state, const Tensor& x) {
  const auto& cfg = state.config;
  const auto& bb = cfg.backbone;
  FeatureBatch out;
  if (bb.kind == BackboneSpec::Kind::mlp) {
    if (x.rank() != 2 || x.dim(1) != bb.widths.front()) {
      throw DimensionError("mlp backbone expects [B," + std::to_string(bb.widths.front()) + "], got " +
                           shape_to_string(x.shape()));
    }
    Tensor h = x;
    for (std::size_t i = 0; i < state.backbone_w.size(); ++i)
      h = apply_activation(bb.activations[i], linear(h, state.backbone_w[i], state.backbone_b[i]));
    out.batch = x.dim(0);
    out.positions = h;
    return out;
  }
  if (x.rank() != 4 || x.dim(1) != bb.image_h || x.dim(2) != bb.image_w || x.dim(3) != bb.channels) {
    throw DimensionError("conv backbone expects [B," + std::to_string(bb.image_h) + "," +
                         std::to_string(bb.image_w) + "," + std::to_string(bb.channels) + "], got " +
                         shape_to_string(x.shape()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < bb.conv.size(); ++i) {
    const auto& l = bb.conv[i];
    h = apply_activation(l.activation,
                         conv2d(h, state.backbone_w[i], state.backbone_b[i], l.kernel, l.stride, l.kernel / 2));
  }
  if (cfg.feature_upsample > 1)
    h = upsample_bilinear(h, h.dim(1) * cfg.feature_upsample, h.dim(2) * cfg.feature_upsample);
  out.batch = h.dim(0);
  out.h = h.dim(1);
  out.w = h.dim(2);
  out.positions = reshape(h, {out.batch * out.h * out.w, h.dim(3)});
  return out;
}

Tensor similarity_matrix(const Tensor& latent, const Tensor& prototypes, SimilarityKind kind) {
  if (latent.rank() != 2 || prototypes.rank() != 2 || latent.dim(1) != prototypes.dim(1)) {
    throw DimensionError("similarity: latent " + shape_to_string(latent.shape()) + " vs prototypes " +
                         shape_to_string(prototypes.shape()));
  }
  Tensor dots = matmul(latent, transpose(prototypes));
  return kind == SimilarityKind::projection ? abs(dots) : dots;
}

SimilarityResult forward_branch(const ModelState& state, BranchKind kind, const FeatureBatch& features) {
  const BranchParams& br = state.branch(kind);
  SimilarityResult r;
  r.batch = features.batch;
  r.h = features.h;
  r.w = features.w;
  Tensor z = state.addon_for(kind).forward(features.positions);
  r.latent = l2_normalize_rows(z);
  r.maps = similarity_matrix(r.latent, br.protos.values, state.config.similarity);
  const std::size_t m = br.protos.count();
  r.pooled = reduce(ReduceKind::max, reshape(r.maps, {r.batch, r.positions(), m}), {1});
  r.logits = matmul(r.pooled, br.fc.weights);
  return r;
}

SimilarityResult forward_branch(const ModelState& state, BranchKind kind, const Tensor& x) {
  return forward_branch(state, kind, backbone_forward(state, x));
}

double SimilarityResult::map_at(std::size_t b, std::size_t m, std::size_t i, std::size_t j) const {
  const std::size_t mcount = maps.dim(1);
  return maps[(b * positions() + i * w + j) * mcount + m];
}

double similarity(std::span<const double> v, std::span<const double> p, SimilarityKind kind) {
  if (v.size() != p.size()) {
    throw DimensionError("similarity: vector dims " + std::to_string(v.size()) + " vs " + std::to_string(p.size()));
  }
  double nn = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    nn += v[i] * v[i];
    dot += v[i] * p[i];
  }
  if (nn == 0.0) return 0.0;
  const double s = dot / std::sqrt(nn);
  return kind == SimilarityKind::projection ? std::fabs(s) : s;
}

Tensor ensemble_logits(const SimilarityResult& support, const SimilarityResult& trivial) {
  return add(support.logits, trivial.logits);
}

void normalize_prototypes(PrototypeSet& protos, std::mt19937_64& rng) {
  auto d = protos.values.mutable_data();
  const std::size_t m = protos.count();
  const std::size_t dim = protos.dim();
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = d.data() + i * dim;
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += row[j] * row[j];
    while (s == 0.0) {
      std::cerr << "warning: prototype " << i << " has zero norm; redrawing\n";
      for (std::size_t j = 0; j < dim; ++j) row[j] = gauss(rng);
      s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += row[j] * row[j];
    }
    const double nrm = std::sqrt(s);
    for (std::size_t j = 0; j < dim; ++j) row[j] /= nrm;
  }
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr std::string_view kCheckpointMagic = "STPP";
constexpr std::uint32_t kCheckpointVersion = 1;

using Named = std::vector<std::pair<std::string, Tensor>>;

Tensor vec_tensor(const std::vector<double>& v) { return Tensor(Shape{v.size()}, v); }

void add_branch(Named& out, const std::string& prefix, const BranchParams& b) {
  if (b.addon.enabled) {
    out.emplace_back(prefix + ".addon.w1", b.addon.w1);
    out.emplace_back(prefix + ".addon.b1", b.addon.b1);
    out.emplace_back(prefix + ".addon.w2", b.addon.w2);
    out.emplace_back(prefix + ".addon.b2", b.addon.b2);
  }
  out.emplace_back(prefix + ".prototypes", b.protos.values);
  std::vector<double> cls(b.protos.class_of.begin(), b.protos.class_of.end());
  out.emplace_back(prefix + ".class_of", vec_tensor(cls));
  out.emplace_back(prefix + ".fc", b.fc.weights);
  if (b.unprojected.rank() == 2) out.emplace_back(prefix + ".unprojected", b.unprojected);
  if (!b.provenance.empty()) {
    std::vector<double> p;
    for (const auto& e : b.provenance)
      for (auto v : e) p.push_back(static_cast<double>(v));
    out.emplace_back(prefix + ".provenance", Tensor(Shape{b.provenance.size(), 3}, std::move(p)));
  }
}

Named to_named(const ModelState& s) {
  const auto& c = s.config;
  Named out;
  out.emplace_back("config.model",
                   vec_tensor({static_cast<double>(c.backbone.kind == BackboneSpec::Kind::mlp ? 0 : 1),
                               static_cast<double>(c.num_classes), static_cast<double>(c.protos_per_class),
                               static_cast<double>(c.proto_dim), static_cast<double>(c.similarity),
                               c.shared_addon ? 1.0 : 0.0, c.addon.enabled ? 1.0 : 0.0,
                               static_cast<double>(c.addon.mid_channels),
                               static_cast<double>(c.addon.mid_activation),
                               static_cast<double>(c.addon.out_activation),
                               static_cast<double>(c.feature_upsample), static_cast<double>(c.backbone.image_h),
                               static_cast<double>(c.backbone.image_w), static_cast<double>(c.backbone.channels)}));
  std::vector<double> widths(c.backbone.widths.begin(), c.backbone.widths.end());
  out.emplace_back("config.mlp_widths", vec_tensor(widths));
  std::vector<double> acts;
  for (auto a : c.backbone.activations) acts.push_back(static_cast<double>(a));
  out.emplace_back("config.mlp_activations", vec_tensor(acts));
  std::vector<double> conv;
  for (const auto& l : c.backbone.conv) {
    conv.push_back(static_cast<double>(l.out_channels));
    conv.push_back(static_cast<double>(l.kernel));
    conv.push_back(static_cast<double>(l.stride));
    conv.push_back(static_cast<double>(l.activation));
  }
  out.emplace_back("config.conv", Tensor(Shape{c.backbone.conv.size(), 4}, std::move(conv)));
  for (std::size_t i = 0; i < s.backbone_w.size(); ++i) {
    out.emplace_back("backbone.w" + std::to_string(i), s.backbone_w[i]);
    out.emplace_back("backbone.b" + std::to_string(i), s.backbone_b[i]);
  }
  add_branch(out, "support", s.support);
  add_branch(out, "trivial", s.trivial);
  return out;
}

std::size_t as_size(double v) { return static_cast<std::size_t>(v); }

}  // namespace

std::string encode_checkpoint(const ModelState& state) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  for (const auto& [name, t] : to_named(state)) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return w.buffer();
}

ModelState decode_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != kCheckpointMagic) throw ParseError("not an STPP checkpoint (bad magic)", 0);
  const auto version = r.u32("version");
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  std::map<std::string, Tensor> tensors;
  while (!r.at_end()) {
    const std::size_t start = r.offset();
    const auto len = r.u32("name length");
    std::string name(r.bytes(len, "name"));
    const auto rank = r.u32("rank");
    if (rank > 8) throw ParseError("implausible tensor rank " + std::to_string(rank), start);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(as_size(static_cast<double>(r.u64("dimension"))));
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / 8) throw ParseError("tensor '" + name + "' payload exceeds file", r.offset());
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64("payload");
    tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
  }
  auto get = [&](const std::string& name) -> Tensor {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ParseError("checkpoint lacks tensor '" + name + "'", bytes.size());
    return it->second;
  };

  ModelState s;
  auto& c = s.config;
  const auto model = get("config.model").data();
  if (model.size() != 14) throw ParseError("config.model has wrong length", bytes.size());
  c.backbone.kind = model[0] == 0 ? BackboneSpec::Kind::mlp : BackboneSpec::Kind::conv;
  c.num_classes = as_size(model[1]);
  c.protos_per_class = as_size(model[2]);
  c.proto_dim = as_size(model[3]);
  c.similarity = static_cast<SimilarityKind>(static_cast<int>(model[4]));
  c.shared_addon = model[5] != 0;
  c.addon.enabled = model[6] != 0;
  c.addon.mid_channels = as_size(model[7]);
  c.addon.mid_activation = static_cast<Activation>(static_cast<int>(model[8]));
  c.addon.out_activation = static_cast<Activation>(static_cast<int>(model[9]));
  c.feature_upsample = as_size(model[10]);
  c.backbone.image_h = as_size(model[11]);
  c.backbone.image_w = as_size(model[12]);
  c.backbone.channels = as_size(model[13]);
  c.backbone.widths.clear();
  for (double v : get("config.mlp_widths").data()) c.backbone.widths.push_back(as_size(v));
  c.backbone.activations.clear();
  for (double v : get("config.mlp_activations").data()) c.backbone.activations.push_back(static_cast<Activation>(static_cast<int>(v)));
  c.backbone.conv.clear();
  const Tensor conv = get("config.conv");
  for (std::size_t i = 0; i * 4 < conv.size(); ++i) {
    c.backbone.conv.push_back({as_size(conv[i * 4]), as_size(conv[i * 4 + 1]), as_size(conv[i * 4 + 2]),
                               static_cast<Activation>(static_cast<int>(conv[i * 4 + 3]))});
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("invalid model config in checkpoint: ") + e.what(), 8);
  }
  const std::size_t layers = c.backbone.kind == BackboneSpec::Kind::mlp ? c.backbone.widths.size() - 1 : c.backbone.conv.size();
  for (std::size_t i = 0; i < layers; ++i) {
    Tensor w = get("backbone.w" + std::to_string(i));
    Tensor b = get("backbone.b" + std::to_string(i));
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    s.backbone_w.push_back(w);
    s.backbone_b.push_back(b);
  }
  for (BranchKind k : {BranchKind::support, BranchKind::trivial}) {
    const std::string prefix = to_string(k);
    BranchParams& b = s.branch(k);
    b.addon.enabled = c.addon.enabled;
    b.addon.mid_activation = c.addon.mid_activation;
    b.addon.out_activation = c.addon.out_activation;
    if (c.addon.enabled) {
      b.addon.w1 = get(prefix + ".addon.w1");
      b.addon.b1 = get(prefix + ".addon.b1");
      b.addon.w2 = get(prefix + ".addon.w2");
      b.addon.b2 = get(prefix + ".addon.b2");
      for (Tensor* t : {&b.addon.w1, &b.addon.b1, &b.addon.w2, &b.addon.b2}) t->set_requires_grad(true);
    }
    b.protos.kind = k;
    b.protos.num_classes = c.num_classes;
    b.protos.values = get(prefix + ".prototypes");
    b.protos.values.set_requires_grad(true);
    for (double v : get(prefix + ".class_of").data()) b.protos.class_of.push_back(static_cast<int>(v));
    b.fc.weights = get(prefix + ".fc");
    if (b.protos.values.rank() != 2 || b.protos.values.dim(0) != b.protos.count() ||
        b.fc.weights.rank() != 2 || b.fc.weights.dim(0) != b.protos.count() ||
        b.fc.weights.dim(1) != c.num_classes || b.protos.values.dim(1) != c.latent_dim()) {
      throw ParseError("inconsistent " + prefix + " branch tensors", bytes.size());
    }
    if (auto it = tensors.find(prefix + ".unprojected"); it != tensors.end()) b.unprojected = it->second;
    if (auto it = tensors.find(prefix + ".provenance"); it != tensors.end()) {
      const Tensor& p = it->second;
      for (std::size_t i = 0; i + 2 < p.size(); i += 3)
        b.provenance.push_back({as_size(p[i]), as_size(p[i + 1]), as_size(p[i + 2])});
    }
  }
  return s;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(state));
}

ModelState load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace stpp
