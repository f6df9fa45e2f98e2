#include "stpp/config.hpp"

#include <set>

#include "json.hpp"
#include "stpp/binary_io.hpp"
#include "stpp/errors.hpp"

namespace stpp {

using nlohmann::json;

namespace {

json conv_to_json(const ConvLayerSpec& l) {
  return {{"out_channels", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride},
          {"activation", to_string(l.activation)}};
}

json backbone_to_json(const BackboneSpec& b) {
  json j;
  j["kind"] = b.kind == BackboneSpec::Kind::mlp ? "mlp" : "conv";
  if (b.kind == BackboneSpec::Kind::mlp) {
    j["widths"] = b.widths;
    json acts = json::array();
    for (Activation a : b.activations) acts.push_back(to_string(a));
    j["activations"] = acts;
  } else {
    j["image_h"] = b.image_h;
    j["image_w"] = b.image_w;
    j["channels"] = b.channels;
    json layers = json::array();
    for (const auto& l : b.conv) layers.push_back(conv_to_json(l));
    j["conv"] = layers;
  }
  return j;
}

// Walks one JSON object, consuming known keys; leftovers are reported.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }
  [[noreturn]] static void fail(const std::string& field, const std::string& msg) {
    throw ConfigError((field.empty() ? std::string("config") : field) + ": " + msg);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    if (const json* v = get(key)) {
      if (!v->is_number()) fail(field(key), "expected a number");
      out = v->get<double>();
    }
  }
  void count(const std::string& key, std::size_t& out) {
    if (const json* v = get(key)) {
      if (!v->is_number_unsigned()) fail(field(key), "expected a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }
  void u64(const std::string& key, std::uint64_t& out) {
    std::size_t v = out;
    count(key, v);
    out = v;
  }
  void flag(const std::string& key, bool& out) {
    if (const json* v = get(key)) {
      if (!v->is_boolean()) fail(field(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  template <class F>
  void text(const std::string& key, F&& apply) {
    if (const json* v = get(key)) {
      if (!v->is_string()) fail(field(key), "expected a string");
      try {
        apply(v->get<std::string>());
      } catch (const std::exception& e) {
        fail(field(key), e.what());
      }
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(field(it.key()), "unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Activation parse_activation(const std::string& s) { return activation_from_string(s); }

ConvLayerSpec conv_from_json(const json& j, const std::string& path) {
  ConvLayerSpec l;
  Reader r(j, path);
  r.count("out_channels", l.out_channels);
  r.count("kernel", l.kernel);
  r.count("stride", l.stride);
  r.text("activation", [&](const std::string& s) { l.activation = parse_activation(s); });
  r.finish();
  return l;
}

void backbone_from_json(const json& j, BackboneSpec& b) {
  Reader r(j, "model.backbone");
  r.text("kind", [&](const std::string& s) {
    if (s == "mlp")
      b.kind = BackboneSpec::Kind::mlp;
    else if (s == "conv")
      b.kind = BackboneSpec::Kind::conv;
    else
      throw ConfigError("expected \"mlp\" or \"conv\", got \"" + s + "\"");
  });
  if (const json* w = r.get("widths")) {
    if (!w->is_array()) Reader::fail(r.field("widths"), "expected an array");
    b.widths.clear();
    for (const auto& v : *w) {
      if (!v.is_number_unsigned()) Reader::fail(r.field("widths"), "expected nonnegative integers");
      b.widths.push_back(v.get<std::size_t>());
    }
  }
  if (const json* a = r.get("activations")) {
    if (!a->is_array()) Reader::fail(r.field("activations"), "expected an array");
    b.activations.clear();
    for (const auto& v : *a) {
      if (!v.is_string()) Reader::fail(r.field("activations"), "expected strings");
      try {
        b.activations.push_back(parse_activation(v.get<std::string>()));
      } catch (const std::exception& e) {
        Reader::fail(r.field("activations"), e.what());
      }
    }
  }
  r.count("image_h", b.image_h);
  r.count("image_w", b.image_w);
  r.count("channels", b.channels);
  if (const json* c = r.get("conv")) {
    if (!c->is_array()) Reader::fail(r.field("conv"), "expected an array");
    b.conv.clear();
    for (std::size_t i = 0; i < c->size(); ++i)
      b.conv.push_back(conv_from_json((*c)[i], r.field("conv") + "[" + std::to_string(i) + "]"));
  }
  r.finish();
}

void model_from_json(const json& j, ModelConfig& m) {
  Reader r(j, "model");
  if (const json* b = r.get("backbone")) backbone_from_json(*b, m.backbone);
  if (const json* a = r.get("addon")) {
    Reader ra(*a, "model.addon");
    ra.flag("enabled", m.addon.enabled);
    ra.count("mid_channels", m.addon.mid_channels);
    ra.text("mid_activation", [&](const std::string& s) { m.addon.mid_activation = parse_activation(s); });
    ra.text("out_activation", [&](const std::string& s) { m.addon.out_activation = parse_activation(s); });
    ra.finish();
  }
  r.count("num_classes", m.num_classes);
  r.count("protos_per_class", m.protos_per_class);
  r.count("proto_dim", m.proto_dim);
  r.text("similarity", [&](const std::string& s) { m.similarity = similarity_from_string(s); });
  r.flag("shared_addon", m.shared_addon);
  r.count("feature_upsample", m.feature_upsample);
  r.finish();
}

void train_from_json(const json& j, TrainConfig& t) {
  Reader r(j, "train");
  r.count("warmup_epochs", t.warmup_epochs);
  r.number("warmup_lr", t.warmup_lr);
  r.count("joint_epochs", t.joint_epochs);
  r.number("joint_lr_backbone", t.joint_lr_backbone);
  r.number("joint_lr_addon_proto", t.joint_lr_addon_proto);
  r.number("fc_lr", t.fc_lr);
  r.count("fc_iters", t.fc_iters);
  r.number("l1_weight", t.l1_weight);
  r.number("lr_decay", t.lr_decay);
  r.count("lr_decay_period", t.lr_decay_period);
  r.number("weight_decay", t.weight_decay);
  r.count("batch_size", t.batch_size);
  r.u64("seed", t.seed);
  r.text("first_branch", [&](const std::string& s) {
    if (s == "support")
      t.first_branch = BranchKind::support;
    else if (s == "trivial")
      t.first_branch = BranchKind::trivial;
    else
      throw ConfigError("expected \"support\" or \"trivial\", got \"" + s + "\"");
  });
  r.flag("project", t.project);
  if (const json* l = r.get("loss")) {
    Reader rl(*l, "train.loss");
    rl.number("lambda1", t.loss.lambda1);
    rl.number("lambda2_support", t.loss.lambda2_support);
    rl.number("lambda2_trivial", t.loss.lambda2_trivial);
    rl.number("lambda3", t.loss.lambda3);
    rl.number("lambda4", t.loss.lambda4);
    rl.finish();
  }
  r.finish();
}

template <class F>
void prefixed(const std::string& prefix, F&& check) {
  try {
    check();
  } catch (const std::exception& e) {
    throw ConfigError(prefix + ": " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  prefixed("model", [&] { model.validate(); });
  prefixed("train", [&] { train.validate(); });
  prefixed("prune", [&] { prune.validate(); });
  if (eval.dauc_steps < 2) throw ConfigError("eval.dauc_steps: must be >= 2");
  if (eval.batch_size < 1) throw ConfigError("eval.batch_size: must be >= 1");
}

std::string config_to_json(const RunConfig& cfg) {
  const ModelConfig& m = cfg.model;
  const TrainConfig& t = cfg.train;
  json j;
  j["model"] = {{"backbone", backbone_to_json(m.backbone)},
                {"addon",
                 {{"enabled", m.addon.enabled},
                  {"mid_channels", m.addon.mid_channels},
                  {"mid_activation", to_string(m.addon.mid_activation)},
                  {"out_activation", to_string(m.addon.out_activation)}}},
                {"num_classes", m.num_classes},
                {"protos_per_class", m.protos_per_class},
                {"proto_dim", m.proto_dim},
                {"similarity", to_string(m.similarity)},
                {"shared_addon", m.shared_addon},
                {"feature_upsample", m.feature_upsample}};
  j["train"] = {{"warmup_epochs", t.warmup_epochs},
                {"warmup_lr", t.warmup_lr},
                {"joint_epochs", t.joint_epochs},
                {"joint_lr_backbone", t.joint_lr_backbone},
                {"joint_lr_addon_proto", t.joint_lr_addon_proto},
                {"fc_lr", t.fc_lr},
                {"fc_iters", t.fc_iters},
                {"l1_weight", t.l1_weight},
                {"lr_decay", t.lr_decay},
                {"lr_decay_period", t.lr_decay_period},
                {"weight_decay", t.weight_decay},
                {"batch_size", t.batch_size},
                {"seed", t.seed},
                {"first_branch", to_string(t.first_branch)},
                {"project", t.project},
                {"loss",
                 {{"lambda1", t.loss.lambda1},
                  {"lambda2_support", t.loss.lambda2_support},
                  {"lambda2_trivial", t.loss.lambda2_trivial},
                  {"lambda3", t.loss.lambda3},
                  {"lambda4", t.loss.lambda4}}}};
  j["eval"] = {{"batch_size", cfg.eval.batch_size},
               {"dauc_samples", cfg.eval.dauc_samples},
               {"dauc_steps", cfg.eval.dauc_steps},
               {"saliency", cfg.eval.saliency}};
  j["prune"] = {{"k_nearest", cfg.prune.k_nearest}, {"tau", cfg.prune.tau}};
  return j.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  Reader r(j, "");
  if (const json* m = r.get("model")) model_from_json(*m, cfg.model);
  if (const json* t = r.get("train")) train_from_json(*t, cfg.train);
  if (const json* e = r.get("eval")) {
    Reader re(*e, "eval");
    re.count("batch_size", cfg.eval.batch_size);
    re.count("dauc_samples", cfg.eval.dauc_samples);
    re.count("dauc_steps", cfg.eval.dauc_steps);
    re.flag("saliency", cfg.eval.saliency);
    re.finish();
  }
  if (const json* p = r.get("prune")) {
    Reader rp(*p, "prune");
    rp.count("k_nearest", cfg.prune.k_nearest);
    rp.count("tau", cfg.prune.tau);
    rp.finish();
  }
  r.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) { return config_from_json(io::read_file(path)); }

std::vector<std::string> preset_names() { return {"synthetic", "twomoon"}; }

RunConfig preset_config(const std::string& name) {
  RunConfig cfg;
  if (name == "synthetic") {
    cfg.model.backbone = BackboneSpec::small_conv(32, 1);
    cfg.model.num_classes = 5;
    cfg.model.protos_per_class = 5;
    cfg.model.proto_dim = 64;
    cfg.model.feature_upsample = 2;
    cfg.train.joint_epochs = 30;
    cfg.train.joint_lr_backbone = 2e-3;
    cfg.train.lr_decay_period = 100;
  } else if (name == "twomoon") {
    cfg.model.backbone = BackboneSpec::two_moon();
    cfg.model.addon.enabled = false;
    cfg.model.num_classes = 2;
    cfg.model.protos_per_class = 2;
    cfg.train.joint_epochs = 400;
    cfg.train.joint_lr_backbone = 1e-3;
    cfg.train.lr_decay_period = 1000;
    cfg.eval.saliency = false;
  } else {
    throw ConfigError("unknown preset \"" + name + "\"");
  }
  return cfg;
}

}  // namespace stpp
