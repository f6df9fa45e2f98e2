#pragma once

// JSON run configuration: model, training schedule, evaluation and pruning.
// Missing fields keep their defaults; unknown fields and wrong types raise
// ConfigError naming the field.

#include <string>
#include <vector>

#include "stpp/interpret.hpp"
#include "stpp/network.hpp"
#include "stpp/training.hpp"

namespace stpp {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalOptions eval;
  PruneConfig prune;

  void validate() const;
};

std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::string& path);

// "synthetic" (5-class 32x32 glyph images) or "twomoon".
RunConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace stpp
