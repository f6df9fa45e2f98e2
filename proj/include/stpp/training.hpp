#pragma once

// Adam, the alternating two-branch joint stage, prototype projection and the
// final FC stage with an L1 penalty on incorrect connections.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stpp/datasets.hpp"
#include "stpp/interpret.hpp"
#include "stpp/losses.hpp"
#include "stpp/network.hpp"

namespace stpp {

struct TrainConfig {
  std::size_t warmup_epochs = 5;
  double warmup_lr = 3e-3;          // add-on and prototypes while the backbone is frozen
  std::size_t joint_epochs = 15;
  double joint_lr_backbone = 1e-4;
  double joint_lr_addon_proto = 3e-3;
  double fc_lr = 1e-4;
  std::size_t fc_iters = 10;        // epochs over the training set
  double l1_weight = 1e-4;
  double lr_decay = 0.2;
  std::size_t lr_decay_period = 5;  // joint epochs per decay step
  double weight_decay = 1e-3;       // backbone and add-on only
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  BranchKind first_branch = BranchKind::support;
  bool project = true;
  LossWeights loss;

  void validate() const;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Bias-corrected Adam on every tensor in params, followed by decoupled
// weight decay p -= lr * weight_decay * p. Buffers are created on first use.
void adam_step(std::span<Tensor> params, const std::vector<std::vector<double>>& grads, AdamState& adam, double lr,
               double weight_decay = 0.0);

struct TrainLogRow {
  std::size_t step = 0;
  std::string stage;
  BranchKind branch = BranchKind::support;
  double ce = 0, ct = 0, sp = 0, cls_or_dsc = 0, ort = 0, total = 0;
};

std::string log_to_csv(const std::vector<TrainLogRow>& log);

// Stateful driver for the joint stage.
class JointTrainer {
 public:
  JointTrainer(ModelState& state, const TrainConfig& cfg);

  // Branch trained on the given global batch number.
  BranchKind branch_for_batch(std::size_t batch) const;
  // Learning rates (backbone, add-on + prototypes) for an epoch; backbone 0 while warming up.
  std::pair<double, double> learning_rates(std::size_t epoch) const;

  // One optimiser step of one branch. Prototypes are renormalised afterwards.
  LossBreakdown step(const Tensor& x, std::span<const int> labels, BranchKind kind, bool freeze_backbone,
                     double lr_backbone, double lr_branch);
  void run_epoch(const LabeledData& data, std::size_t epoch);

  std::size_t batches() const { return batches_; }
  const std::vector<TrainLogRow>& log() const { return log_; }

 private:
  ModelState& state_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  AdamState adam_backbone_, adam_support_, adam_trivial_;
  std::size_t batches_ = 0;
  std::vector<TrainLogRow> log_;
};

// Warm-up then joint epochs. FC weights are untouched.
std::vector<TrainLogRow> stage1_joint(ModelState& state, const LabeledData& data, const TrainConfig& cfg);

// Replaces each prototype by its most similar own-class latent training
// vector, keeping the previous values in `unprojected` and the source patch
// in `provenance`.
void project_prototypes(ModelState& state, const LabeledData& data);

// Trains each branch's FC on its own logits with the masked L1 penalty.
std::vector<TrainLogRow> stage3_fc(ModelState& state, const LabeledData& data, const TrainConfig& cfg);

struct ExperimentResult {
  ModelState state;
  MetricsReport report;
  std::vector<TrainLogRow> log;
};

struct ExperimentOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints, loss.csv, metrics.json
  EvalOptions eval;
  bool evaluate = true;
};

ExperimentResult run_experiment(const ModelConfig& model, const TrainConfig& cfg, const LabeledData& train,
                                const LabeledData& test, const ExperimentOptions& options = {});

// One train + evaluate run per lambda3 value, spread over up to `threads`
// worker threads. Rows come back in the order of `values`.
struct SweepRow {
  double lambda3 = 0;
  MetricsReport report;
};
std::vector<SweepRow> sweep_lambda3(const ModelConfig& model, const TrainConfig& cfg, const EvalOptions& eval,
                                    const LabeledData& train, const LabeledData& test, std::span<const double> values,
                                    std::size_t threads = 1);
// Header lambda3,accuracy,ch,oirr,iou,dauc,aipd_s,aifd_s,aipd_t,aifd_t.
// accuracy is the ensemble's; the saliency columns are the support branch's.
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

// For each branch, mean Euclidean distance in input space from each
// projected prototype's source sample to the nearest opposite-class
// training sample.
struct MoonGeometry {
  double support = 0;
  double trivial = 0;
};
MoonGeometry two_moon_geometry(const ModelState& state, const LabeledData& train);

}  // namespace stpp
