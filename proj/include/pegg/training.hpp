#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pegg/datasets.hpp"
#include "pegg/evaluation.hpp"
#include "pegg/network.hpp"

namespace pegg {

struct TrainConfig {
  std::string dataset = "cornell";  // cornell | jacquard
  std::filesystem::path dataset_root;
  Modality modality = Modality::RgbDepth;
  int input_size = 224;
  int batch_size = 8;
  int epochs = 0;  // 0 = dataset default (100 cornell, 20 jacquard)
  double learning_rate = 1e-3;
  double beta = 1.0;
  std::uint64_t seed = 0;
  SplitMode split_mode = SplitMode::ObjectWise;
  double train_fraction = 0.9;
  bool augment = true;
  double width_scale = kDefaultWidthScale;
  int max_iterations = 0;  // 0 = no cap

  /// Throws ConfigError.
  void validate() const;
  int resolved_epochs() const;
};

struct LossBreakdown {
  double total = 0.0;
  double quality_term = 0.0;
  double angle_sin_term = 0.0;
  double angle_cos_term = 0.0;
  double width_term = 0.0;
};

/// Mean Smooth-L1 over all elements. Throws ShapeError on mismatched shapes
/// and std::invalid_argument when beta <= 0.
torch::Tensor smooth_l1(const torch::Tensor& x, const torch::Tensor& y, double beta);

/// Scalar convenience over planes.
double smooth_l1(const Plane& x, const Plane& y, double beta);

struct LossTerms {
  torch::Tensor total;
  torch::Tensor quality;
  torch::Tensor angle_sin;
  torch::Tensor angle_cos;
  torch::Tensor width;

  LossBreakdown values() const;
};

/// Sum of the four plane losses. `gt` is [N, 4, H, W] in
/// (quality, sin, cos, width) order.
LossTerms total_loss(const NetworkOutput& pred, const torch::Tensor& gt, double beta);

/// Single-sample form over label maps.
LossBreakdown total_loss(const NetworkOutput& pred, const GroundTruthMaps& gt, double beta);

/// Label maps stacked as [4, H, W].
torch::Tensor target_tensor(const GroundTruthMaps& gt);

struct Batch {
  torch::Tensor input;   // [N, C, H, W]
  torch::Tensor target;  // [N, 4, H, W]
  std::vector<std::string> ids;
};

/// Builds a batch from `indices`. With `augment_seed` set, each sample gets
/// its own crop+zoom drawn from a seed derived from it and the sample's position.
Batch make_batch(std::span<const GraspSample> samples, std::span<const std::size_t> indices, Modality modality,
                 double width_scale, std::optional<std::uint64_t> augment_seed);

/// Owns the network and an Adam optimizer.
class Trainer {
 public:
  Trainer(PeggNet net, double learning_rate, double beta);

  /// One forward/backward/update. Throws DivergenceError naming the batch
  /// when the loss is not finite; weights are left untouched in that case.
  LossBreakdown step(const Batch& batch, const std::string& batch_id);

  PeggNet& net() { return net_; }

 private:
  PeggNet net_;
  torch::optim::Adam optimizer_;
  double beta_;
};

struct EpochMetrics {
  int epoch = 0;
  LossBreakdown loss;  // mean over the epoch's batches
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  PeggNet net{nullptr};
  std::vector<EpochMetrics> history;
  int iterations = 0;
  int best_epoch = -1;
  double best_accuracy = -1.0;
};

/// Trains on `train` and scores top-1 rectangle-metric accuracy on `val`
/// after every epoch. With a non-empty `out_dir`, writes metrics.csv,
/// epoch_<n>.ckpt and best.ckpt there.
TrainResult train_on(std::span<const GraspSample> train, std::span<const GraspSample> val, const TrainConfig& cfg,
                     const NetworkConfig& net_cfg, const std::filesystem::path& out_dir);

/// Loads the configured dataset, splits it, and calls train_on.
TrainResult train(const TrainConfig& cfg, const NetworkConfig& net_cfg, const std::filesystem::path& out_dir);

std::vector<GraspSample> load_dataset(const std::string& name, const std::filesystem::path& root, int input_size);

// ---------------------------------------------------------------------------
// Gradient check

struct LossEvaluation {
  torch::Tensor loss;    // scalar
  torch::Tensor branch;  // optional per-element branch indicator (e.g. |x - y| < beta)
};

using LossFunction = std::function<LossEvaluation()>;

struct GradientCheckOptions {
  double epsilon = 1e-6;
  int max_entries_per_param = 0;  // 0 = every entry
  std::uint64_t seed = 0;
};

struct GradientCheckReport {
  double max_rel_error = 0.0;
  int checked = 0;
  int excluded = 0;  // perturbation moved an element across a loss kink
  std::vector<std::string> zero_gradient;
};

/// Compares autograd gradients of `loss_fn` with central differences for
/// each named tensor. Work in double precision for meaningful results.
GradientCheckReport gradient_check(const LossFunction& loss_fn,
                                   const std::vector<std::pair<std::string, torch::Tensor>>& params,
                                   const GradientCheckOptions& opts = {});

}  // namespace pegg
