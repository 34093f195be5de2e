#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pegg/grid.hpp"

namespace pegg {

/// Encoder/decoder layout. Every encoder stage downsamples by
/// `upsample_factor_per_stage` and every decoder stage upsamples by the same
/// factor, so output planes match the input size.
struct NetworkConfig {
  int input_channels = 4;
  int stem_channels = 32;
  std::vector<int> channel_schedule = {32, 64, 136};
  int num_residual_blocks = 3;    // at the bottleneck
  int stage_residual_blocks = 1;  // after each earlier encoder stage
  std::vector<int> spp_kernels = {5, 9, 13};
  int upsample_factor_per_stage = 2;
  int head_channels = 32;

  /// Throws ConfigError on an inconsistent layout, including channel widths
  /// that pixel shuffle cannot split.
  void validate() const;

  /// Total spatial reduction at the bottleneck; inputs must be multiples of it.
  int downsample_factor() const;

  nlohmann::json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& j);

  bool operator==(const NetworkConfig&) const = default;
};

/// Raw head outputs, each [N, 1, H, W].
struct NetworkOutput {
  torch::Tensor quality;
  torch::Tensor angle_sin;
  torch::Tensor angle_cos;
  torch::Tensor width;

  /// Planes stacked as [N, 4, H, W] in (quality, sin, cos, width) order.
  torch::Tensor stacked() const;
};

enum class Activation { Mish, ReLU };

class ConvBnActImpl : public torch::nn::Module {
 public:
  ConvBnActImpl(int in, int out, int kernel, int stride = 1, Activation act = Activation::Mish);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
  Activation act_;
};
TORCH_MODULE(ConvBnAct);

/// Two Conv-BN-Mish layers with an identity shortcut.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  ConvBnAct first_{nullptr};
  ConvBnAct second_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Stride-1, same-padded max pooling at each kernel size, concatenated
/// with the input along channels: [x, pool_k0(x), pool_k1(x), ...].
torch::Tensor spp_pool(const torch::Tensor& x, std::span<const int> kernels);

/// Spatial pyramid pooling followed by a 1x1 Conv-BN-Mish back to `channels`.
class SppImpl : public torch::nn::Module {
 public:
  SppImpl(int channels, std::vector<int> kernels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::vector<int> kernels_;
  ConvBnAct fuse_{nullptr};
};
TORCH_MODULE(Spp);

/// Pixel-shuffle upsampling, skip concatenation, then a convolution block.
class DecoderStageImpl : public torch::nn::Module {
 public:
  DecoderStageImpl(int in, int skip, int out, int factor, Activation act);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

 private:
  torch::nn::PixelShuffle shuffle_{nullptr};
  ConvBnAct block_{nullptr};
};
TORCH_MODULE(DecoderStage);

class PeggNetImpl : public torch::nn::Module {
 public:
  explicit PeggNetImpl(NetworkConfig cfg);

  /// x: [N, C, H, W]. Throws ShapeError when H or W is not a multiple of
  /// the downsample factor, or C does not match the configuration.
  NetworkOutput forward(const torch::Tensor& x);

  const NetworkConfig& config() const { return cfg_; }

  /// Fan-in scaled init for convolutions, unit/zero batch norm, zero head biases.
  void reset_weights();

  /// Zeros the four output heads (weights and biases).
  void zero_heads();

 private:
  NetworkConfig cfg_;
  ConvBnAct stem_{nullptr};
  torch::nn::ModuleList encoder_{nullptr};
  Spp spp_{nullptr};
  torch::nn::ModuleList decoder_{nullptr};
  torch::nn::Conv2d head_quality_{nullptr};
  torch::nn::Conv2d head_sin_{nullptr};
  torch::nn::Conv2d head_cos_{nullptr};
  torch::nn::Conv2d head_width_{nullptr};
};
TORCH_MODULE(PeggNet);

PeggNet build_network(const NetworkConfig& cfg, std::uint64_t seed = 0);

/// Number of trainable scalars.
std::int64_t count_parameters(const torch::nn::Module& net);

/// Inference-mode forward (running batch-norm statistics, no autograd).
NetworkOutput infer(PeggNet& net, const torch::Tensor& x);

// Checkpoints: one archive holding every parameter and buffer keyed by its
// module path, plus the configuration as JSON metadata.
void save_checkpoint(PeggNet& net, const std::filesystem::path& path);

/// Throws LoadError when the file is unreadable or weights disagree with
/// the embedded configuration.
PeggNet load_checkpoint(const std::filesystem::path& path);

/// Same, additionally requiring the embedded configuration to equal `expected`.
PeggNet load_checkpoint(const std::filesystem::path& path, const NetworkConfig& expected);

NetworkConfig read_checkpoint_config(const std::filesystem::path& path);

// Plane <-> tensor helpers.
torch::Tensor planes_to_tensor(std::span<const Plane> planes);  // [C, H, W]
Plane tensor_to_plane(const torch::Tensor& t);                  // t: [H, W]

}  // namespace pegg
