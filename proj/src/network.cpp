#include "pegg/network.hpp"

#include <algorithm>
#include <string>

#include "pegg/errors.hpp"

namespace fs = std::filesystem;
namespace nn = torch::nn;

namespace pegg {

void NetworkConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("network: " + m); };
  if (input_channels != 1 && input_channels != 3 && input_channels != 4) fail("input_channels must be 1, 3 or 4");
  if (stem_channels < 1 || head_channels < 1) fail("channel widths must be positive");
  if (channel_schedule.empty()) fail("channel_schedule needs at least one stage");
  if (num_residual_blocks < 0 || stage_residual_blocks < 0) fail("residual block counts must be >= 0");
  if (upsample_factor_per_stage < 2) fail("upsample_factor_per_stage must be >= 2");
  const int f2 = upsample_factor_per_stage * upsample_factor_per_stage;
  for (int c : channel_schedule) {
    if (c < 1) fail("channel widths must be positive");
    if (c % f2 != 0) {
      fail("stage width " + std::to_string(c) + " is not divisible by " + std::to_string(f2) +
           " as pixel shuffle requires");
    }
  }
  for (int k : spp_kernels) {
    if (k < 1 || k % 2 == 0) fail("spp kernels must be odd and positive");
  }
}

int NetworkConfig::downsample_factor() const {
  int f = 1;
  for (std::size_t i = 0; i < channel_schedule.size(); ++i) f *= upsample_factor_per_stage;
  return f;
}

nlohmann::json NetworkConfig::to_json() const {
  return {{"input_channels", input_channels},
          {"stem_channels", stem_channels},
          {"channel_schedule", channel_schedule},
          {"num_residual_blocks", num_residual_blocks},
          {"stage_residual_blocks", stage_residual_blocks},
          {"spp_kernels", spp_kernels},
          {"upsample_factor_per_stage", upsample_factor_per_stage},
          {"head_channels", head_channels}};
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.input_channels = j.at("input_channels").get<int>();
  c.stem_channels = j.at("stem_channels").get<int>();
  c.channel_schedule = j.at("channel_schedule").get<std::vector<int>>();
  c.num_residual_blocks = j.at("num_residual_blocks").get<int>();
  c.stage_residual_blocks = j.at("stage_residual_blocks").get<int>();
  c.spp_kernels = j.at("spp_kernels").get<std::vector<int>>();
  c.upsample_factor_per_stage = j.at("upsample_factor_per_stage").get<int>();
  c.head_channels = j.at("head_channels").get<int>();
  return c;
}

torch::Tensor NetworkOutput::stacked() const { return torch::cat({quality, angle_sin, angle_cos, width}, 1); }

ConvBnActImpl::ConvBnActImpl(int in, int out, int kernel, int stride, Activation act) : act_(act) {
  conv_ = register_module(
      "conv", nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).bias(false)));
  bn_ = register_module("bn", nn::BatchNorm2d(nn::BatchNorm2dOptions(out).momentum(0.1)));
}

torch::Tensor ConvBnActImpl::forward(const torch::Tensor& x) {
  auto y = bn_(conv_(x));
  return act_ == Activation::Mish ? torch::mish(y) : torch::relu(y);
}

ResidualBlockImpl::ResidualBlockImpl(int channels) {
  first_ = register_module("first", ConvBnAct(channels, channels, 3));
  second_ = register_module("second", ConvBnAct(channels, channels, 3));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + second_(first_(x)); }

torch::Tensor spp_pool(const torch::Tensor& x, std::span<const int> kernels) {
  std::vector<torch::Tensor> parts{x};
  for (int k : kernels) {
    parts.push_back(torch::max_pool2d(x, {k, k}, {1, 1}, {k / 2, k / 2}));
  }
  return torch::cat(parts, 1);
}

SppImpl::SppImpl(int channels, std::vector<int> kernels) : kernels_(std::move(kernels)) {
  const int in = channels * static_cast<int>(kernels_.size() + 1);
  fuse_ = register_module("fuse", ConvBnAct(in, channels, 1));
}

torch::Tensor SppImpl::forward(const torch::Tensor& x) { return fuse_(spp_pool(x, kernels_)); }

DecoderStageImpl::DecoderStageImpl(int in, int skip, int out, int factor, Activation act) {
  shuffle_ = register_module("shuffle", nn::PixelShuffle(nn::PixelShuffleOptions(factor)));
  block_ = register_module("block", ConvBnAct(in / (factor * factor) + skip, out, 3, 1, act));
}

torch::Tensor DecoderStageImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  return block_(torch::cat({shuffle_(x), skip}, 1));
}

PeggNetImpl::PeggNetImpl(NetworkConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int f = cfg_.upsample_factor_per_stage;
  const auto& sched = cfg_.channel_schedule;
  const std::size_t n = sched.size();

  stem_ = register_module("stem", ConvBnAct(cfg_.input_channels, cfg_.stem_channels, 3));

  encoder_ = register_module("encoder", nn::ModuleList());
  int prev = cfg_.stem_channels;
  for (std::size_t i = 0; i < n; ++i) {
    nn::Sequential stage;
    stage->push_back(ConvBnAct(prev, sched[i], 3, f));
    const int blocks = i + 1 == n ? cfg_.num_residual_blocks : cfg_.stage_residual_blocks;
    for (int b = 0; b < blocks; ++b) stage->push_back(ResidualBlock(sched[i]));
    encoder_->push_back(stage);
    prev = sched[i];
  }

  spp_ = register_module("spp", Spp(sched.back(), cfg_.spp_kernels));

  // Skip sources, shallowest first: stem output, then every encoder stage but the last.
  std::vector<int> skips{cfg_.stem_channels};
  for (std::size_t i = 0; i + 1 < n; ++i) skips.push_back(sched[i]);

  decoder_ = register_module("decoder", nn::ModuleList());
  int cur = sched.back();
  for (std::size_t j = 0; j < n; ++j) {
    const int skip = skips[n - 1 - j];
    const bool last = j + 1 == n;
    const int out = last ? cfg_.head_channels : skip;
    decoder_->push_back(DecoderStage(cur, skip, out, f, last ? Activation::ReLU : Activation::Mish));
    cur = out;
  }

  auto head = [&](const char* name) {
    return register_module(name, nn::Conv2d(nn::Conv2dOptions(cfg_.head_channels, 1, 1).bias(true)));
  };
  head_quality_ = head("head_quality");
  head_sin_ = head("head_sin");
  head_cos_ = head("head_cos");
  head_width_ = head("head_width");

  reset_weights();
}

void PeggNetImpl::reset_weights() {
  torch::NoGradGuard guard;
  for (auto& m : modules(/*include_self=*/false)) {
    if (auto* conv = m->as<nn::Conv2dImpl>()) {
      nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* bn = m->as<nn::BatchNorm2dImpl>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
      bn->reset_running_stats();
    }
  }
}

void PeggNetImpl::zero_heads() {
  torch::NoGradGuard guard;
  for (auto* h : {&head_quality_, &head_sin_, &head_cos_, &head_width_}) {
    (*h)->weight.zero_();
    (*h)->bias.zero_();
  }
}

NetworkOutput PeggNetImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4) throw ShapeError("network input must be [N, C, H, W]");
  if (x.size(1) != cfg_.input_channels) {
    throw ShapeError("network expects " + std::to_string(cfg_.input_channels) + " input channels, got " +
                     std::to_string(x.size(1)));
  }
  const int m = cfg_.downsample_factor();
  if (x.size(2) % m != 0 || x.size(3) % m != 0) {
    throw ShapeError("input height and width must be multiples of " + std::to_string(m) + ", got " +
                     std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)));
  }

  std::vector<torch::Tensor> skips;
  auto y = stem_(x);
  skips.push_back(y);
  for (const auto& stage : *encoder_) {
    y = stage->as<nn::SequentialImpl>()->forward(y);
    skips.push_back(y);
  }
  skips.pop_back();  // the bottleneck feeds the decoder directly
  y = spp_(y);
  for (const auto& stage : *decoder_) {
    y = stage->as<DecoderStageImpl>()->forward(y, skips.back());
    skips.pop_back();
  }
  return {head_quality_(y), head_sin_(y), head_cos_(y), head_width_(y)};
}

PeggNet build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return PeggNet(cfg);
}

std::int64_t count_parameters(const torch::nn::Module& net) {
  std::int64_t n = 0;
  for (const auto& p : net.parameters()) {
    if (p.requires_grad()) n += p.numel();
  }
  return n;
}

NetworkOutput infer(PeggNet& net, const torch::Tensor& x) {
  torch::NoGradGuard guard;
  const bool was_training = net->is_training();
  net->eval();
  auto out = net->forward(x);
  if (was_training) net->train();
  return out;
}

namespace {

std::string archive_key(const std::string& name) {
  std::string k = name;
  std::replace(k.begin(), k.end(), '.', '/');
  return k;
}

}  // namespace

void save_checkpoint(PeggNet& net, const fs::path& path) {
  torch::serialize::OutputArchive archive;
  archive.write("config", c10::IValue(net->config().to_json().dump()));
  torch::serialize::OutputArchive params, buffers;
  for (const auto& p : net->named_parameters()) params.write(archive_key(p.key()), p.value());
  for (const auto& b : net->named_buffers()) buffers.write(archive_key(b.key()), b.value(), /*is_buffer=*/true);
  archive.write("params", params);
  archive.write("buffers", buffers);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  try {
    archive.save_to(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

NetworkConfig read_checkpoint_config(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
    c10::IValue cfg;
    archive.read("config", cfg);
    return NetworkConfig::from_json(nlohmann::json::parse(cfg.toStringRef()));
  } catch (const c10::Error& e) {
    throw LoadError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad configuration in checkpoint " + path.string() + ": " + e.what());
  }
}

PeggNet load_checkpoint(const fs::path& path) {
  const NetworkConfig cfg = read_checkpoint_config(path);
  PeggNet net(cfg);
  torch::serialize::InputArchive archive, params, buffers;
  torch::NoGradGuard guard;
  try {
    archive.load_from(path.string());
    archive.read("params", params);
    archive.read("buffers", buffers);
    auto restore = [&](torch::serialize::InputArchive& src, const std::string& name, torch::Tensor& dst) {
      torch::Tensor t;
      if (!src.try_read(archive_key(name), t)) throw LoadError("checkpoint is missing tensor " + name);
      if (t.sizes() != dst.sizes()) {
        throw LoadError("tensor " + name + " has shape " + c10::str(t.sizes()) + ", configuration expects " +
                        c10::str(dst.sizes()));
      }
      dst.copy_(t);
    };
    for (auto& p : net->named_parameters()) restore(params, p.key(), p.value());
    for (auto& b : net->named_buffers()) restore(buffers, b.key(), b.value());
  } catch (const c10::Error& e) {
    throw LoadError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return net;
}

PeggNet load_checkpoint(const fs::path& path, const NetworkConfig& expected) {
  if (read_checkpoint_config(path) != expected) {
    throw LoadError("checkpoint " + path.string() + " was built with a different network configuration");
  }
  return load_checkpoint(path);
}

torch::Tensor planes_to_tensor(std::span<const Plane> planes) {
  if (planes.empty()) throw ShapeError("planes_to_tensor: no planes");
  const int rows = planes.front().rows(), cols = planes.front().cols();
  auto t = torch::empty({static_cast<long>(planes.size()), rows, cols}, torch::kFloat32);
  for (std::size_t i = 0; i < planes.size(); ++i) {
    if (planes[i].rows() != rows || planes[i].cols() != cols || planes[i].channels() != 1) {
      throw ShapeError("planes_to_tensor: planes differ in shape");
    }
    std::copy(planes[i].data(), planes[i].data() + planes[i].size(), t[static_cast<long>(i)].data_ptr<float>());
  }
  return t;
}

Plane tensor_to_plane(const torch::Tensor& t) {
  if (t.dim() != 2) throw ShapeError("tensor_to_plane: expected a 2-D tensor");
  auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  Plane p(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)));
  std::copy(c.data_ptr<float>(), c.data_ptr<float>() + c.numel(), p.data());
  return p;
}

}  // namespace pegg
