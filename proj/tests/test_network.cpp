#include <fstream>

#include <gtest/gtest.h>

#include "pegg/errors.hpp"
#include "pegg/network.hpp"
#include "synthetic.hpp"

using namespace pegg;

namespace {

NetworkConfig small_config(int in = 1) {
  NetworkConfig c;
  c.input_channels = in;
  c.stem_channels = 8;
  c.channel_schedule = {8, 16, 24};
  c.num_residual_blocks = 1;
  c.head_channels = 8;
  return c;
}

}  // namespace

TEST(NetworkConfig, Validation) {
  NetworkConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.downsample_factor(), 8);
  c.channel_schedule = {32, 64, 130};
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("130"), std::string::npos) << e.what();
  }
  c = NetworkConfig{};
  c.channel_schedule.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.input_channels = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.spp_kernels = {4};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(NetworkConfig, JsonRoundTrip) {
  NetworkConfig c = small_config(3);
  c.spp_kernels = {3, 7};
  EXPECT_EQ(NetworkConfig::from_json(c.to_json()), c);
}

TEST(PeggNet, DefaultParameterCount) {
  auto net = build_network(NetworkConfig{});
  const auto n = count_parameters(*net);
  EXPECT_EQ(n, 1357060);
  EXPECT_GE(n, 1'300'000);
  EXPECT_LE(n, 1'450'000);
}

TEST(PeggNet, OutputShapesFollowInput) {
  auto net = build_network(small_config(4), 1);
  for (int side : {64, 96}) {
    const auto out = infer(net, torch::randn({2, 4, side, side + 8}));
    for (const auto* t : {&out.quality, &out.angle_sin, &out.angle_cos, &out.width}) {
      EXPECT_EQ(t->sizes(), (std::vector<int64_t>{2, 1, side, side + 8}));
    }
    EXPECT_EQ(out.stacked().size(1), 4);
  }
}

TEST(PeggNet, RejectsBadShapes) {
  auto net = build_network(small_config(1), 1);
  EXPECT_THROW(net->forward(torch::randn({1, 1, 60, 64})), ShapeError);
  EXPECT_THROW(net->forward(torch::randn({1, 3, 64, 64})), ShapeError);
  EXPECT_THROW(net->forward(torch::randn({1, 64, 64})), ShapeError);
}

TEST(PeggNet, SeededBuildIsDeterministic) {
  auto a = build_network(small_config(), 7);
  auto b = build_network(small_config(), 7);
  const auto x = torch::randn({1, 1, 32, 32});
  EXPECT_TRUE(torch::equal(infer(a, x).stacked(), infer(b, x).stacked()));
}

TEST(PeggNet, InferRestoresModeAndIsBatchIndependent) {
  auto net = build_network(small_config(), 3);
  net->train();
  const auto x = torch::randn({3, 1, 32, 32});
  const auto all = infer(net, x).stacked();
  EXPECT_TRUE(net->is_training());
  const auto one = infer(net, x.slice(0, 1, 2)).stacked();
  EXPECT_LT((all.slice(0, 1, 2) - one).abs().max().item<double>(), 1e-4);
}

TEST(PeggNet, EveryParameterReceivesGradient) {
  auto net = build_network(small_config(), 5);
  net->train();
  const auto out = net->forward(torch::randn({2, 1, 32, 32}));
  const auto loss = (out.stacked() - torch::randn({2, 4, 32, 32})).pow(2).mean();
  loss.backward();
  for (const auto& p : net->named_parameters()) {
    ASSERT_TRUE(p.value().grad().defined()) << p.key();
    EXPECT_GT(p.value().grad().abs().sum().item<double>(), 0.0) << p.key();
  }
}

TEST(PeggNet, ZeroHeadsGivesZeroOutput) {
  auto net = build_network(small_config(), 5);
  net->zero_heads();
  const auto out = infer(net, torch::randn({1, 1, 32, 32}));
  EXPECT_EQ(out.stacked().abs().max().item<float>(), 0.0f);
}

TEST(Spp, MatchesDirectWindowMax) {
  torch::manual_seed(0);
  const auto x = torch::randn({1, 2, 9, 11});
  const std::vector<int> kernels{3, 5};
  const auto y = spp_pool(x, kernels);
  ASSERT_EQ(y.sizes(), (std::vector<int64_t>{1, 6, 9, 11}));
  EXPECT_TRUE(torch::equal(y.slice(1, 0, 2), x));
  const auto acc = x.accessor<float, 4>();
  const auto out = y.accessor<float, 4>();
  for (std::size_t k = 0; k < kernels.size(); ++k) {
    const int h = kernels[k] / 2;
    for (int ch = 0; ch < 2; ++ch) {
      for (int r = 0; r < 9; ++r) {
        for (int c = 0; c < 11; ++c) {
          float m = -1e30f;
          for (int dr = -h; dr <= h; ++dr)
            for (int dc = -h; dc <= h; ++dc) {
              const int rr = r + dr, cc = c + dc;
              if (rr >= 0 && rr < 9 && cc >= 0 && cc < 11) m = std::max(m, acc[0][ch][rr][cc]);
            }
          EXPECT_EQ(out[0][2 + 2 * static_cast<int>(k) + ch][r][c], m);
        }
      }
    }
  }
}

TEST(Checkpoint, RoundTripReproducesOutputs) {
  const auto dir = testkit::scratch_dir("ckpt");
  auto net = build_network(small_config(4), 11);
  // Move running statistics off their defaults so buffers matter.
  net->train();
  for (int i = 0; i < 3; ++i) net->forward(torch::randn({2, 4, 32, 32}) * 3 + 1);
  save_checkpoint(net, dir / "m.ckpt");
  auto loaded = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(loaded->config(), net->config());
  const auto x = torch::randn({1, 4, 32, 32});
  EXPECT_TRUE(torch::equal(infer(net, x).stacked(), infer(loaded, x).stacked()));
  EXPECT_EQ(read_checkpoint_config(dir / "m.ckpt"), small_config(4));

  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", small_config(1)), LoadError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), LoadError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), LoadError);
  std::filesystem::remove_all(dir);
}

TEST(PlaneTensor, RoundTrip) {
  Plane a(2, 3), b(2, 3);
  for (int i = 0; i < 6; ++i) {
    a.data()[i] = static_cast<float>(i);
    b.data()[i] = static_cast<float>(-i);
  }
  const std::vector<Plane> planes{a, b};
  const auto t = planes_to_tensor(planes);
  EXPECT_EQ(t.sizes(), (std::vector<int64_t>{2, 2, 3}));
  EXPECT_EQ(t[0][1][2].item<float>(), 5.0f);
  EXPECT_EQ(tensor_to_plane(t[1]), b);
}
