#include <cmath>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "pegg/errors.hpp"
#include "pegg/training.hpp"
#include "synthetic.hpp"

using namespace pegg;
namespace fs = std::filesystem;

namespace {

NetworkConfig tiny_network(int channels) {
  NetworkConfig c;
  c.input_channels = channels;
  c.stem_channels = 8;
  c.channel_schedule = {8, 16, 24};
  c.num_residual_blocks = 1;
  c.head_channels = 8;
  return c;
}

std::vector<GraspSample> synthetic_set(int n, int size, std::uint64_t seed) {
  std::vector<GraspSample> out;
  for (int i = 0; i < n; ++i) {
    auto s = testkit::make_synthetic_sample(seed + i, size, size, size / 224.0, size / 20);
    s.id = "syn" + std::to_string(i);
    s.object_id = "obj" + std::to_string(i / 2);
    out.push_back(std::move(s));
  }
  return out;
}

torch::Tensor scalar_tensor(double v) { return torch::full({1}, v, torch::kDouble); }

}  // namespace

TEST(SmoothL1, Examples) {
  EXPECT_EQ(smooth_l1(scalar_tensor(0.3), scalar_tensor(0.3), 1.0).item<double>(), 0.0);
  EXPECT_NEAR(smooth_l1(scalar_tensor(0.5), scalar_tensor(0.0), 1.0).item<double>(), 0.125, 1e-12);
  EXPECT_NEAR(smooth_l1(scalar_tensor(2.0), scalar_tensor(0.0), 1.0).item<double>(), 1.5, 1e-12);
  EXPECT_THROW(smooth_l1(torch::zeros({2}), torch::zeros({3}), 1.0), ShapeError);
  EXPECT_THROW(smooth_l1(torch::zeros({2}), torch::zeros({2}), 0.0), std::invalid_argument);
}

TEST(SmoothL1, MatchesElementwiseDefinition) {
  torch::manual_seed(1);
  const auto x = torch::randn({5, 7}, torch::kDouble) * 2;
  const auto y = torch::randn({5, 7}, torch::kDouble) * 2;
  for (double beta : {0.3, 1.0, 2.5}) {
    double sum = 0;
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 7; ++j) {
        const double d = std::abs(x[i][j].item<double>() - y[i][j].item<double>());
        sum += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
      }
    EXPECT_NEAR(smooth_l1(x, y, beta).item<double>(), sum / 35.0, 1e-12);
    EXPECT_GE(smooth_l1(x, y, beta).item<double>(), 0.0);
  }
}

TEST(TotalLoss, Examples) {
  GroundTruthMaps gt(8, 8);
  gt.quality.fill(1.0f);
  gt.angle_cos.fill(1.0f);
  auto as_output = [](const GroundTruthMaps& m) {
    auto t = [](const Plane& p) {
      const std::vector<Plane> v{p};
      return planes_to_tensor(v).unsqueeze(0);
    };
    return NetworkOutput{t(m.quality), t(m.angle_sin), t(m.angle_cos), t(m.width)};
  };
  EXPECT_EQ(total_loss(as_output(gt), gt, 1.0).total, 0.0);

  GroundTruthMaps off = gt;
  off.quality.fill(0.5f);
  const auto b = total_loss(as_output(off), gt, 1.0);
  EXPECT_NEAR(b.total, 0.125, 1e-9);
  EXPECT_NEAR(b.quality_term, 0.125, 1e-9);
  EXPECT_EQ(b.angle_sin_term, 0.0);
  EXPECT_NEAR(b.total, b.quality_term + b.angle_sin_term + b.angle_cos_term + b.width_term, 1e-12);
}

TEST(TotalLoss, ComponentsSumAndNonNegative) {
  torch::manual_seed(2);
  for (int i = 0; i < 20; ++i) {
    const auto pred = NetworkOutput{torch::randn({2, 1, 8, 8}), torch::randn({2, 1, 8, 8}), torch::randn({2, 1, 8, 8}),
                                    torch::randn({2, 1, 8, 8})};
    const auto gt = torch::randn({2, 4, 8, 8});
    const auto v = total_loss(pred, gt, 1.0).values();
    EXPECT_GE(v.quality_term, 0);
    EXPECT_GE(v.width_term, 0);
    EXPECT_NEAR(v.total, v.quality_term + v.angle_sin_term + v.angle_cos_term + v.width_term, 1e-9 * v.total);
  }
  EXPECT_THROW(total_loss(NetworkOutput{}, torch::zeros({1, 3, 8, 8}), 1.0), ShapeError);
}

TEST(GradientCheck, TwoLayerToyNetworkBothBranches) {
  torch::manual_seed(3);
  auto l1 = torch::nn::Linear(torch::nn::LinearOptions(3, 6));
  auto l2 = torch::nn::Linear(torch::nn::LinearOptions(6, 2));
  l1->to(torch::kDouble);
  l2->to(torch::kDouble);
  const auto x = torch::randn({16, 3}, torch::kDouble);
  // Targets spread so residuals fall on both sides of beta.
  const auto y = torch::randn({16, 2}, torch::kDouble) * 1.5;
  const double beta = 1.0;
  auto loss_fn = [&]() {
    const auto pred = l2->forward(torch::tanh(l1->forward(x)));
    return LossEvaluation{smooth_l1(pred, y, beta), ((pred - y).abs() < beta)};
  };
  {
    torch::NoGradGuard g;
    const auto r = (l2->forward(torch::tanh(l1->forward(x))) - y).abs();
    ASSERT_GT((r < beta).sum().item<int>(), 0);
    ASSERT_GT((r >= beta).sum().item<int>(), 0);
  }
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (const auto& p : l1->named_parameters()) params.emplace_back("l1." + p.key(), p.value());
  for (const auto& p : l2->named_parameters()) params.emplace_back("l2." + p.key(), p.value());
  const auto report = gradient_check(loss_fn, params);
  EXPECT_LT(report.max_rel_error, 1e-4);
  EXPECT_EQ(report.checked + report.excluded, 6 * 3 + 6 + 2 * 6 + 2);
  EXPECT_GT(report.checked, 30);
  EXPECT_TRUE(report.zero_gradient.empty());
}

TEST(GradientCheck, LinearModelQuadraticBranch) {
  auto w = torch::tensor({0.3, -0.2}, torch::dtype(torch::kDouble).requires_grad(true));
  const auto x = torch::tensor({{1.0, 2.0}, {0.5, -1.0}, {-0.3, 0.2}}, torch::kDouble);
  const auto y = torch::tensor({0.1, 0.2, -0.1}, torch::kDouble);
  auto loss_fn = [&]() {
    const auto pred = torch::mv(x, w);
    return LossEvaluation{smooth_l1(pred, y, 1.0), (pred - y).abs() < 1.0};
  };
  const auto report = gradient_check(loss_fn, {{"w", w}});
  EXPECT_LT(report.max_rel_error, 1e-4);
  EXPECT_EQ(report.checked, 2);
}

TEST(GradientCheck, KinkExcludedAndDeadWeightFlagged) {
  // Residual exactly at beta: the finite difference straddles the kink.
  auto w = torch::tensor({1.0}, torch::dtype(torch::kDouble).requires_grad(true));
  auto dead = torch::tensor({0.7}, torch::dtype(torch::kDouble).requires_grad(true));
  const auto y = torch::tensor({0.0}, torch::kDouble);
  auto loss_fn = [&]() {
    const auto pred = w * 1.0 + dead * 0.0;
    return LossEvaluation{smooth_l1(pred, y, 1.0), (pred - y).abs() < 1.0};
  };
  const auto report = gradient_check(loss_fn, {{"w", w}, {"dead", dead}});
  EXPECT_EQ(report.excluded, 1);
  EXPECT_EQ(report.checked, 1);
  ASSERT_EQ(report.zero_gradient.size(), 1u);
  EXPECT_EQ(report.zero_gradient[0], "dead");
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.resolved_epochs(), 100);
  c.dataset = "jacquard";
  EXPECT_EQ(c.resolved_epochs(), 20);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.input_size = 100;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Trainer, DivergenceNamesBatch) {
  auto samples = synthetic_set(2, 32, 5);
  const std::vector<std::size_t> idx{0, 1};
  Batch b = make_batch(samples, idx, Modality::Depth, kDefaultWidthScale, std::nullopt);
  b.target[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
  Trainer t(build_network(tiny_network(1), 0), 1e-3, 1.0);
  const auto before = t.net()->parameters()[0].clone();
  try {
    t.step(b, "7:3");
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("7:3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("syn0"), std::string::npos);
  }
  EXPECT_TRUE(torch::equal(before, t.net()->parameters()[0]));
}

TEST(Trainer, BatchShapesAndAugmentationSeeds) {
  const auto samples = synthetic_set(3, 64, 9);
  const std::vector<std::size_t> idx{2, 0};
  const auto a = make_batch(samples, idx, Modality::RgbDepth, kDefaultWidthScale, 11);
  const auto b = make_batch(samples, idx, Modality::RgbDepth, kDefaultWidthScale, 11);
  EXPECT_EQ(a.input.sizes(), (std::vector<int64_t>{2, 4, 64, 64}));
  EXPECT_EQ(a.target.sizes(), (std::vector<int64_t>{2, 4, 64, 64}));
  EXPECT_TRUE(torch::equal(a.input, b.input));
  EXPECT_EQ(a.ids, (std::vector<std::string>{"syn2", "syn0"}));
}

TEST(Trainer, OverfitLossFallsNearlyMonotonically) {
  const auto samples = synthetic_set(8, 96, 21);
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  const Batch batch = make_batch(samples, idx, Modality::RgbDepth, kDefaultWidthScale, std::nullopt);
  Trainer t(build_network(tiny_network(4), 1), 1e-3, 1.0);
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(t.step(batch, std::to_string(i)).total);
  int rises = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) rises += losses[i] > losses[i - 1];
  EXPECT_LE(rises, 5) << "first " << losses.front() << " last " << losses.back();
  EXPECT_LT(losses.back(), losses.front());
}

TEST(Train, DeterministicFirstEpochAndArtifacts) {
  const auto samples = synthetic_set(6, 64, 31);
  TrainConfig cfg;
  cfg.modality = Modality::Depth;
  cfg.input_size = 64;
  cfg.batch_size = 3;
  cfg.epochs = 2;
  cfg.seed = 4;
  const auto dir = testkit::scratch_dir("train_run");
  const std::span<const GraspSample> all(samples);
  const auto r1 = train_on(all.subspan(0, 4), all.subspan(4), cfg, tiny_network(1), dir);
  const auto r2 = train_on(all.subspan(0, 4), all.subspan(4), cfg, tiny_network(1), {});
  ASSERT_EQ(r1.history.size(), 2u);
  EXPECT_NEAR(r1.history[0].loss.total, r2.history[0].loss.total, 1e-6 * r1.history[0].loss.total);
  EXPECT_EQ(r1.iterations, 4);
  for (const char* f : {"metrics.csv", "epoch_0.ckpt", "epoch_1.ckpt", "best.ckpt"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,loss_total,loss_q,loss_sin,loss_cos,loss_w,val_accuracy,seconds");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 2);
  EXPECT_EQ(read_checkpoint_config(dir / "best.ckpt"), tiny_network(1));

  cfg.max_iterations = 1;
  const auto capped = train_on(all.subspan(0, 4), all.subspan(4), cfg, tiny_network(1), {});
  EXPECT_EQ(capped.iterations, 1);
  EXPECT_THROW(train_on(all, {}, cfg, tiny_network(4), {}), ConfigError);
  fs::remove_all(dir);
}

TEST(Train, LoadsDatasetFromDisk) {
  const auto dir = testkit::scratch_dir("train_cornell");
  testkit::write_cornell_dataset(dir, 4, 2);
  TrainConfig cfg;
  cfg.dataset_root = dir;
  cfg.modality = Modality::Depth;
  cfg.input_size = 160;
  cfg.epochs = 1;
  cfg.train_fraction = 0.5;
  const auto r = train(cfg, tiny_network(1), {});
  EXPECT_EQ(r.history.size(), 1u);
  cfg.dataset_root.clear();
  EXPECT_THROW(train(cfg, tiny_network(1), {}), ConfigError);
  fs::remove_all(dir);
}
