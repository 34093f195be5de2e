#include "pegg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "pegg/errors.hpp"
#include "pegg/log.hpp"

namespace fs = std::filesystem;

namespace pegg {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<GraspSample> cropped_to(std::span<const GraspSample> samples, int size) {
  std::vector<GraspSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(s.rows() == size && s.cols() == size ? s : center_crop(s, size));
  }
  return out;
}

LossBreakdown& operator+=(LossBreakdown& a, const LossBreakdown& b) {
  a.total += b.total;
  a.quality_term += b.quality_term;
  a.angle_sin_term += b.angle_sin_term;
  a.angle_cos_term += b.angle_cos_term;
  a.width_term += b.width_term;
  return a;
}

LossBreakdown scaled(LossBreakdown a, double s) {
  a.total *= s;
  a.quality_term *= s;
  a.angle_sin_term *= s;
  a.angle_cos_term *= s;
  a.width_term *= s;
  return a;
}

}  // namespace

void TrainConfig::validate() const {
  if (dataset != "cornell" && dataset != "jacquard") throw ConfigError("train.dataset must be cornell or jacquard, got " + dataset);
  if (input_size <= 0 || input_size % 8 != 0) throw ConfigError("train.input_size must be a positive multiple of 8");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (!(beta > 0.0)) throw ConfigError("train.beta must be > 0");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train.train_fraction must be in (0, 1)");
  if (!(width_scale > 0.0)) throw ConfigError("train.width_scale must be > 0");
  if (max_iterations < 0) throw ConfigError("train.max_iterations must be >= 0");
}

int TrainConfig::resolved_epochs() const {
  if (epochs > 0) return epochs;
  return dataset == "jacquard" ? 20 : 100;
}

torch::Tensor smooth_l1(const torch::Tensor& x, const torch::Tensor& y, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be > 0");
  if (x.sizes() != y.sizes()) throw ShapeError("smooth_l1: shape mismatch");
  const auto d = (x - y).abs();
  const auto l = torch::where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta);
  return l.mean();
}

double smooth_l1(const Plane& x, const Plane& y, double beta) {
  if (!x.same_shape(y)) throw ShapeError("smooth_l1: shape mismatch");
  const std::vector<Plane> a{x}, b{y};
  return smooth_l1(planes_to_tensor(a).to(torch::kDouble), planes_to_tensor(b).to(torch::kDouble), beta).item<double>();
}

LossBreakdown LossTerms::values() const {
  LossBreakdown b;
  b.quality_term = quality.item<double>();
  b.angle_sin_term = angle_sin.item<double>();
  b.angle_cos_term = angle_cos.item<double>();
  b.width_term = width.item<double>();
  b.total = b.quality_term + b.angle_sin_term + b.angle_cos_term + b.width_term;
  return b;
}

LossTerms total_loss(const NetworkOutput& pred, const torch::Tensor& gt, double beta) {
  if (gt.dim() != 4 || gt.size(1) != 4) throw ShapeError("total_loss: target must be [N, 4, H, W]");
  LossTerms t;
  t.quality = smooth_l1(pred.quality, gt.slice(1, 0, 1), beta);
  t.angle_sin = smooth_l1(pred.angle_sin, gt.slice(1, 1, 2), beta);
  t.angle_cos = smooth_l1(pred.angle_cos, gt.slice(1, 2, 3), beta);
  t.width = smooth_l1(pred.width, gt.slice(1, 3, 4), beta);
  t.total = t.quality + t.angle_sin + t.angle_cos + t.width;
  return t;
}

LossBreakdown total_loss(const NetworkOutput& pred, const GroundTruthMaps& gt, double beta) {
  gt.validate();
  auto target = target_tensor(gt).unsqueeze(0);
  if (pred.quality.scalar_type() != target.scalar_type()) target = target.to(pred.quality.scalar_type());
  return total_loss(pred, target, beta).values();
}

torch::Tensor target_tensor(const GroundTruthMaps& gt) {
  gt.validate();
  const std::vector<Plane> planes{gt.quality, gt.angle_sin, gt.angle_cos, gt.width};
  return planes_to_tensor(planes);
}

Batch make_batch(std::span<const GraspSample> samples, std::span<const std::size_t> indices, Modality modality,
                 double width_scale, std::optional<std::uint64_t> augment_seed) {
  Batch b;
  std::vector<torch::Tensor> inputs, targets;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const GraspSample& original = samples[indices[k]];
    GraspSample augmented;
    const GraspSample* s = &original;
    if (augment_seed) {
      augmented = augment(original, mix(*augment_seed, k));
      s = &augmented;
    }
    inputs.push_back(input_tensor(*s, modality));
    targets.push_back(target_tensor(rasterize_labels(s->rectangles, s->rows(), s->cols(), width_scale)).unsqueeze(0));
    b.ids.push_back(s->id);
  }
  b.input = torch::cat(inputs, 0);
  b.target = torch::cat(targets, 0);
  return b;
}

Trainer::Trainer(PeggNet net, double learning_rate, double beta)
    : net_(std::move(net)),
      optimizer_(net_->parameters(), torch::optim::AdamOptions(learning_rate)),
      beta_(beta) {}

LossBreakdown Trainer::step(const Batch& batch, const std::string& batch_id) {
  net_->train();
  optimizer_.zero_grad();
  const auto out = net_->forward(batch.input);
  const auto terms = total_loss(out, batch.target, beta_);
  const auto values = terms.values();
  if (!std::isfinite(values.total)) {
    std::string ids;
    for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ",") + id;
    throw DivergenceError("non-finite loss at batch " + batch_id + " (samples: " + ids + ")");
  }
  terms.total.backward();
  optimizer_.step();
  return values;
}

std::vector<GraspSample> load_dataset(const std::string& name, const fs::path& root, int input_size) {
  if (root.empty()) throw ConfigError("no dataset root given (use --dataset-root or GRASP_DATA_ROOT)");
  if (name == "cornell") return load_cornell(root, input_size);
  if (name == "jacquard") return load_jacquard(root, input_size);
  throw ConfigError("unknown dataset: " + name);
}

TrainResult train_on(std::span<const GraspSample> train_samples, std::span<const GraspSample> val_samples,
                     const TrainConfig& cfg, const NetworkConfig& net_cfg, const fs::path& out_dir) {
  cfg.validate();
  net_cfg.validate();
  if (net_cfg.input_channels != channel_count(cfg.modality)) {
    throw ConfigError("network.input_channels (" + std::to_string(net_cfg.input_channels) + ") does not match modality " +
                      to_string(cfg.modality));
  }
  if (train_samples.empty()) throw ConfigError("training split is empty");

  const auto train_set = cropped_to(train_samples, cfg.input_size);
  const auto val_set = cropped_to(val_samples, cfg.input_size);

  Trainer trainer(build_network(net_cfg, cfg.seed), cfg.learning_rate, cfg.beta);
  TrainResult result;

  std::ofstream metrics;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const fs::path csv = out_dir / "metrics.csv";
    const bool fresh = !fs::exists(csv);
    metrics.open(csv, std::ios::app);
    if (!metrics) throw IoError("cannot write " + csv.string());
    if (fresh) metrics << "epoch,loss_total,loss_q,loss_sin,loss_cos,loss_w,val_accuracy,seconds\n";
  }

  BenchmarkOptions bench;
  bench.dataset = cfg.dataset;
  bench.modality = cfg.modality;
  bench.input_size = cfg.input_size;
  bench.decode.width_scale = cfg.width_scale;

  const int epochs = cfg.resolved_epochs();
  const auto n = train_set.size();
  bool capped = false;
  for (int epoch = 0; epoch < epochs && !capped; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    LossBreakdown sum;
    int batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      if (cfg.max_iterations > 0 && result.iterations >= cfg.max_iterations) {
        capped = true;
        break;
      }
      const auto end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      std::optional<std::uint64_t> aug;
      if (cfg.augment) aug = mix(mix(cfg.seed, static_cast<std::uint64_t>(epoch)), start);
      const Batch batch = make_batch(train_set, idx, cfg.modality, cfg.width_scale, aug);
      sum += trainer.step(batch, std::to_string(epoch) + ":" + std::to_string(start / cfg.batch_size));
      ++batches;
      ++result.iterations;
    }
    if (batches == 0) break;

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = scaled(sum, 1.0 / batches);
    if (!val_set.empty()) {
      m.val_accuracy = benchmark(trainer.net(), val_set, bench).report.accuracy;
    } else {
      log::warn("validation split is empty; reporting accuracy 0");
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(m);
    log::info("epoch " + std::to_string(epoch) + " loss " + std::to_string(m.loss.total) + " val_acc " +
              std::to_string(m.val_accuracy));

    const bool best = m.val_accuracy > result.best_accuracy;
    if (best) {
      result.best_accuracy = m.val_accuracy;
      result.best_epoch = epoch;
    }
    if (metrics.is_open()) {
      metrics << epoch << ',' << m.loss.total << ',' << m.loss.quality_term << ',' << m.loss.angle_sin_term << ','
              << m.loss.angle_cos_term << ',' << m.loss.width_term << ',' << m.val_accuracy << ',' << m.seconds << '\n';
      metrics.flush();
      save_checkpoint(trainer.net(), out_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"));
      if (best) save_checkpoint(trainer.net(), out_dir / "best.ckpt");
    }
  }
  result.net = trainer.net();
  return result;
}

TrainResult train(const TrainConfig& cfg, const NetworkConfig& net_cfg, const fs::path& out_dir) {
  cfg.validate();
  const auto samples = load_dataset(cfg.dataset, cfg.dataset_root, cfg.input_size);
  if (samples.empty()) throw IoError("no samples found under " + cfg.dataset_root.string());
  const auto parts = split(samples, cfg.split_mode, cfg.train_fraction, cfg.seed);
  std::vector<GraspSample> tr, va;
  for (auto i : parts.train) tr.push_back(samples[i]);
  for (auto i : parts.val) va.push_back(samples[i]);
  log::info("training on " + std::to_string(tr.size()) + " samples, validating on " + std::to_string(va.size()));
  return train_on(tr, va, cfg, net_cfg, out_dir);
}

GradientCheckReport gradient_check(const LossFunction& loss_fn,
                                   const std::vector<std::pair<std::string, torch::Tensor>>& params,
                                   const GradientCheckOptions& opts) {
  GradientCheckReport report;
  for (const auto& [name, p] : params) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
  const LossEvaluation base = loss_fn();
  base.loss.backward();

  std::mt19937_64 rng(opts.seed);
  torch::NoGradGuard guard;
  for (const auto& [name, p] : params) {
    const auto grad = p.grad().defined() ? p.grad().detach().clone().reshape({-1}) : torch::zeros({p.numel()}, p.options());
    if (grad.abs().max().item<double>() == 0.0) report.zero_gradient.push_back(name);

    auto flat = p.detach().view({-1});
    std::vector<std::int64_t> entries(static_cast<std::size_t>(p.numel()));
    std::iota(entries.begin(), entries.end(), 0);
    if (opts.max_entries_per_param > 0 && static_cast<int>(entries.size()) > opts.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(static_cast<std::size_t>(opts.max_entries_per_param));
    }
    for (auto i : entries) {
      const double orig = flat[i].item<double>();
      flat[i].fill_(orig + opts.epsilon);
      const LossEvaluation plus = loss_fn();
      flat[i].fill_(orig - opts.epsilon);
      const LossEvaluation minus = loss_fn();
      flat[i].fill_(orig);
      if (base.branch.defined() &&
          (!torch::equal(plus.branch, base.branch) || !torch::equal(minus.branch, base.branch))) {
        ++report.excluded;
        continue;
      }
      const double numeric = (plus.loss.item<double>() - minus.loss.item<double>()) / (2.0 * opts.epsilon);
      const double analytic = grad[i].item<double>();
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(numeric - analytic) / denom);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace pegg
