// Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
// non-zero if any criterion fails. Arguments select a subset, e.g.
// `acceptance 1 4 9`.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "oracles.hpp"
#include "pegg/datasets.hpp"
#include "pegg/evaluation.hpp"
#include "pegg/grasp_core.hpp"
#include "pegg/network.hpp"
#include "pegg/servo_sim.hpp"
#include "pegg/training.hpp"
#include "synthetic.hpp"

using namespace pegg;
namespace fs = std::filesystem;

namespace {

enum class Status { Pass, Fail, Skip };

struct Outcome {
  Status status = Status::Fail;
  std::string detail;
};

// Collects sub-checks; the criterion passes only if every one holds.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }

  Outcome outcome() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < notes_.size(); ++i) os << (i ? "; " : "") << notes_[i];
    if (!failures_.empty()) {
      os << (notes_.empty() ? "" : "; ") << "failed: ";
      for (std::size_t i = 0; i < failures_.size(); ++i) os << (i ? ", " : "") << failures_[i];
    }
    return {failures_.empty() ? Status::Pass : Status::Fail, os.str()};
  }

 private:
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

void progress(const std::string& s) { std::clog << "  .. " << s << std::endl; }

// ---------------------------------------------------------------------------

Outcome parameter_budget() {
  const auto net = build_network(NetworkConfig{});
  const auto n = count_parameters(*net);
  Checks c;
  c.note("count_parameters = " + std::to_string(n) + " (reference 1.38 M)");
  c.expect(n >= 1'300'000 && n <= 1'450'000, "count in [1.30 M, 1.45 M]");
  return c.outcome();
}

Outcome shape_contract() {
  Checks c;
  for (Modality m : {Modality::Depth, Modality::Rgb, Modality::RgbDepth}) {
    NetworkConfig cfg;
    cfg.input_channels = channel_count(m);
    auto net = build_network(cfg, 1);
    for (int size : {224, 304, 320, 480}) {
      const auto x = torch::randn({1, cfg.input_channels, size, size});
      const auto out = infer(net, x);
      bool ok = true;
      for (const auto& t : {out.quality, out.angle_sin, out.angle_cos, out.width}) {
        ok = ok && t.sizes() == torch::IntArrayRef({1, 1, size, size});
      }
      c.expect(ok, to_string(m) + "@" + std::to_string(size));
    }
  }
  c.note("modalities d/rgb/rgbd x sizes 224/304/320/480, 4 heads each");
  return c.outcome();
}

Outcome loss_correctness() {
  Checks c;
  auto one = [](double v) { return torch::tensor({v}, torch::kDouble); };
  const double l0 = smooth_l1(one(0.3), one(0.3), 1.0).item<double>();
  const double l1 = smooth_l1(one(0.5), one(0.0), 1.0).item<double>();
  const double l2 = smooth_l1(one(2.0), one(0.0), 1.0).item<double>();
  c.expect(std::abs(l0 - 0.0) <= 1e-9, "equal inputs -> 0");
  c.expect(std::abs(l1 - 0.125) <= 1e-9, "|d| = 0.5 -> 0.125");
  c.expect(std::abs(l2 - 1.5) <= 1e-9, "|d| = 2 -> 1.5");
  c.note("smooth_l1 = " + fmt(l0) + ", " + fmt(l1) + ", " + fmt(l2));

  // Toy convolutional network with the four-head loss, in double precision.
  torch::manual_seed(11);
  auto conv1 = torch::nn::Conv2d(torch::nn::Conv2dOptions(2, 4, 3).padding(1));
  auto conv2 = torch::nn::Conv2d(torch::nn::Conv2dOptions(4, 4, 3).padding(1));
  conv1->to(torch::kDouble);
  conv2->to(torch::kDouble);
  const auto x = torch::randn({2, 2, 6, 6}, torch::kDouble);
  const auto target = torch::randn({2, 4, 6, 6}, torch::kDouble) * 1.5;
  const double beta = 1.0;
  auto forward = [&]() {
    const auto y = conv2->forward(torch::tanh(conv1->forward(x)));
    NetworkOutput o;
    o.quality = y.narrow(1, 0, 1);
    o.angle_sin = y.narrow(1, 1, 1);
    o.angle_cos = y.narrow(1, 2, 1);
    o.width = y.narrow(1, 3, 1);
    return std::make_pair(o, y);
  };
  auto loss_fn = [&]() {
    const auto [o, y] = forward();
    return LossEvaluation{total_loss(o, target, beta).total, (y - target).abs() < beta};
  };
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (const auto& p : conv1->named_parameters()) params.emplace_back("conv1." + p.key(), p.value());
  for (const auto& p : conv2->named_parameters()) params.emplace_back("conv2." + p.key(), p.value());
  const auto report = gradient_check(loss_fn, params);
  c.note("gradient check max rel error " + fmt(report.max_rel_error, 3) + " over " + std::to_string(report.checked) +
         " entries (" + std::to_string(report.excluded) + " at the kink excluded)");
  c.expect(report.max_rel_error < 1e-4, "gradient check < 1e-4");
  c.expect(report.checked > 0, "entries checked");
  c.expect(report.zero_gradient.empty(), "no zero-gradient parameters");
  return c.outcome();
}

Outcome geometry_oracles() {
  Checks c;
  std::mt19937_64 rng(2024);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  double worst_iou = 0.0;
  for (int i = 0; i < 100; ++i) {
    const GraspRectangle a({uni(80, 176), uni(80, 176)}, uni(-kPi, kPi), uni(20, 80), uni(10, 40));
    const GraspRectangle b(a.center() + Vec2(uni(-20, 20), uni(-20, 20)), a.angle() + uni(-0.6, 0.6),
                           a.width() * uni(0.7, 1.3), a.height() * uni(0.7, 1.3));
    const double mc = testkit::monte_carlo_iou(a.corners(), b.corners(), 100000, 77 + i);
    worst_iou = std::max(worst_iou, std::abs(rect_iou(a, b) - mc));
  }
  c.note("rect_iou vs Monte-Carlo worst diff " + fmt(worst_iou, 3));
  c.expect(worst_iou <= 0.02, "rect_iou within 0.02");

  double worst_trip = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const GraspImage g{uni(0, 300), uni(0, 300), uni(-kPi / 2, kPi / 2), uni(1, 120), 1.0};
    const double h = uni(1, 60);
    const auto corners = rect_from_grasp(g, h).corners();
    const auto back = grasp_from_rect(corners);
    worst_trip = std::max({worst_trip, std::abs(back.center().x() - g.u), std::abs(back.center().y() - g.v),
                           std::abs(back.width() - g.width), std::abs(back.height() - h),
                           angle_offset(back.angle(), g.angle)});
  }
  c.note("round-trip worst error " + fmt(worst_trip, 3) + " px");
  c.expect(worst_trip <= 1e-6, "round trip within 1e-6");

  bool sym = true, mod_pi = true, antipodal = true, range = true;
  for (int i = 0; i < 1000; ++i) {
    const double a = uni(-10, 10), b = uni(-10, 10);
    const double d = angle_offset(a, b);
    sym = sym && d == angle_offset(b, a);
    mod_pi = mod_pi && std::abs(angle_offset(a + kPi, b) - d) < 1e-9 && std::abs(angle_offset(a, b - 3 * kPi) - d) < 1e-9;
    antipodal = antipodal && angle_offset(a, a + kPi) < 1e-9;
    range = range && d >= 0.0 && d <= kPi / 2 + 1e-12;
  }
  c.expect(sym, "angle_offset symmetric");
  c.expect(mod_pi, "angle_offset mod pi");
  c.expect(antipodal, "antipodal offset zero");
  c.expect(range, "offset in [0, pi/2]");
  return c.outcome();
}

Outcome rasterize_decode_closure() {
  Checks c;
  std::mt19937_64 rng(5);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  double worst_angle = 0.0, worst_width = 0.0;
  for (int i = 0; i < 100; ++i) {
    const GraspRectangle r({uni(60, 164), uni(60, 164)}, uni(-kPi / 2, kPi / 2), uni(15, 140), uni(8, 40));
    const auto maps = rasterize_labels(std::span(&r, 1), 224, 224);
    const auto g = extract_grasps(maps, 1, 1);
    if (g.empty()) {
      c.expect(false, "scene " + std::to_string(i) + " painted nothing");
      continue;
    }
    worst_angle = std::max(worst_angle, angle_offset(g[0].angle, r.angle()));
    worst_width = std::max(worst_width, std::abs(g[0].width - r.width()) / kDefaultWidthScale);
  }
  c.note("worst angle error " + fmt(worst_angle, 3) + " rad, worst width error " + fmt(worst_width, 3) +
         " (step " + fmt(1.0 / kDefaultWidthScale, 3) + ")");
  c.expect(worst_angle <= 1e-6, "angle within 1e-6");
  c.expect(worst_width <= 1.0 / kDefaultWidthScale, "width within one step");
  return c.outcome();
}

// Trains the default network on a fixed batch until the rectangle metric
// scores every sample or the iteration budget runs out.
struct ProbeResult {
  double accuracy = 0.0;
  int iterations = 0;
  double seconds = 0.0;
  double loss = 0.0;
};

ProbeResult overfit_probe(const std::vector<GraspSample>& samples, const std::string& dataset, int max_iterations) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  const Batch batch = make_batch(samples, idx, Modality::RgbDepth, kDefaultWidthScale, std::nullopt);
  Trainer trainer(build_network(NetworkConfig{}, 0), 1e-3, 1.0);
  BenchmarkOptions opts;
  opts.dataset = dataset;
  opts.input_size = samples.front().rows();
  ProbeResult r;
  for (int it = 1; it <= max_iterations; ++it) {
    r.loss = trainer.step(batch, std::to_string(it)).total;
    r.iterations = it;
    if (it % 10 == 0 || it == max_iterations) {
      r.accuracy = benchmark(trainer.net(), samples, opts).report.accuracy;
      progress(dataset + " probe iteration " + std::to_string(it) + ": loss " + fmt(r.loss) + ", accuracy " +
               fmt(r.accuracy));
      if (r.accuracy >= 1.0) break;
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

Outcome probe_outcome(const ProbeResult& r, Checks& c) {
  c.note("accuracy " + fmt(r.accuracy) + " after " + std::to_string(r.iterations) + " iterations (" +
         fmt(r.seconds, 3) + " s, loss " + fmt(r.loss) + ")");
  c.expect(r.accuracy >= 1.0, "100% within 500 iterations");
  return c.outcome();
}

Outcome cornell_overfit() {
  const auto dir = testkit::scratch_dir("acceptance_cornell");
  testkit::write_cornell_dataset(dir, 8, 6);
  const auto samples = load_cornell(dir, 224);
  fs::remove_all(dir);
  Checks c;
  c.expect(samples.size() == 8, "8 samples loaded");
  for (const auto& s : samples) c.expect(!s.rectangles.empty(), s.id + " has rectangles");
  if (samples.empty()) return c.outcome();
  return probe_outcome(overfit_probe(samples, "cornell", 500), c);
}

Outcome cornell_full_training() {
  const char* root = std::getenv("GRASP_DATA_ROOT");
  const char* long_run = std::getenv("PEGG_LONG_RUN");
  if (!root || !*root || !long_run || std::string(long_run) != "1") {
    return {Status::Skip, "long-running; set GRASP_DATA_ROOT to a Cornell copy and PEGG_LONG_RUN=1 (bar 85%, reference 98.9%)"};
  }
  TrainConfig cfg;
  cfg.dataset = "cornell";
  cfg.dataset_root = root;
  const auto out = fs::path("acceptance_cornell_run");
  const auto r = train(cfg, NetworkConfig{}, out);
  Checks c;
  c.note("best val accuracy " + fmt(r.best_accuracy) + " at epoch " + std::to_string(r.best_epoch) +
         " (reference 98.9%), artifacts in " + out.string());
  c.expect(r.best_accuracy >= 0.85, "val accuracy >= 85%");
  return c.outcome();
}

Outcome jacquard_probe_and_loader() {
  Checks c;
  const auto dir = testkit::scratch_dir("acceptance_jacquard");
  testkit::write_jacquard_dataset(dir / "probe", 8, 9);
  const auto probe = load_jacquard(dir / "probe", 224);
  c.expect(probe.size() == 8, "8 probe samples loaded");

  // Loader invariants on a 100-scene subset.
  testkit::write_jacquard_dataset(dir / "subset", 100, 10);
  const auto a = load_jacquard(dir / "subset", 224);
  const auto b = load_jacquard(dir / "subset", 224);
  fs::remove_all(dir);
  c.expect(a.size() == 100, "100 scenes loaded");
  bool same_order = a.size() == b.size();
  for (std::size_t i = 0; same_order && i < a.size(); ++i) same_order = a[i].id == b[i].id;
  c.expect(same_order, "two loads give identical ids in order");

  int bad_shape = 0, bad_depth = 0, no_rects = 0, bad_closure = 0, bad_warp = 0, warp_checked = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& s = a[i];
    bad_shape += s.rgb.rows() != 224 || s.rgb.cols() != 224 || s.rgb.channels() != 3 || s.rows() != 224 ||
                 s.cols() != 224;
    for (float d : s.depth.values()) {
      if (!std::isfinite(d) || d < 0.0f) {
        ++bad_depth;
        break;
      }
    }
    if (s.rectangles.empty()) {
      ++no_rects;
      continue;
    }
    const auto& r = s.rectangles.front();
    const auto g = extract_grasps(rasterize_labels(std::span(&r, 1), 224, 224), 1, 1);
    bad_closure += g.empty() || angle_offset(g[0].angle, r.angle()) > 1e-6 ||
                   std::abs(g[0].width - r.width()) / kDefaultWidthScale > 1.0 / kDefaultWidthScale;

    const auto p = sample_augmentation(1000 + i);
    const auto out = apply_augmentation(s, p);
    if (!out || out->rectangles.size() != s.rectangles.size()) continue;
    const auto m = testkit::label_warp_mismatch(rasterize_labels(s.rectangles, 224, 224).quality,
                                                rasterize_labels(out->rectangles, 224, 224).quality, p.zoom, p.jitter);
    ++warp_checked;
    bad_warp += m.painted == 0 || static_cast<double>(m.interior) / m.painted >= 0.02;
  }
  c.expect(bad_shape == 0, std::to_string(bad_shape) + " samples with wrong shape");
  c.expect(bad_depth == 0, std::to_string(bad_depth) + " samples with invalid depth");
  c.expect(no_rects == 0, std::to_string(no_rects) + " samples without rectangles");
  c.expect(bad_closure == 0, std::to_string(bad_closure) + " rasterize/decode mismatches");
  c.expect(bad_warp == 0, std::to_string(bad_warp) + " augmentation mismatches");
  c.note("loader invariants on " + std::to_string(a.size()) + " scenes (" + std::to_string(warp_checked) +
         " augmentation checks)");
  if (probe.empty()) return c.outcome();
  return probe_outcome(overfit_probe(probe, "jacquard", 500), c);
}

sim::SceneObject block(const std::string& id, Vec2 center, double yaw, Vec2 velocity = Vec2::Zero()) {
  sim::SceneObject o;
  o.id = id;
  o.center = center;
  o.yaw = yaw;
  o.velocity = velocity;
  return o;
}

Outcome simulator_oracle() {
  Checks c;
  const sim::SimConfig cfg;
  const auto oracle = sim::oracle_predictor();

  sim::Scene still;
  still.objects.push_back(block("a", {0.04, -0.03}, 0.5));
  const auto r1 = sim::run_episode(still, oracle, cfg);
  const double t1 = r1.steps * cfg.dt;
  c.note("static: " + std::string(r1.success ? "success" : "failure") + " at " + fmt(t1, 3) + " s, errors " +
         fmt(r1.final_position_error * 1000, 3) + " mm / " + fmt(rad2deg(r1.final_angle_error), 3) + " deg");
  c.expect(r1.success && t1 <= 5.0 + 1e-9, "static success within 5 s");

  sim::Scene drift;
  drift.objects.push_back(block("a", {-0.03, 0.01}, 1.0, {0.02, 0.0}));
  const auto r2 = sim::run_episode(drift, oracle, cfg);
  c.note("drifting: " + std::string(r2.success ? "success" : "failure") + ", lag " +
         fmt(r2.steady_state_lag * 1000, 3) + " mm");
  c.expect(r2.success, "drifting success");
  c.expect(r2.steady_state_lag < 0.01, "drifting lag < 1 cm");

  sim::Scene pair;
  pair.objects.push_back(block("left", {-0.05, 0.0}, 0.0, {0.01, 0.0}));
  pair.objects.push_back(block("right", {0.05, 0.0}, 0.0, {-0.01, 0.0}));
  const auto r3 = sim::run_episode(pair, oracle, cfg);
  std::set<std::string> tracked;
  for (const auto& p : r3.trajectory) {
    if (p.has_target) tracked.insert(p.tracked_object);
  }
  c.note("two objects: tracked " + std::to_string(tracked.size()) + " object(s)");
  c.expect(tracked.size() == 1, "no switch between equal objects");

  bool deterministic = true;
  for (const auto* s : {&still, &drift, &pair}) {
    deterministic = deterministic &&
                    sim::run_episode(*s, oracle, cfg).to_json().dump() == sim::run_episode(*s, oracle, cfg).to_json().dump();
  }
  c.expect(deterministic, "bit-identical reruns");
  return c.outcome();
}

Outcome tracking_selection() {
  Checks c;
  const std::vector<GraspImage> cands{{101, 101, 0, 10, 0.8}, {200, 200, 0, 10, 0.9}};
  const GraspImage prev{100, 100, 0, 10, 0.5};
  const auto near = sim::select_tracked_grasp(cands, prev);
  c.expect(near.u == 101 && near.v == 101, "closest to previous");
  const auto first = sim::select_tracked_grasp(cands, std::nullopt);
  c.expect(first.u == 200 && first.v == 200, "global max without previous");
  const std::vector<GraspImage> tie{{110, 100, 0, 10, 0.6}, {90, 100, 0, 10, 0.7}};
  c.expect(sim::select_tracked_grasp(tie, prev).u == 90, "equal distance -> higher quality");
  c.note("closest-to-previous, global-max start, quality tie-break");
  return c.outcome();
}

Outcome timing_report() {
  NetworkConfig cfg;
  auto net = build_network(cfg, 2);
  std::vector<GraspSample> samples;
  for (int i = 0; i < 5; ++i) samples.push_back(testkit::make_synthetic_sample(40 + i, 480, 480));
  BenchmarkOptions opts;
  opts.input_size = 480;
  benchmark(net, std::span(samples).first(1), opts);  // warm-up
  const auto r = benchmark(net, samples, opts);
  Checks c;
  c.note("480x480 RGB-D, n=" + std::to_string(r.timing.n) + ": forward " + fmt(r.timing.mean_forward_ms, 4) +
         " ms, end-to-end " + fmt(r.timing.mean_end_to_end_ms, 4) + " ms (reference 10 / 20 ms on an RTX 3080 GPU)");
  c.expect(r.timing.n == 5, "all samples timed");
  c.expect(r.timing.mean_forward_ms > 0.0, "forward time measured");
  c.expect(r.timing.mean_end_to_end_ms >= r.timing.mean_forward_ms, "end-to-end includes forward");
  c.expect(r.report.mean_inference_ms == r.timing.mean_forward_ms, "report carries forward-only time");
  return c.outcome();
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"parameter budget", parameter_budget},
      {"shape contract", shape_contract},
      {"loss correctness", loss_correctness},
      {"geometry oracles", geometry_oracles},
      {"rasterize/decode closure", rasterize_decode_closure},
      {"Cornell overfit probe", cornell_overfit},
      {"Cornell full training", cornell_full_training},
      {"Jacquard probe and loader invariants", jacquard_probe_and_loader},
      {"simulator with oracle predictor", simulator_oracle},
      {"tracking selection", tracking_selection},
      {"timing report", timing_report},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {Status::Fail, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Skip ? "SKIP" : "FAIL";
    failures += o.status == Status::Fail;
    std::cout << "CRITERION " << id << " " << tag << ": " << criteria[i].first << ": " << o.detail << " [" << fmt(s, 3)
              << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
