#include "pegg/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pegg/errors.hpp"
#include "pegg/log.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pegg::cli {
namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

void require_dataset_root(const AppConfig& cfg, Command c) {
  if (cfg.train.dataset_root.empty()) {
    throw ConfigError("missing --dataset-root (or GRASP_DATA_ROOT), required by " + to_string(c));
  }
}

void require_checkpoint(const AppConfig& cfg, Command c) {
  if (cfg.run.checkpoint.empty()) throw ConfigError("missing --checkpoint, required by " + to_string(c));
  if (!fs::is_regular_file(cfg.run.checkpoint)) {
    throw IoError("checkpoint file not found: " + cfg.run.checkpoint.string() + " (--checkpoint)");
  }
}

RgbImage read_rgb(const fs::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return RgbImage::from_mat(rgb);
}

// 16-bit images are millimeters; float images are meters.
Plane read_depth(const fs::path& path) {
  const cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH);
  if (raw.empty()) throw IoError("cannot read depth image " + path.string());
  if (raw.channels() != 1) throw InvalidSampleError("depth image must have one channel: " + path.string());
  cv::Mat meters;
  if (raw.depth() == CV_16U) {
    raw.convertTo(meters, CV_32F, 1e-3);
  } else if (raw.depth() == CV_32F || raw.depth() == CV_64F) {
    raw.convertTo(meters, CV_32F);
  } else {
    throw InvalidSampleError("depth image must be 16-bit (mm) or float (m): " + path.string());
  }
  return Plane::from_mat(meters);
}

std::vector<fs::path> scene_files(const fs::path& p) {
  if (fs::is_regular_file(p)) return {p};
  if (!fs::is_directory(p)) throw IoError("scenes not found: " + p.string() + " (--scenes)");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .json scene files in " + p.string());
  return files;
}

json grasps_json(const std::vector<GraspImage>& grasps) {
  json arr = json::array();
  for (const auto& g : grasps) {
    arr.push_back({{"u", g.u}, {"v", g.v}, {"angle", g.angle}, {"width", g.width}, {"quality", g.quality}});
  }
  return arr;
}

std::vector<GraspSample> eval_samples(const AppConfig& cfg) {
  auto all = load_dataset(cfg.train.dataset, cfg.train.dataset_root, cfg.train.input_size);
  if (cfg.eval.split == "all") return all;
  const auto idx = split(all, cfg.train.split_mode, cfg.train.train_fraction, cfg.train.seed);
  std::vector<GraspSample> val;
  for (auto i : idx.val) val.push_back(all[i]);
  return val;
}

void run_train(const AppConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto result = train(cfg.train, cfg.network, dir);
  out << "iterations: " << result.iterations << "\n"
      << "best epoch: " << result.best_epoch << "\n"
      << "best val accuracy: " << result.best_accuracy << "\n";
}

void run_eval(const AppConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto samples = eval_samples(cfg);
  BenchmarkOptions opts;
  opts.dataset = cfg.train.dataset;
  opts.modality = cfg.train.modality;
  opts.input_size = cfg.train.input_size;
  opts.decode = cfg.eval.decode;
  opts.thresholds = cfg.eval.thresholds;
  const auto result = benchmark(cfg.run.checkpoint, samples, opts);
  write_benchmark(result, dir);
  out << "accuracy: " << result.report.accuracy << " (" << result.report.n_correct << "/" << result.report.n_samples
      << ")\n"
      << "mean forward ms: " << result.timing.mean_forward_ms << "\n"
      << "mean end-to-end ms: " << result.timing.mean_end_to_end_ms << "\n";
}

void run_predict(const AppConfig& cfg, const fs::path& dir, std::ostream& out) {
  const Modality m = cfg.train.modality;
  const bool need_depth = m != Modality::Rgb, need_rgb = m != Modality::Depth;
  if (need_depth && cfg.run.depth.empty()) throw ConfigError("missing --depth, required by modality " + to_string(m));
  if (need_rgb && cfg.run.image.empty()) throw ConfigError("missing --image, required by modality " + to_string(m));

  GraspSample sample;
  sample.id = "predict";
  if (!cfg.run.image.empty()) sample.rgb = read_rgb(cfg.run.image);
  if (!cfg.run.depth.empty()) {
    sample.depth = read_depth(cfg.run.depth);
  } else {
    sample.depth = Plane(sample.rgb.rows(), sample.rgb.cols(), 1, 1.0f);
  }
  if (sample.rgb.rows() == 0) sample.rgb = RgbImage(sample.depth.rows(), sample.depth.cols(), 3);
  if (sample.rgb.rows() != sample.depth.rows() || sample.rgb.cols() != sample.depth.cols()) {
    throw ShapeError("image and depth sizes differ");
  }
  const int size = cfg.train.input_size;
  if (sample.rows() < size || sample.cols() < size) {
    throw ShapeError("input image is smaller than --input-size " + std::to_string(size));
  }
  sample = center_crop(sample, size);

  auto net = load_checkpoint(cfg.run.checkpoint);
  const auto maps = predict_maps(net, sample, m, cfg.eval.decode);
  const auto grasps = extract_grasps(maps, cfg.eval.top_k, cfg.eval.min_distance);
  const RgbImage* background = need_rgb ? &sample.rgb : nullptr;
  const auto files = render_heatmaps(maps, grasps, background, dir, "predict");
  save_maps(maps, dir / "maps.yml.gz");
  write_text(dir / "grasps.json", grasps_json(grasps).dump(2) + "\n");
  out << "grasps: " << grasps.size() << "\n"
      << "overlay: " << files.overlay.string() << "\n";
}

void run_simulate(const AppConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto files = scene_files(cfg.run.scenes);
  sim::Predictor predictor;
  if (cfg.sim.predictor == "model") {
    auto net = load_checkpoint(cfg.run.checkpoint);
    predictor = sim::model_predictor(net, cfg.train.modality, cfg.train.input_size, cfg.eval.decode);
  } else {
    predictor = sim::oracle_predictor(cfg.sim.oracle);
  }
  int successes = 0;
  json episodes = json::array();
  for (const auto& f : files) {
    const auto scene = sim::Scene::load(f);
    const auto result = sim::run_episode(scene, predictor, cfg.sim.sim);
    const std::string stem = f.stem().string();
    auto j = result.to_json();
    j["scene"] = f.filename().string();
    write_text(dir / (stem + ".json"), j.dump(2) + "\n");
    result.write_trajectory_csv(dir / (stem + "_trajectory.csv"));
    successes += result.success;
    episodes.push_back({{"scene", f.filename().string()},
                        {"success", result.success},
                        {"steps", result.steps},
                        {"final_position_error", result.final_position_error},
                        {"final_angle_error", result.final_angle_error}});
    out << stem << ": " << (result.success ? "success" : "failure") << " after " << result.steps << " steps\n";
  }
  const double rate = static_cast<double>(successes) / static_cast<double>(files.size());
  json summary = {{"n", files.size()}, {"successes", successes}, {"success_rate", rate}, {"episodes", episodes}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  out << "success rate: " << rate << "\n";
}

void run_visualize(const AppConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto maps = load_maps(cfg.run.maps, cfg.train.width_scale);
  RgbImage rgb;
  const RgbImage* background = nullptr;
  if (!cfg.run.image.empty()) {
    rgb = read_rgb(cfg.run.image);
    if (rgb.rows() != maps.rows() || rgb.cols() != maps.cols()) throw ShapeError("--image size differs from the maps");
    background = &rgb;
  }
  const auto grasps = extract_grasps(maps, cfg.eval.top_k, cfg.eval.min_distance);
  const auto files = render_heatmaps(maps, grasps, background, dir, "maps");
  out << "grasps: " << grasps.size() << "\n"
      << "overlay: " << files.overlay.string() << "\n";
}

// Checks that need no output directory, so failed runs leave nothing behind.
void preflight(Command c, const AppConfig& cfg) {
  switch (c) {
    case Command::Train:
      require_dataset_root(cfg, c);
      break;
    case Command::Eval:
      require_checkpoint(cfg, c);
      require_dataset_root(cfg, c);
      break;
    case Command::Predict:
      require_checkpoint(cfg, c);
      break;
    case Command::Simulate:
      if (cfg.run.scenes.empty()) throw ConfigError("missing --scenes, required by simulate");
      if (cfg.sim.predictor == "model") require_checkpoint(cfg, c);
      break;
    case Command::Visualize:
      if (cfg.run.maps.empty()) throw ConfigError("missing --maps, required by visualize");
      if (!fs::is_regular_file(cfg.run.maps)) throw IoError("maps file not found: " + cfg.run.maps.string() + " (--maps)");
      break;
  }
}

}  // namespace

Command parse_command(std::string_view s) {
  if (s == "train") return Command::Train;
  if (s == "eval") return Command::Eval;
  if (s == "predict") return Command::Predict;
  if (s == "simulate") return Command::Simulate;
  if (s == "visualize") return Command::Visualize;
  throw std::invalid_argument("unknown command: " + std::string(s));
}

std::string to_string(Command c) {
  switch (c) {
    case Command::Train: return "train";
    case Command::Eval: return "eval";
    case Command::Predict: return "predict";
    case Command::Simulate: return "simulate";
    case Command::Visualize: return "visualize";
  }
  return "?";
}

fs::path make_run_dir(const fs::path& out, Command c) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream name;
  name << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-" << to_string(c);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  fs::path dir = out / name.str();
  for (int n = 2; !fs::create_directory(dir, ec); ++n) {
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    dir = out / (name.str() + "-" + std::to_string(n));
  }
  return dir;
}

int dispatch(Command c, const AppConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    preflight(c, cfg);
    const fs::path dir = make_run_dir(cfg.run.out, c);
    write_text(dir / "config.yaml", cfg.to_yaml());
    out << "run directory: " << dir.string() << "\n";
    switch (c) {
      case Command::Train: run_train(cfg, dir, out); break;
      case Command::Eval: run_eval(cfg, dir, out); break;
      case Command::Predict: run_predict(cfg, dir, out); break;
      case Command::Simulate: run_simulate(cfg, dir, out); break;
      case Command::Visualize: run_visualize(cfg, dir, out); break;
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pixel-wise grasp detection: training, evaluation, prediction and servo simulation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  FlagOverrides flags;
  std::string dataset_root, modality, checkpoint, out_dir, predictor, scenes, image, depth, maps;
  int input_size = 0;
  std::uint64_t seed = 0;
  bool verbose = false;

  app.add_option("--config", config_path, "YAML config file");
  auto* o_root = app.add_option("--dataset-root", dataset_root, "Dataset directory (default: $GRASP_DATA_ROOT)");
  auto* o_mod = app.add_option("--modality", modality, "Input modality")->check(CLI::IsMember({"d", "rgb", "rgbd"}));
  auto* o_size = app.add_option("--input-size", input_size, "Network input size (px)");
  auto* o_ckpt = app.add_option("--checkpoint", checkpoint, "Checkpoint file");
  auto* o_out = app.add_option("--out", out_dir, "Parent directory for run directories");
  auto* o_seed = app.add_option("--seed", seed, "Random seed (training and simulation)");
  auto* o_pred = app.add_option("--predictor", predictor, "Simulation predictor")->check(CLI::IsMember({"oracle", "model"}));
  auto* o_scenes = app.add_option("--scenes", scenes, "Scene JSON file or directory");
  auto* o_image = app.add_option("--image", image, "RGB image");
  auto* o_depth = app.add_option("--depth", depth, "Depth image (16-bit mm or float m)");
  auto* o_maps = app.add_option("--maps", maps, "Stored grasp maps");
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  app.add_subcommand("train", "Train a network");
  app.add_subcommand("eval", "Rectangle-metric benchmark of a checkpoint");
  app.add_subcommand("predict", "Grasp maps and overlay for one image");
  app.add_subcommand("simulate", "Closed-loop servo episodes over scene files");
  app.add_subcommand("visualize", "Render stored grasp maps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  if (verbose) log::threshold() = log::Level::Debug;

  if (*o_root) flags.dataset_root = dataset_root;
  if (*o_mod) flags.modality = modality;
  if (*o_size) flags.input_size = input_size;
  if (*o_ckpt) flags.checkpoint = checkpoint;
  if (*o_out) flags.out = out_dir;
  if (*o_seed) flags.seed = seed;
  if (*o_pred) flags.predictor = predictor;
  if (*o_scenes) flags.scenes = scenes;
  if (*o_image) flags.image = image;
  if (*o_depth) flags.depth = depth;
  if (*o_maps) flags.maps = maps;

  const Command command = parse_command(app.get_subcommands().front()->get_name());
  AppConfig cfg;
  try {
    cfg = parse_config(config_path, flags);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return dispatch(command, cfg, out, err);
}

}  // namespace pegg::cli
