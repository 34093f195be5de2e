#include "pegg/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pegg/errors.hpp"

namespace fs = std::filesystem;

namespace pegg {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Plane plane_from(const torch::Tensor& raw, int batch_index) {
  return tensor_to_plane(raw[batch_index][0]);
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << v;
  return s.str();
}

}  // namespace

GraspMaps decode_maps(const NetworkOutput& raw, int batch_index, const DecodeOptions& opts) {
  GraspMaps maps;
  maps.width_scale = opts.width_scale;
  torch::NoGradGuard guard;
  maps.quality = plane_from(torch::sigmoid(raw.quality), batch_index);
  maps.angle_sin = plane_from(raw.angle_sin, batch_index);
  maps.angle_cos = plane_from(raw.angle_cos, batch_index);
  maps.width = plane_from(raw.width.clamp(0.0, 1.0), batch_index);
  if (opts.smooth_sigma > 0.0) {
    cv::Mat q = maps.quality.view();
    cv::GaussianBlur(q.clone(), q, cv::Size(0, 0), opts.smooth_sigma, opts.smooth_sigma, cv::BORDER_REPLICATE);
  }
  maps.validate();
  return maps;
}

std::vector<GraspImage> extract_grasps(const GraspMaps& maps, int k, int min_distance) {
  if (k < 1) throw std::invalid_argument("extract_grasps: k must be >= 1");
  if (min_distance < 1) throw std::invalid_argument("extract_grasps: min_distance must be >= 1");
  maps.validate();
  const int rows = maps.rows(), cols = maps.cols();
  if (rows == 0 || cols == 0) return {};

  cv::Mat window_max;
  const cv::Mat kernel = cv::Mat::ones(2 * min_distance + 1, 2 * min_distance + 1, CV_8U);
  cv::dilate(maps.quality.view(), window_max, kernel, cv::Point(-1, -1), 1, cv::BORDER_CONSTANT,
             cv::Scalar(-std::numeric_limits<float>::infinity()));

  struct Candidate {
    float q;
    int r, c;
  };
  std::vector<Candidate> candidates;
  for (int r = 0; r < rows; ++r) {
    const float* wm = window_max.ptr<float>(r);
    for (int c = 0; c < cols; ++c) {
      const float q = maps.quality(r, c);
      if (q > 0.0f && q >= wm[c]) candidates.push_back({q, r, c});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.q != b.q) return a.q > b.q;
    if (a.r != b.r) return a.r < b.r;
    return a.c < b.c;
  });

  std::vector<GraspImage> out;
  std::vector<std::pair<int, int>> taken;
  for (const auto& cand : candidates) {
    if (static_cast<int>(out.size()) == k) break;
    const bool clear = std::all_of(taken.begin(), taken.end(), [&](const auto& p) {
      return std::max(std::abs(p.first - cand.r), std::abs(p.second - cand.c)) >= min_distance;
    });
    if (!clear) continue;
    taken.emplace_back(cand.r, cand.c);
    out.push_back({static_cast<double>(cand.c), static_cast<double>(cand.r), maps.angle_at(cand.r, cand.c),
                   maps.width_px_at(cand.r, cand.c), static_cast<double>(cand.q)});
  }
  return out;
}

GraspScore score_grasp(const GraspImage& pred, std::span<const GraspRectangle> gt, int rows, int cols,
                       const MetricThresholds& th) {
  GraspScore s;
  if (gt.empty()) return s;
  const GraspRectangle p(Vec2(pred.u, pred.v), pred.angle, pred.width, pred.width / 2.0);
  for (const auto& g : gt) {
    const double iou = rect_iou(p, g, rows, cols);
    const double off = angle_offset(pred.angle, g.angle());
    if (iou > th.iou && off < th.angle) s.correct = true;
    if (iou > s.iou_best || (iou == s.iou_best && rad2deg(off) < s.angle_offset_deg)) {
      s.iou_best = iou;
      s.angle_offset_deg = rad2deg(off);
    }
  }
  return s;
}

bool evaluate_rectangle_metric(const GraspImage& pred, std::span<const GraspRectangle> gt, int rows, int cols,
                               const MetricThresholds& th) {
  return score_grasp(pred, gt, rows, cols, th).correct;
}

torch::Tensor input_tensor(const GraspSample& sample, Modality modality) {
  const auto planes = normalize_inputs(sample, modality);
  return planes_to_tensor(planes).unsqueeze(0);
}

torch::Tensor input_batch(std::span<const GraspSample> samples, std::span<const std::size_t> indices, Modality modality) {
  std::vector<torch::Tensor> parts;
  parts.reserve(indices.size());
  for (auto i : indices) parts.push_back(input_tensor(samples[i], modality));
  return torch::cat(parts, 0);
}

nlohmann::json EvaluationReport::to_json() const {
  return {{"dataset", dataset},       {"modality", modality}, {"input_size", input_size},
          {"n_samples", n_samples},   {"n_correct", n_correct}, {"accuracy", accuracy},
          {"mean_inference_ms", mean_inference_ms}};
}

nlohmann::json TimingReport::to_json() const {
  return {{"n", n}, {"mean_forward_ms", mean_forward_ms}, {"mean_end_to_end_ms", mean_end_to_end_ms}};
}

GraspMaps predict_maps(PeggNet& net, const GraspSample& sample, Modality modality, const DecodeOptions& opts) {
  return decode_maps(infer(net, input_tensor(sample, modality)), 0, opts);
}

BenchmarkResult benchmark(PeggNet& net, std::span<const GraspSample> samples, const BenchmarkOptions& opts) {
  if (net->config().input_channels != channel_count(opts.modality)) {
    throw LoadError("network expects " + std::to_string(net->config().input_channels) + " input channels but modality " +
                    to_string(opts.modality) + " provides " + std::to_string(channel_count(opts.modality)));
  }
  BenchmarkResult res;
  res.report.dataset = opts.dataset;
  res.report.modality = to_string(opts.modality);
  res.report.input_size = opts.input_size;

  double forward_total = 0.0, e2e_total = 0.0;
  for (const auto& original : samples) {
    const auto t0 = Clock::now();
    GraspSample cropped;
    const GraspSample* s = &original;
    if (original.rows() != opts.input_size || original.cols() != opts.input_size) {
      cropped = center_crop(original, opts.input_size);
      s = &cropped;
    }
    const auto x = input_tensor(*s, opts.modality);
    const auto tf = Clock::now();
    const auto raw = infer(net, x);
    const double forward_ms = ms_since(tf);
    const auto maps = decode_maps(raw, 0, opts.decode);
    const auto grasps = extract_grasps(maps, 1, 1);
    const double e2e_ms = ms_since(t0);

    SampleRecord rec;
    rec.id = s->id;
    rec.ms = forward_ms;
    if (!grasps.empty()) {
      const auto score = score_grasp(grasps.front(), s->rectangles, s->rows(), s->cols(), opts.thresholds);
      rec.correct = score.correct;
      rec.iou_best = score.iou_best;
      rec.angle_offset_deg = score.angle_offset_deg;
    }
    res.report.n_correct += rec.correct ? 1 : 0;
    res.samples.push_back(std::move(rec));
    forward_total += forward_ms;
    e2e_total += e2e_ms;
  }
  const int n = static_cast<int>(samples.size());
  res.report.n_samples = n;
  res.report.accuracy = n ? static_cast<double>(res.report.n_correct) / n : 0.0;
  res.report.mean_inference_ms = n ? forward_total / n : 0.0;
  res.timing.n = n;
  res.timing.mean_forward_ms = res.report.mean_inference_ms;
  res.timing.mean_end_to_end_ms = n ? e2e_total / n : 0.0;
  return res;
}

BenchmarkResult benchmark(const fs::path& checkpoint, std::span<const GraspSample> samples, const BenchmarkOptions& opts) {
  auto net = load_checkpoint(checkpoint);
  return benchmark(net, samples, opts);
}

void write_benchmark(const BenchmarkResult& result, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream report(dir / "report.json");
  std::ofstream csv(dir / "samples.csv");
  std::ofstream timing(dir / "timing.json");
  if (!report || !csv || !timing) throw IoError("cannot write benchmark files under " + dir.string());
  report << result.report.to_json().dump(2) << '\n';
  timing << result.timing.to_json().dump(2) << '\n';
  csv << "id,correct,iou_best,angle_offset_deg,ms\n";
  for (const auto& r : result.samples) {
    csv << r.id << ',' << (r.correct ? 1 : 0) << ',' << r.iou_best << ',' << r.angle_offset_deg << ',' << r.ms << '\n';
  }
}

HeatmapFiles render_heatmaps(const GraspMaps& maps, std::span<const GraspImage> grasps, const RgbImage* background,
                             const fs::path& dir, const std::string& stem) {
  maps.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);

  auto colorize = [&](const Plane& plane, const std::string& name) {
    double lo = 0.0, hi = 0.0;
    if (!plane.empty()) cv::minMaxLoc(plane.view(), &lo, &hi);
    cv::Mat gray;
    const double span = hi - lo;
    plane.view().convertTo(gray, CV_8U, span > 0 ? 255.0 / span : 0.0, span > 0 ? -lo * 255.0 / span : 0.0);
    cv::Mat color;
    cv::applyColorMap(gray, color, cv::COLORMAP_JET);
    const fs::path path = dir / (stem + "_" + name + "_min" + fmt(lo) + "_max" + fmt(hi) + ".png");
    if (!cv::imwrite(path.string(), color)) throw IoError("cannot write " + path.string());
    return path;
  };

  HeatmapFiles files;
  try {
    files.quality = colorize(maps.quality, "quality");
    files.angle = colorize(maps.angle_plane(), "angle");
    files.width = colorize(maps.width_px_plane(), "width");

    cv::Mat canvas;
    if (background && !background->empty()) {
      cv::cvtColor(background->view(), canvas, cv::COLOR_RGB2BGR);
    } else {
      cv::Mat gray;
      maps.quality.view().convertTo(gray, CV_8U, 255.0);
      cv::cvtColor(gray, canvas, cv::COLOR_GRAY2BGR);
    }
    for (const auto& g : grasps) {
      const GraspRectangle rect(Vec2(g.u, g.v), g.angle, g.width, g.width / 2.0);
      std::vector<cv::Point> pts;
      for (const auto& c : rect.corners()) pts.emplace_back(cvRound(c.x()), cvRound(c.y()));
      cv::polylines(canvas, pts, true, cv::Scalar(0, 255, 0), 1, cv::LINE_8);
    }
    files.overlay = dir / (stem + "_overlay.png");
    if (!cv::imwrite(files.overlay.string(), canvas)) throw IoError("cannot write " + files.overlay.string());
  } catch (const cv::Exception& e) {
    throw IoError(std::string("heatmap rendering failed: ") + e.what());
  }
  return files;
}

void save_maps(const GraspMaps& maps, const fs::path& path) {
  maps.validate();
  try {
    cv::FileStorage fs(path.string(), cv::FileStorage::WRITE);
    if (!fs.isOpened()) throw IoError("cannot write " + path.string());
    fs << "width_scale" << maps.width_scale;
    fs << "quality" << maps.quality.view() << "angle_sin" << maps.angle_sin.view() << "angle_cos"
       << maps.angle_cos.view() << "width" << maps.width.view();
  } catch (const cv::Exception& e) {
    throw IoError("cannot write " + path.string() + ": " + e.what());
  }
}

GraspMaps load_maps(const fs::path& path, double width_scale) {
  GraspMaps maps;
  try {
    cv::FileStorage fs(path.string(), cv::FileStorage::READ);
    if (!fs.isOpened()) throw IoError("cannot read " + path.string());
    maps.width_scale = fs["width_scale"].empty() ? width_scale : static_cast<double>(fs["width_scale"]);
    cv::Mat q, s, c, w;
    fs["quality"] >> q;
    fs["angle_sin"] >> s;
    fs["angle_cos"] >> c;
    fs["width"] >> w;
    if (q.empty() || s.empty() || c.empty() || w.empty()) throw IoError("missing planes in " + path.string());
    maps.quality = Plane::from_mat(q);
    maps.angle_sin = Plane::from_mat(s);
    maps.angle_cos = Plane::from_mat(c);
    maps.width = Plane::from_mat(w);
  } catch (const cv::Exception& e) {
    throw IoError("cannot read " + path.string() + ": " + e.what());
  }
  maps.validate();
  return maps;
}

}  // namespace pegg
