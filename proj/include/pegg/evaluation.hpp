#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pegg/datasets.hpp"
#include "pegg/grasp_core.hpp"
#include "pegg/network.hpp"

namespace pegg {

struct DecodeOptions {
  double width_scale = kDefaultWidthScale;
  double smooth_sigma = 2.0;  // px; 0 disables smoothing
};

/// Turns raw head outputs for one batch element into grasp maps: sigmoid
/// then Gaussian smoothing on quality, angle planes copied, width clamped to [0, 1].
GraspMaps decode_maps(const NetworkOutput& raw, int batch_index = 0, const DecodeOptions& opts = {});

/// Up to k local maxima of the quality plane, quality descending, ties by
/// (row, col). A pixel qualifies when its quality is positive and no pixel in
/// its min_distance (Chebyshev) window is higher; accepted peaks are at least
/// min_distance apart.
std::vector<GraspImage> extract_grasps(const GraspMaps& maps, int k, int min_distance);

struct MetricThresholds {
  double iou = 0.25;
  double angle = deg2rad(30.0);
};

/// Rectangle metric. The prediction becomes a rectangle of height width/2.
/// Canvas size bounds the rasterized IoU; pass the image size.
bool evaluate_rectangle_metric(const GraspImage& pred, std::span<const GraspRectangle> gt, int rows, int cols,
                               const MetricThresholds& th = {});

struct GraspScore {
  bool correct = false;
  double iou_best = 0.0;          // best IoU over all ground-truth rectangles
  double angle_offset_deg = 90.0;  // offset to the rectangle giving iou_best
};

GraspScore score_grasp(const GraspImage& pred, std::span<const GraspRectangle> gt, int rows, int cols,
                       const MetricThresholds& th = {});

/// Network input for one sample, [1, C, H, W].
torch::Tensor input_tensor(const GraspSample& sample, Modality modality);

/// Input batch for several samples, [N, C, H, W].
torch::Tensor input_batch(std::span<const GraspSample> samples, std::span<const std::size_t> indices, Modality modality);

struct EvaluationReport {
  std::string dataset;
  std::string modality;
  int input_size = 0;
  int n_samples = 0;
  int n_correct = 0;
  double accuracy = 0.0;
  double mean_inference_ms = 0.0;  // network forward only

  nlohmann::json to_json() const;
};

struct SampleRecord {
  std::string id;
  bool correct = false;
  double iou_best = 0.0;
  double angle_offset_deg = 90.0;
  double ms = 0.0;  // network forward
};

/// Forward and full pipeline (input preparation, forward, decode, peak
/// extraction) timings, kept apart.
struct TimingReport {
  int n = 0;
  double mean_forward_ms = 0.0;
  double mean_end_to_end_ms = 0.0;

  nlohmann::json to_json() const;
};

struct BenchmarkOptions {
  std::string dataset = "cornell";
  Modality modality = Modality::RgbDepth;
  int input_size = 224;
  DecodeOptions decode;
  MetricThresholds thresholds;
};

struct BenchmarkResult {
  EvaluationReport report;
  std::vector<SampleRecord> samples;
  TimingReport timing;
};

/// Top-1 rectangle-metric accuracy. Samples larger than input_size are
/// center-cropped. Throws LoadError if the network's input channels do not
/// match the modality.
BenchmarkResult benchmark(PeggNet& net, std::span<const GraspSample> samples, const BenchmarkOptions& opts);

/// Same, loading the network from a checkpoint.
BenchmarkResult benchmark(const std::filesystem::path& checkpoint, std::span<const GraspSample> samples,
                          const BenchmarkOptions& opts);

/// Writes report.json, samples.csv and timing.json into `dir`.
void write_benchmark(const BenchmarkResult& result, const std::filesystem::path& dir);

/// Forward + decode for one sample.
GraspMaps predict_maps(PeggNet& net, const GraspSample& sample, Modality modality, const DecodeOptions& opts = {});

struct HeatmapFiles {
  std::filesystem::path quality;
  std::filesystem::path angle;
  std::filesystem::path width;
  std::filesystem::path overlay;
};

/// Writes color-mapped quality / angle / width PNGs and an overlay of the
/// grasp rectangles. Each plane is scaled by its own range, which is
/// recorded in the file name. `background` may be null (quality plane is
/// drawn in gray instead). Throws IoError when files cannot be written.
HeatmapFiles render_heatmaps(const GraspMaps& maps, std::span<const GraspImage> grasps, const RgbImage* background,
                             const std::filesystem::path& dir, const std::string& stem = "grasp");

/// Stored maps for `visualize`: an OpenCV FileStorage file (.yml, .json or
/// .yml.gz) holding the four planes and the width scale.
void save_maps(const GraspMaps& maps, const std::filesystem::path& path);
GraspMaps load_maps(const std::filesystem::path& path, double width_scale = kDefaultWidthScale);

}  // namespace pegg
