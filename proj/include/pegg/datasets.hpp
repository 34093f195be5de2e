#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "pegg/grasp_core.hpp"

namespace pegg {

/// One annotated image. `rgb` is stored in R, G, B order; `depth` is in
/// meters with 0 marking invalid pixels.
struct GraspSample {
  std::string id;
  RgbImage rgb;
  Plane depth;
  std::vector<GraspRectangle> rectangles;
  std::string object_id;

  int rows() const { return depth.rows(); }
  int cols() const { return depth.cols(); }
};

using GroundTruthMaps = GraspMaps;

enum class Modality { Depth, Rgb, RgbDepth };

int channel_count(Modality m);
Modality parse_modality(std::string_view s);  // "d", "rgb", "rgbd" (case-insensitive)
std::string to_string(Modality m);

enum class SplitMode { ImageWise, ObjectWise };

SplitMode parse_split_mode(std::string_view s);  // "image-wise" | "object-wise"
std::string to_string(SplitMode m);

// ---------------------------------------------------------------------------
// Annotation parsing

/// Reads a Cornell `cpos` file: every 4 lines of "u v" form one rectangle.
/// Rectangles with a non-finite or degenerate corner are skipped and counted
/// in `skipped`.
std::vector<GraspRectangle> parse_cornell_annotations(std::istream& in, int* skipped = nullptr);

/// Parses one Jacquard "u;v;theta_deg;opening;jaw" line.
/// Throws ParseError on malformed input.
GraspRectangle parse_jacquard_line(std::string_view line);

/// Rebuilds a depth plane from a Cornell ASCII point cloud using the stored
/// pixel index (row = index / cols). Values are the camera-axis z coordinate.
Plane depth_from_pcd(std::istream& in, int rows, int cols);

// ---------------------------------------------------------------------------
// Loaders

/// Loads `pcd####r.png` images with `pcd####cpos.txt` annotations under
/// `root` (recursively), center-cropped to crop_size x crop_size. Object ids
/// come from a `z.txt` index file when one exists.
std::vector<GraspSample> load_cornell(const std::filesystem::path& root, int crop_size);

/// Loads `<id>_RGB.png`, `<id>_perfect_depth.tiff`, `<id>_grasps.txt`
/// triples under `root`. Each image is center-cropped to a square and
/// resized to crop_size x crop_size.
std::vector<GraspSample> load_jacquard(const std::filesystem::path& root, int crop_size);

/// Pixel origin of a centered crop.
cv::Point center_crop_origin(int rows, int cols, int crop_size);

/// Crops a sample about its center and drops rectangles whose center leaves the crop.
GraspSample center_crop(const GraspSample& sample, int crop_size);

// ---------------------------------------------------------------------------
// Targets

/// Paints the central third (along the closing axis) of every rectangle:
/// quality 1, angle planes (sin 2a, cos 2a), width min(w / width_scale, 1).
/// Later rectangles overwrite earlier ones.
GroundTruthMaps rasterize_labels(std::span<const GraspRectangle> rects, int rows, int cols,
                                 double width_scale = kDefaultWidthScale);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  double zoom = 1.0;            // crop window side / image side, in [0.5, 1]
  Vec2 jitter = Vec2::Zero();   // window center offset, px

  bool identity() const { return zoom == 1.0 && jitter.isZero(); }
};

/// Draws zoom ~ U[0.5, 1] and jitter ~ U[-50, 50]^2 from the seed.
AugmentParams sample_augmentation(std::uint64_t seed);

/// 2x3 forward map from input pixels to augmented pixels.
cv::Matx23d augmentation_affine(const AugmentParams& p, int rows, int cols);

/// Applies one crop+zoom. Returns std::nullopt when no rectangle survives.
std::optional<GraspSample> apply_augmentation(const GraspSample& sample, const AugmentParams& p);

/// Seeded random crop+zoom; retries with derived seeds up to 10 times before
/// returning the sample unchanged.
GraspSample augment(const GraspSample& sample, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Network inputs

/// Fills invalid (0) depth pixels from the nearest valid pixel (breadth-first,
/// 4-connected). Throws InvalidSampleError when no pixel is valid.
Plane inpaint_depth(const Plane& depth);

/// Builds the C input planes: depth first (inpainted, mean-subtracted,
/// clamped to [-1, 1]) followed by R, G, B scaled to [-0.5, 0.5].
std::vector<Plane> normalize_inputs(const GraspSample& sample, Modality modality);

// ---------------------------------------------------------------------------
// Splits

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded train/val partition. Image-wise shuffles samples; object-wise
/// shuffles distinct object ids so no object lands in both sets.
SplitIndices split(std::span<const GraspSample> samples, SplitMode mode, double train_fraction, std::uint64_t seed);

}  // namespace pegg
