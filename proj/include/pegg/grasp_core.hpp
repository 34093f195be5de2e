#pragma once

#include <array>
#include <numbers>
#include <optional>
#include <span>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "pegg/grid.hpp"

namespace pegg {

inline constexpr double kPi = std::numbers::pi;

inline constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

/// Wraps an angle into [-pi/2, pi/2). A parallel-jaw grasp at `a` and
/// `a + pi` is the same grasp. Throws std::invalid_argument on non-finite input.
double wrap_angle(double a);

/// Unsigned angular distance between two grasp orientations under the
/// antipodal symmetry, in [0, pi/2].
double angle_offset(double a, double b);

/// Signed error `target - current` reduced to [-pi/2, pi/2).
double signed_angle_error(double target, double current);

/// Grasp in image coordinates. Angle is the closing direction, measured
/// counter-clockwise from the +u axis as seen on screen, i.e. the closing
/// vector is (cos a, -sin a) in (u, v).
struct GraspImage {
  double u = 0.0;
  double v = 0.0;
  double angle = 0.0;
  double width = 0.0;  // px
  double quality = 0.0;
};

struct GraspWorld {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double angle = 0.0;  // about world +z
  double width = 0.0;  // m
  double quality = 0.0;

  Vec3 position() const { return {x, y, z}; }
};

/// Oriented rectangle on the image plane. `width` runs along the closing
/// direction given by `angle`; `height` is the jaw size.
class GraspRectangle {
 public:
  GraspRectangle() = default;
  GraspRectangle(Vec2 center, double angle, double width, double height);

  const Vec2& center() const { return center_; }
  double angle() const { return angle_; }
  double width() const { return width_; }
  double height() const { return height_; }

  /// Zero-area rectangles are allowed (they rasterize to a 1-px strip).
  bool degenerate() const { return width_ <= 0.0 || height_ <= 0.0; }

  Vec2 closing_axis() const;
  Vec2 jaw_axis() const;

  /// Corners in positive-shoelace order; the first edge runs along the
  /// closing direction.
  std::array<Vec2, 4> corners() const;

  /// Half-open membership test in the rectangle frame. Extents below one
  /// pixel are widened to one pixel so degenerate rectangles stay visible.
  bool contains(double u, double v) const;

  /// Pixel bounds [r0, r1) x [c0, c1) covering the rectangle, clipped to a canvas.
  struct Bounds {
    int r0, r1, c0, c1;
  };
  Bounds pixel_bounds(int rows, int cols) const;

  GraspRectangle translated(const Vec2& offset) const;

 private:
  Vec2 center_ = Vec2::Zero();
  double angle_ = 0.0;
  double width_ = 0.0;
  double height_ = 0.0;
};

/// Rectangle realization of an image grasp with the given jaw size.
GraspRectangle rect_from_grasp(const GraspImage& g, double height);

/// Decodes a 4-corner annotation. The first edge is the closing edge.
/// Throws ParseError on non-finite, collinear, or non-rectangular input
/// (max corner deviation above `tolerance_px`).
GraspRectangle grasp_from_rect(std::span<const Vec2, 4> corners, double tolerance_px = 0.5);

/// Rasterized IoU on a rows x cols canvas. Pixels outside the canvas are
/// excluded from both rectangles. Returns 0 when the union is empty.
double rect_iou(const GraspRectangle& a, const GraspRectangle& b, int rows, int cols);

/// Rasterized IoU over the union bounding box (no clipping).
double rect_iou(const GraspRectangle& a, const GraspRectangle& b);

/// Calls fn(r, c) for every canvas pixel whose center lies in `rect`.
template <typename Fn>
void for_each_pixel(const GraspRectangle& rect, int rows, int cols, Fn&& fn) {
  const auto b = rect.pixel_bounds(rows, cols);
  for (int r = b.r0; r < b.r1; ++r) {
    for (int c = b.c0; c < b.c1; ++c) {
      if (rect.contains(c, r)) fn(r, c);
    }
  }
}

inline constexpr double kDefaultWidthScale = 150.0;

/// Per-pixel grasp planes. Angle is stored as (sin 2a, cos 2a) and width
/// normalized by `width_scale` px, so the planes double as regression targets.
struct GraspMaps {
  Plane quality;
  Plane angle_sin;
  Plane angle_cos;
  Plane width;
  double width_scale = kDefaultWidthScale;

  GraspMaps() = default;
  GraspMaps(int rows, int cols, double width_scale = kDefaultWidthScale);

  int rows() const { return quality.rows(); }
  int cols() const { return quality.cols(); }

  /// Throws ShapeError unless all four planes share one H x W shape.
  void validate() const;

  double angle_at(int r, int c) const;
  double width_px_at(int r, int c) const { return width(r, c) * width_scale; }

  Plane angle_plane() const;
  Plane width_px_plane() const;
};

/// Pinhole camera with its pose in the world frame.
struct CameraModel {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Eigen::Isometry3d pose_world_from_camera = Eigen::Isometry3d::Identity();

  /// Throws std::invalid_argument when focal lengths or the rotation are invalid.
  void validate() const;

  /// Rotation of the camera x-axis about world z.
  double yaw() const;

  /// Pixel coordinates and camera-frame depth of a world point.
  Vec3 project(const Vec3& world) const;

  /// Camera at `height` above the world origin looking straight down
  /// (+v on the image maps to -y in the world).
  static CameraModel looking_down(double height, double fx, double fy, double cx, double cy);
};

Vec3 image_to_camera(double u, double v, double depth, const CameraModel& cam);

/// Lifts an image grasp to the world frame using the depth at its pixel.
/// Width converts by similar triangles: width_m = width_px * depth / fx.
GraspWorld grasp_image_to_world(const GraspImage& g, double depth, const CameraModel& cam);

}  // namespace pegg
