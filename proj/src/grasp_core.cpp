#include "pegg/grasp_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "pegg/errors.hpp"

namespace pegg {

namespace {

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

double shoelace(std::span<const Vec2, 4> p) {
  double area = 0.0;
  for (int i = 0; i < 4; ++i) {
    const Vec2& a = p[i];
    const Vec2& b = p[(i + 1) % 4];
    area += a.x() * b.y() - b.x() * a.y();
  }
  return 0.5 * area;
}

}  // namespace

double wrap_angle(double a) {
  require_finite(a, "wrap_angle");
  double r = a - kPi * std::floor((a + kPi / 2) / kPi);
  if (r >= kPi / 2) r -= kPi;
  if (r < -kPi / 2) r += kPi;
  return r;
}

double angle_offset(double a, double b) {
  require_finite(a, "angle_offset");
  require_finite(b, "angle_offset");
  return std::abs(wrap_angle(a - b));
}

double signed_angle_error(double target, double current) { return wrap_angle(target - current); }

GraspRectangle::GraspRectangle(Vec2 center, double angle, double width, double height)
    : center_(std::move(center)), angle_(wrap_angle(angle)), width_(width), height_(height) {
  if (!center_.allFinite() || !std::isfinite(width) || !std::isfinite(height)) {
    throw std::invalid_argument("GraspRectangle: non-finite field");
  }
  if (width < 0.0 || height < 0.0) throw std::invalid_argument("GraspRectangle: negative extent");
}

Vec2 GraspRectangle::closing_axis() const { return {std::cos(angle_), -std::sin(angle_)}; }

Vec2 GraspRectangle::jaw_axis() const { return {std::sin(angle_), std::cos(angle_)}; }

std::array<Vec2, 4> GraspRectangle::corners() const {
  const Vec2 a = closing_axis() * (width_ / 2);
  const Vec2 b = jaw_axis() * (height_ / 2);
  return {center_ - a - b, center_ + a - b, center_ + a + b, center_ - a + b};
}

bool GraspRectangle::contains(double u, double v) const {
  const double du = u - center_.x();
  const double dv = v - center_.y();
  const double c = std::cos(angle_);
  const double s = std::sin(angle_);
  const double x = du * c - dv * s;
  const double y = du * s + dv * c;
  const double hw = std::max(width_ / 2, 0.5);
  const double hh = std::max(height_ / 2, 0.5);
  return x >= -hw && x < hw && y >= -hh && y < hh;
}

GraspRectangle::Bounds GraspRectangle::pixel_bounds(int rows, int cols) const {
  // Radius of the (possibly widened) rectangle plus one pixel of slack.
  const double hw = std::max(width_ / 2, 0.5);
  const double hh = std::max(height_ / 2, 0.5);
  const double extent_u = std::abs(std::cos(angle_)) * hw + std::abs(std::sin(angle_)) * hh + 1.0;
  const double extent_v = std::abs(std::sin(angle_)) * hw + std::abs(std::cos(angle_)) * hh + 1.0;
  auto clip = [](double x, int hi) { return static_cast<int>(std::clamp(x, 0.0, static_cast<double>(hi))); };
  Bounds b;
  b.c0 = clip(std::floor(center_.x() - extent_u), cols);
  b.c1 = clip(std::ceil(center_.x() + extent_u) + 1, cols);
  b.r0 = clip(std::floor(center_.y() - extent_v), rows);
  b.r1 = clip(std::ceil(center_.y() + extent_v) + 1, rows);
  return b;
}

GraspRectangle GraspRectangle::translated(const Vec2& offset) const {
  return GraspRectangle(center_ + offset, angle_, width_, height_);
}

GraspRectangle rect_from_grasp(const GraspImage& g, double height) {
  if (!(height > 0.0)) throw std::invalid_argument("rect_from_grasp: height must be > 0");
  return GraspRectangle({g.u, g.v}, g.angle, g.width, height);
}

GraspRectangle grasp_from_rect(std::span<const Vec2, 4> corners, double tolerance_px) {
  for (const auto& p : corners) {
    if (!p.allFinite()) throw ParseError("grasp_from_rect: non-finite corner");
  }
  std::array<Vec2, 4> p{corners[0], corners[1], corners[2], corners[3]};
  const double area = shoelace(p);
  const double scale = std::max({(p[1] - p[0]).squaredNorm(), (p[2] - p[1]).squaredNorm(), 1e-12});
  if (std::abs(area) <= 1e-9 * scale) throw ParseError("grasp_from_rect: degenerate (collinear) corners");
  if (area < 0) {
    // Keep the first edge as the closing edge, reverse traversal.
    p = {corners[1], corners[0], corners[3], corners[2]};
  }

  const Vec2 center = (p[0] + p[1] + p[2] + p[3]) / 4.0;
  const Vec2 edge = p[1] - p[0];
  const double angle = std::atan2(-edge.y(), edge.x());
  const double width = 0.5 * ((p[1] - p[0]).norm() + (p[2] - p[3]).norm());
  const double height = 0.5 * ((p[2] - p[1]).norm() + (p[3] - p[0]).norm());
  GraspRectangle rect(center, angle, width, height);

  double worst = 0.0;
  for (const auto& q : rect.corners()) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : p) best = std::min(best, (q - c).norm());
    worst = std::max(worst, best);
  }
  if (worst > tolerance_px) {
    throw ParseError("grasp_from_rect: corners deviate " + std::to_string(worst) + " px from a rectangle");
  }
  return rect;
}

double rect_iou(const GraspRectangle& a, const GraspRectangle& b, int rows, int cols) {
  const auto ba = a.pixel_bounds(rows, cols);
  const auto bb = b.pixel_bounds(rows, cols);
  const int r0 = std::min(ba.r0, bb.r0), r1 = std::max(ba.r1, bb.r1);
  const int c0 = std::min(ba.c0, bb.c0), c1 = std::max(ba.c1, bb.c1);
  long inter = 0, uni = 0;
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) {
      const bool in_a = a.contains(c, r);
      const bool in_b = b.contains(c, r);
      inter += (in_a && in_b);
      uni += (in_a || in_b);
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double rect_iou(const GraspRectangle& a, const GraspRectangle& b) {
  // Shift both into a canvas that covers their union.
  double umin = std::numeric_limits<double>::infinity(), vmin = umin;
  double umax = -umin, vmax = -umin;
  for (const auto* r : {&a, &b}) {
    for (const auto& c : r->corners()) {
      umin = std::min(umin, c.x());
      umax = std::max(umax, c.x());
      vmin = std::min(vmin, c.y());
      vmax = std::max(vmax, c.y());
    }
  }
  const Vec2 origin(std::floor(umin) - 2, std::floor(vmin) - 2);
  const int cols = static_cast<int>(std::ceil(umax - origin.x())) + 3;
  const int rows = static_cast<int>(std::ceil(vmax - origin.y())) + 3;
  return rect_iou(a.translated(-origin), b.translated(-origin), rows, cols);
}

GraspMaps::GraspMaps(int rows, int cols, double scale)
    : quality(rows, cols), angle_sin(rows, cols), angle_cos(rows, cols), width(rows, cols), width_scale(scale) {}

void GraspMaps::validate() const {
  if (!quality.same_shape(angle_sin) || !quality.same_shape(angle_cos) || !quality.same_shape(width) ||
      quality.channels() != 1) {
    throw ShapeError("GraspMaps: planes differ in shape");
  }
}

double GraspMaps::angle_at(int r, int c) const {
  return wrap_angle(0.5 * std::atan2(static_cast<double>(angle_sin(r, c)), static_cast<double>(angle_cos(r, c))));
}

Plane GraspMaps::angle_plane() const {
  Plane out(rows(), cols());
  for (int r = 0; r < rows(); ++r)
    for (int c = 0; c < cols(); ++c) out(r, c) = static_cast<float>(angle_at(r, c));
  return out;
}

Plane GraspMaps::width_px_plane() const {
  Plane out(rows(), cols());
  for (int r = 0; r < rows(); ++r)
    for (int c = 0; c < cols(); ++c) out(r, c) = static_cast<float>(width_px_at(r, c));
  return out;
}

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("CameraModel: focal lengths must be > 0");
  const Eigen::Matrix3d r = pose_world_from_camera.linear();
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).norm() > 1e-9 || std::abs(r.determinant() - 1.0) > 1e-9) {
    throw std::invalid_argument("CameraModel: rotation is not a proper rotation");
  }
}

double CameraModel::yaw() const {
  const Eigen::Matrix3d r = pose_world_from_camera.linear();
  return std::atan2(r(1, 0), r(0, 0));
}

Vec3 CameraModel::project(const Vec3& world) const {
  const Vec3 p = pose_world_from_camera.inverse() * world;
  return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy, p.z()};
}

CameraModel CameraModel::looking_down(double height, double fx, double fy, double cx, double cy) {
  CameraModel cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = cx;
  cam.cy = cy;
  cam.pose_world_from_camera = Eigen::Isometry3d::Identity();
  cam.pose_world_from_camera.linear() = Eigen::Vector3d(1.0, -1.0, -1.0).asDiagonal();
  cam.pose_world_from_camera.translation() = Vec3(0.0, 0.0, height);
  return cam;
}

Vec3 image_to_camera(double u, double v, double depth, const CameraModel& cam) {
  if (!std::isfinite(depth) || depth <= 0.0) throw InvalidDepthError("image_to_camera: depth must be finite and > 0");
  return {(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth};
}

GraspWorld grasp_image_to_world(const GraspImage& g, double depth, const CameraModel& cam) {
  const Vec3 p = cam.pose_world_from_camera * image_to_camera(g.u, g.v, depth, cam);
  GraspWorld w;
  w.x = p.x();
  w.y = p.y();
  w.z = p.z();
  w.angle = wrap_angle(g.angle + cam.yaw());
  w.width = g.width * depth / cam.fx;
  w.quality = g.quality;
  return w;
}

}  // namespace pegg
