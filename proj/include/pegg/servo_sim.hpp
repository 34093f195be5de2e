#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pegg/datasets.hpp"
#include "pegg/evaluation.hpp"
#include "pegg/grasp_core.hpp"
#include "pegg/network.hpp"

namespace pegg::sim {

/// Extruded rectangular block resting on the table (world z = 0).
/// `half_extents.x()` runs along the block's yaw direction.
struct SceneObject {
  std::string id;
  Vec2 center = Vec2::Zero();
  double yaw = 0.0;
  Vec2 half_extents{0.04, 0.02};
  double height = 0.03;
  Vec2 velocity = Vec2::Zero();
  double angular_velocity = 0.0;

  /// Whether the point (x, y) lies on the block's footprint.
  bool covers(const Vec2& p) const;

  /// Direction (world angle) across the narrow side.
  double closing_angle() const;

  /// Full extent of the footprint measured along a direction.
  double extent_along(double angle) const;
};

struct Scene {
  std::vector<SceneObject> objects;
  double camera_height = 0.5;
  Vec2 bounds_min{-0.1, -0.1};
  Vec2 bounds_max{0.1, 0.1};

  /// Throws ConfigError on non-positive extents or objects outside the bounds.
  void validate() const;

  nlohmann::json to_json() const;
  static Scene from_json(const nlohmann::json& j);
  static Scene load(const std::filesystem::path& path);
};

/// Euler step. Object centers reflect off the workspace bounds.
Scene step_scene(const Scene& scene, double dt);

/// Depth image of the scene: table at camera depth, block tops at camera
/// depth minus block height.
Plane render_depth(const Scene& scene, const CameraModel& cam, int rows, int cols);

/// Flat-shaded color rendering matching render_depth, for RGB predictors
/// and overlays.
RgbImage render_rgb(const Scene& scene, const CameraModel& cam, int rows, int cols);

struct OracleOptions {
  double jaw_size = 0.02;  // m, rectangle height
};

/// Analytic grasp maps: one rectangle per object across its narrow side,
/// quality peaking at the grasp center and falling to 0.5 at the band edge.
GraspMaps oracle_predict(const Scene& scene, const CameraModel& cam, int rows, int cols,
                         const OracleOptions& opts = {}, double width_scale = kDefaultWidthScale);

/// Hysteresis tracking. Without a previous grasp the best candidate wins;
/// otherwise the nearest one (ties: higher quality, then row, then column).
/// Throws NoGraspError when `candidates` is empty.
GraspImage select_tracked_grasp(std::span<const GraspImage> candidates, const std::optional<GraspImage>& previous);

struct GripperState {
  Vec3 position{0.0, 0.0, 0.25};
  Vec3 orientation = Vec3::Zero();  // yaw, pitch, roll
  double finger_opening = 0.1;
  double opening_max = 0.1;
  double max_linear_speed = 0.25;   // m/s
  double max_angular_speed = 1.5;   // rad/s

  double yaw() const { return orientation.x(); }
};

struct VelocityCommand {
  Vec3 linear = Vec3::Zero();
  Vec3 angular = Vec3::Zero();
};

struct ControlGains {
  double linear = 2.0;
  double angular = 2.0;
};

/// Proportional position-based law. `feedforward` is added to the linear
/// term before clamping. The linear command is clamped by norm (so every
/// component stays within the limit); only the yaw rate is non-zero.
VelocityCommand pbvs_velocity(const GripperState& current, const GraspWorld& target, const ControlGains& gains,
                              const Vec3& feedforward = Vec3::Zero());

/// Applies a command for dt seconds.
GripperState integrate(const GripperState& g, const VelocityCommand& cmd, double dt);

/// What a predictor sees each tick. `scene` is privileged ground truth and
/// only the oracle reads it.
struct Observation {
  const Plane* depth = nullptr;
  const RgbImage* rgb = nullptr;
  const Scene* scene = nullptr;
  const CameraModel* camera = nullptr;
};

using Predictor = std::function<GraspMaps(const Observation&)>;

Predictor oracle_predictor(const OracleOptions& opts = {});

/// Wraps a trained network. Depth/RGB are center-cropped to the network
/// input size when larger; grasps are shifted back to full-image pixels.
Predictor model_predictor(PeggNet net, Modality modality, int input_size, const DecodeOptions& decode = {});

struct SimConfig {
  int image_rows = 320;
  int image_cols = 320;
  double fx = 640.0;
  double fy = 640.0;
  double dt = 1.0 / 50.0;
  double timeout = 15.0;  // s
  double position_tolerance = 0.002;
  double angle_tolerance = deg2rad(1.0);
  int k = 5;
  int min_distance = 10;
  ControlGains gains;
  GripperState gripper;
  double descend_radius = 0.02;      // planar error below which z descends
  double finger_clearance = 0.01;    // added to the predicted width
  double velocity_smoothing = 0.2;   // EMA weight of the target velocity estimate
  double depth_noise = 0.0;          // m, std of Gaussian depth noise
  std::uint64_t seed = 0;
  std::filesystem::path overlay_dir;  // empty = no overlay images
  int overlay_stride = 10;            // ticks between overlay images

  void validate() const;
  CameraModel camera(double height) const;
};

struct TrajectoryPoint {
  double time = 0.0;
  Vec3 position = Vec3::Zero();
  double yaw = 0.0;
  double finger_opening = 0.0;
  bool has_target = false;
  GraspImage tracked_image;
  GraspWorld tracked;
  std::string tracked_object;  // object under the tracked grasp, "" if none
};

struct EpisodeResult {
  bool success = false;
  int steps = 0;
  double final_position_error = 0.0;
  double final_angle_error = 0.0;
  double steady_state_lag = 0.0;  // mean planar error over the final 0.5 s
  std::vector<TrajectoryPoint> trajectory;

  nlohmann::json to_json() const;
  void write_trajectory_csv(const std::filesystem::path& path) const;
};

EpisodeResult run_episode(const Scene& scene, const Predictor& predictor, const SimConfig& cfg);

}  // namespace pegg::sim
