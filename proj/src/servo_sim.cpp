#include "pegg/servo_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pegg/errors.hpp"

namespace fs = std::filesystem;

namespace pegg::sim {

namespace {

using nlohmann::json;

Vec2 vec2_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw ConfigError("scene: " + key + " must be a [x, y] number pair");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

double number_from(const json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError("scene: " + key + " must be a number");
  return j.get<double>();
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown key: " + where + k);
  }
}

// Camera ray through a pixel center, in world coordinates. The camera-frame
// direction has unit z so the hit parameter equals camera depth.
Vec3 ray_direction(const CameraModel& cam, double u, double v) {
  const Vec3 dc((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
  return cam.pose_world_from_camera.linear() * dc;
}

const std::array<cv::Vec3b, 6> kPalette{cv::Vec3b(200, 60, 40),  cv::Vec3b(40, 160, 60),  cv::Vec3b(50, 80, 200),
                                        cv::Vec3b(200, 170, 40), cv::Vec3b(150, 60, 170), cv::Vec3b(40, 170, 170)};

}  // namespace

bool SceneObject::covers(const Vec2& p) const {
  const Vec2 d = p - center;
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double along = c * d.x() + s * d.y();
  const double across = -s * d.x() + c * d.y();
  return std::abs(along) <= half_extents.x() && std::abs(across) <= half_extents.y();
}

double SceneObject::closing_angle() const {
  return wrap_angle(half_extents.x() <= half_extents.y() ? yaw : yaw + kPi / 2);
}

double SceneObject::extent_along(double angle) const {
  const double d = angle - yaw;
  return 2.0 * (half_extents.x() * std::abs(std::cos(d)) + half_extents.y() * std::abs(std::sin(d)));
}

void Scene::validate() const {
  if (!(camera_height > 0.0)) throw ConfigError("scene: camera_height must be > 0");
  if (!(bounds_min.x() < bounds_max.x() && bounds_min.y() < bounds_max.y())) throw ConfigError("scene: empty bounds");
  std::set<std::string> ids;
  for (const auto& o : objects) {
    if (!(o.half_extents.x() > 0.0 && o.half_extents.y() > 0.0)) throw ConfigError("scene: object " + o.id + " has non-positive extents");
    if (!(o.height > 0.0 && o.height < camera_height)) throw ConfigError("scene: object " + o.id + " height out of range");
    if (o.center.x() < bounds_min.x() || o.center.x() > bounds_max.x() || o.center.y() < bounds_min.y() ||
        o.center.y() > bounds_max.y()) {
      throw ConfigError("scene: object " + o.id + " starts outside the workspace");
    }
    if (!ids.insert(o.id).second) throw ConfigError("scene: duplicate object id " + o.id);
  }
}

json Scene::to_json() const {
  json objs = json::array();
  for (const auto& o : objects) {
    objs.push_back({{"id", o.id},
                    {"center", {o.center.x(), o.center.y()}},
                    {"yaw", o.yaw},
                    {"half_extents", {o.half_extents.x(), o.half_extents.y()}},
                    {"height", o.height},
                    {"velocity", {o.velocity.x(), o.velocity.y()}},
                    {"angular_velocity", o.angular_velocity}});
  }
  return {{"camera_height", camera_height},
          {"bounds", {{"min", {bounds_min.x(), bounds_min.y()}}, {"max", {bounds_max.x(), bounds_max.y()}}}},
          {"objects", objs}};
}

Scene Scene::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("scene: top level must be an object");
  reject_unknown(j, {"camera_height", "bounds", "objects"}, "");
  Scene s;
  if (j.contains("camera_height")) s.camera_height = number_from(j["camera_height"], "camera_height");
  if (j.contains("bounds")) {
    const auto& b = j["bounds"];
    reject_unknown(b, {"min", "max"}, "bounds.");
    if (b.contains("min")) s.bounds_min = vec2_from(b["min"], "bounds.min");
    if (b.contains("max")) s.bounds_max = vec2_from(b["max"], "bounds.max");
  }
  if (j.contains("objects")) {
    if (!j["objects"].is_array()) throw ConfigError("scene: objects must be an array");
    int index = 0;
    for (const auto& jo : j["objects"]) {
      const std::string where = "objects[" + std::to_string(index) + "].";
      reject_unknown(jo, {"id", "center", "yaw", "half_extents", "height", "velocity", "angular_velocity"}, where);
      SceneObject o;
      o.id = jo.contains("id") ? jo["id"].get<std::string>() : "obj" + std::to_string(index);
      if (!jo.contains("center")) throw ConfigError("scene: " + where + "center is required");
      o.center = vec2_from(jo["center"], where + "center");
      if (jo.contains("yaw")) o.yaw = number_from(jo["yaw"], where + "yaw");
      if (jo.contains("half_extents")) o.half_extents = vec2_from(jo["half_extents"], where + "half_extents");
      if (jo.contains("height")) o.height = number_from(jo["height"], where + "height");
      if (jo.contains("velocity")) o.velocity = vec2_from(jo["velocity"], where + "velocity");
      if (jo.contains("angular_velocity")) o.angular_velocity = number_from(jo["angular_velocity"], where + "angular_velocity");
      s.objects.push_back(o);
      ++index;
    }
  }
  s.validate();
  return s;
}

Scene Scene::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read scene file " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError("scene " + path.string() + ": " + e.what());
  }
}

Scene step_scene(const Scene& scene, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("step_scene: dt must be > 0");
  Scene next = scene;
  for (auto& o : next.objects) {
    o.center += o.velocity * dt;
    o.yaw += o.angular_velocity * dt;
    for (int axis = 0; axis < 2; ++axis) {
      const double lo = scene.bounds_min[axis], hi = scene.bounds_max[axis];
      if (o.center[axis] < lo) {
        o.center[axis] = 2 * lo - o.center[axis];
        o.velocity[axis] = -o.velocity[axis];
      } else if (o.center[axis] > hi) {
        o.center[axis] = 2 * hi - o.center[axis];
        o.velocity[axis] = -o.velocity[axis];
      }
    }
  }
  return next;
}

namespace {

// Index of the object hit first along the pixel ray (-1 = table), with its depth.
std::pair<int, double> cast(const Scene& scene, const CameraModel& cam, int r, int c) {
  const Vec3 o = cam.pose_world_from_camera.translation();
  const Vec3 d = ray_direction(cam, c, r);
  double best = std::numeric_limits<double>::infinity();
  int hit = -1;
  if (d.z() < 0.0) best = -o.z() / d.z();
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& obj = scene.objects[i];
    if (d.z() >= 0.0) continue;
    const double s = (obj.height - o.z()) / d.z();
    if (s <= 0.0 || s >= best) continue;
    const Vec3 p = o + s * d;
    if (obj.covers(p.head<2>())) {
      best = s;
      hit = static_cast<int>(i);
    }
  }
  return {hit, best};
}

}  // namespace

Plane render_depth(const Scene& scene, const CameraModel& cam, int rows, int cols) {
  Plane depth(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const auto [hit, s] = cast(scene, cam, r, c);
      depth(r, c) = std::isfinite(s) ? static_cast<float>(s) : 0.0f;
    }
  }
  return depth;
}

RgbImage render_rgb(const Scene& scene, const CameraModel& cam, int rows, int cols) {
  RgbImage rgb(rows, cols, 3);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const auto [hit, s] = cast(scene, cam, r, c);
      const cv::Vec3b color = hit < 0 ? cv::Vec3b(150, 150, 150) : kPalette[static_cast<std::size_t>(hit) % kPalette.size()];
      for (int ch = 0; ch < 3; ++ch) rgb(r, c, ch) = color[ch];
    }
  }
  return rgb;
}

GraspMaps oracle_predict(const Scene& scene, const CameraModel& cam, int rows, int cols, const OracleOptions& opts,
                         double width_scale) {
  GraspMaps maps(rows, cols, width_scale);
  for (const auto& obj : scene.objects) {
    const Vec3 top(obj.center.x(), obj.center.y(), obj.height);
    const Vec3 uvd = cam.project(top);
    if (!(uvd.z() > 0.0)) continue;
    const double angle = wrap_angle(obj.closing_angle() - cam.yaw());
    const double width_px = 2.0 * std::min(obj.half_extents.x(), obj.half_extents.y()) * cam.fx / uvd.z();
    const double jaw_px = opts.jaw_size * cam.fx / uvd.z();
    const GraspRectangle band(uvd.head<2>(), angle, width_px / 3.0, jaw_px);
    const double radius = std::max(band.width(), band.height()) / 2.0;
    const auto s = static_cast<float>(std::sin(2 * angle));
    const auto c = static_cast<float>(std::cos(2 * angle));
    const auto w = static_cast<float>(std::min(width_px / width_scale, 1.0));
    for_each_pixel(band, rows, cols, [&](int r, int col) {
      const double d = std::hypot(col - uvd.x(), r - uvd.y());
      const auto q = static_cast<float>(1.0 - 0.5 * std::min(1.0, d / std::max(radius, 1e-9)));
      if (q <= maps.quality(r, col)) return;
      maps.quality(r, col) = q;
      maps.angle_sin(r, col) = s;
      maps.angle_cos(r, col) = c;
      maps.width(r, col) = w;
    });
  }
  return maps;
}

GraspImage select_tracked_grasp(std::span<const GraspImage> candidates, const std::optional<GraspImage>& previous) {
  if (candidates.empty()) throw NoGraspError("no grasp candidates this tick");
  auto lex_less = [](const GraspImage& a, const GraspImage& b) {
    if (a.v != b.v) return a.v < b.v;
    return a.u < b.u;
  };
  const GraspImage* best = &candidates.front();
  if (!previous) {
    for (const auto& c : candidates) {
      if (c.quality > best->quality || (c.quality == best->quality && lex_less(c, *best))) best = &c;
    }
    return *best;
  }
  auto dist = [&](const GraspImage& g) { return std::hypot(g.u - previous->u, g.v - previous->v); };
  for (const auto& c : candidates) {
    const double dc = dist(c), db = dist(*best);
    if (dc < db || (dc == db && (c.quality > best->quality || (c.quality == best->quality && lex_less(c, *best))))) {
      best = &c;
    }
  }
  return *best;
}

VelocityCommand pbvs_velocity(const GripperState& current, const GraspWorld& target, const ControlGains& gains,
                              const Vec3& feedforward) {
  if (!(gains.linear > 0.0 && gains.angular > 0.0)) throw std::invalid_argument("pbvs_velocity: gains must be > 0");
  VelocityCommand cmd;
  cmd.linear = gains.linear * (target.position() - current.position) + feedforward;
  const double n = cmd.linear.norm();
  if (n > current.max_linear_speed) cmd.linear *= current.max_linear_speed / n;
  const double wz = gains.angular * signed_angle_error(target.angle, current.yaw());
  cmd.angular.z() = std::clamp(wz, -current.max_angular_speed, current.max_angular_speed);
  return cmd;
}

GripperState integrate(const GripperState& g, const VelocityCommand& cmd, double dt) {
  GripperState next = g;
  next.position += cmd.linear * dt;
  next.orientation.x() = wrap_angle(g.orientation.x() + cmd.angular.z() * dt);
  next.orientation.y() += cmd.angular.y() * dt;
  next.orientation.z() += cmd.angular.x() * dt;
  return next;
}

Predictor oracle_predictor(const OracleOptions& opts) {
  return [opts](const Observation& obs) {
    if (!obs.scene || !obs.camera || !obs.depth) throw std::invalid_argument("oracle predictor needs the scene");
    return oracle_predict(*obs.scene, *obs.camera, obs.depth->rows(), obs.depth->cols(), opts);
  };
}

Predictor model_predictor(PeggNet net, Modality modality, int input_size, const DecodeOptions& decode) {
  if (net->config().input_channels != channel_count(modality)) {
    throw LoadError("checkpoint expects " + std::to_string(net->config().input_channels) + " channels, modality " +
                    to_string(modality) + " gives " + std::to_string(channel_count(modality)));
  }
  return [net, modality, input_size, decode](const Observation& obs) mutable {
    if (!obs.depth || !obs.rgb) throw std::invalid_argument("model predictor needs depth and rgb");
    GraspSample s;
    s.depth = *obs.depth;
    s.rgb = *obs.rgb;
    const int rows = s.rows(), cols = s.cols();
    const cv::Point o = center_crop_origin(rows, cols, input_size);
    const GraspSample crop = center_crop(s, input_size);
    const GraspMaps small = predict_maps(net, crop, modality, decode);
    GraspMaps full(rows, cols, small.width_scale);
    const cv::Rect roi(o.x, o.y, input_size, input_size);
    small.quality.view().copyTo(full.quality.view()(roi));
    small.angle_sin.view().copyTo(full.angle_sin.view()(roi));
    small.angle_cos.view().copyTo(full.angle_cos.view()(roi));
    small.width.view().copyTo(full.width.view()(roi));
    return full;
  };
}

void SimConfig::validate() const {
  if (image_rows <= 0 || image_cols <= 0) throw ConfigError("sim: image size must be positive");
  if (!(fx > 0.0 && fy > 0.0)) throw ConfigError("sim: focal lengths must be > 0");
  if (!(dt > 0.0)) throw ConfigError("sim: dt must be > 0");
  if (!(timeout > 0.0)) throw ConfigError("sim: timeout must be > 0");
  if (k < 1 || min_distance < 1) throw ConfigError("sim: k and min_distance must be >= 1");
  if (!(gains.linear > 0.0 && gains.angular > 0.0)) throw ConfigError("sim: gains must be > 0");
  if (!(velocity_smoothing >= 0.0 && velocity_smoothing <= 1.0)) throw ConfigError("sim: velocity_smoothing must be in [0, 1]");
  if (depth_noise < 0.0) throw ConfigError("sim: depth_noise must be >= 0");
  if (overlay_stride < 1) throw ConfigError("sim: overlay_stride must be >= 1");
}

CameraModel SimConfig::camera(double height) const {
  return CameraModel::looking_down(height, fx, fy, image_cols / 2.0, image_rows / 2.0);
}

json EpisodeResult::to_json() const {
  json traj = json::array();
  for (const auto& p : trajectory) {
    json jp = {{"time", p.time},
               {"position", {p.position.x(), p.position.y(), p.position.z()}},
               {"yaw", p.yaw},
               {"finger_opening", p.finger_opening}};
    if (p.has_target) {
      jp["tracked"] = {{"u", p.tracked_image.u},
                       {"v", p.tracked_image.v},
                       {"x", p.tracked.x},
                       {"y", p.tracked.y},
                       {"z", p.tracked.z},
                       {"angle", p.tracked.angle},
                       {"width", p.tracked.width},
                       {"quality", p.tracked.quality},
                       {"object", p.tracked_object}};
    } else {
      jp["tracked"] = nullptr;
    }
    traj.push_back(std::move(jp));
  }
  return {{"success", success},
          {"steps", steps},
          {"final_position_error", final_position_error},
          {"final_angle_error", final_angle_error},
          {"steady_state_lag", steady_state_lag},
          {"trajectory", traj}};
}

void EpisodeResult::write_trajectory_csv(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(9);
  out << "time,x,y,z,yaw,finger_opening,tracked_u,tracked_v,target_x,target_y,target_z,target_angle,tracked_object\n";
  for (const auto& p : trajectory) {
    out << p.time << ',' << p.position.x() << ',' << p.position.y() << ',' << p.position.z() << ',' << p.yaw << ','
        << p.finger_opening << ',';
    if (p.has_target) {
      out << p.tracked_image.u << ',' << p.tracked_image.v << ',' << p.tracked.x << ',' << p.tracked.y << ','
          << p.tracked.z << ',' << p.tracked.angle << ',' << p.tracked_object << '\n';
    } else {
      out << ",,,,,,\n";
    }
  }
}

namespace {

void write_overlay(const RgbImage& rgb, const GripperState& g, const CameraModel& cam,
                   const std::optional<GraspImage>& tracked, const fs::path& path) {
  cv::Mat canvas;
  cv::cvtColor(rgb.view(), canvas, cv::COLOR_RGB2BGR);
  if (tracked) {
    const GraspRectangle r(Vec2(tracked->u, tracked->v), tracked->angle, tracked->width, tracked->width / 2.0);
    std::vector<cv::Point> pts;
    for (const auto& c : r.corners()) pts.emplace_back(cvRound(c.x()), cvRound(c.y()));
    cv::polylines(canvas, pts, true, cv::Scalar(0, 0, 255), 1);
  }
  const Vec3 p = cam.project(g.position);
  if (p.z() > 0.0) cv::drawMarker(canvas, cv::Point(cvRound(p.x()), cvRound(p.y())), cv::Scalar(255, 255, 0), cv::MARKER_CROSS, 9);
  if (!cv::imwrite(path.string(), canvas)) throw IoError("cannot write " + path.string());
}

}  // namespace

EpisodeResult run_episode(const Scene& scene, const Predictor& predictor, const SimConfig& cfg) {
  cfg.validate();
  scene.validate();
  const CameraModel cam = cfg.camera(scene.camera_height);
  const int rows = cfg.image_rows, cols = cfg.image_cols;
  const int max_ticks = static_cast<int>(std::lround(cfg.timeout / cfg.dt));
  if (!cfg.overlay_dir.empty()) fs::create_directories(cfg.overlay_dir);

  Scene world = scene;
  GripperState g = cfg.gripper;
  std::optional<GraspImage> previous;
  std::optional<GraspWorld> previous_target;
  Vec2 velocity_estimate = Vec2::Zero();
  std::normal_distribution<double> noise(0.0, cfg.depth_noise);

  EpisodeResult res;
  res.final_position_error = std::numeric_limits<double>::quiet_NaN();
  res.final_angle_error = std::numeric_limits<double>::quiet_NaN();

  for (int tick = 0; tick < max_ticks; ++tick) {
    Plane depth = render_depth(world, cam, rows, cols);
    if (cfg.depth_noise > 0.0) {
      std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(tick));
      for (float& d : depth.values()) d = static_cast<float>(std::max(0.0, d + noise(rng)));
    }
    const RgbImage rgb = render_rgb(world, cam, rows, cols);
    const Observation obs{&depth, &rgb, &world, &cam};
    const GraspMaps maps = predictor(obs);
    const auto candidates = extract_grasps(maps, cfg.k, cfg.min_distance);

    TrajectoryPoint point;
    VelocityCommand cmd;
    GraspWorld target;
    if (!candidates.empty()) {
      const GraspImage sel = select_tracked_grasp(candidates, previous);
      const int pr = std::clamp(static_cast<int>(std::lround(sel.v)), 0, rows - 1);
      const int pc = std::clamp(static_cast<int>(std::lround(sel.u)), 0, cols - 1);
      const double d = depth(pr, pc);
      if (d > 0.0) {
        target = grasp_image_to_world(sel, d, cam);
        // Close the jaws a little below the visible surface, never below the table.
        target.z = std::max(target.z - 0.01, target.z / 2.0);

        if (previous_target && (target.position() - previous_target->position()).head<2>().norm() < 0.02) {
          const Vec2 measured = (target.position() - previous_target->position()).head<2>() / cfg.dt;
          velocity_estimate = cfg.velocity_smoothing * measured + (1.0 - cfg.velocity_smoothing) * velocity_estimate;
        } else {
          velocity_estimate.setZero();
        }

        GraspWorld commanded = target;
        const double planar = (target.position() - g.position).head<2>().norm();
        if (planar > cfg.descend_radius) commanded.z = g.position.z();
        cmd = pbvs_velocity(g, commanded, cfg.gains, Vec3(velocity_estimate.x(), velocity_estimate.y(), 0.0));
        g.finger_opening = std::clamp(target.width + cfg.finger_clearance, 0.0, g.opening_max);

        previous = sel;
        previous_target = target;
        point.has_target = true;
        point.tracked_image = sel;
        point.tracked = target;
        for (const auto& o : world.objects) {
          if (o.covers(Vec2(target.x, target.y))) {
            point.tracked_object = o.id;
            break;
          }
        }
      }
    }

    if (!cfg.overlay_dir.empty() && tick % cfg.overlay_stride == 0) {
      std::ostringstream name;
      name << "tick_" << std::setw(5) << std::setfill('0') << tick << ".png";
      write_overlay(rgb, g, cam, previous, cfg.overlay_dir / name.str());
    }

    g = integrate(g, cmd, cfg.dt);
    res.steps = tick + 1;
    point.time = res.steps * cfg.dt;
    point.position = g.position;
    point.yaw = g.yaw();
    point.finger_opening = g.finger_opening;
    res.trajectory.push_back(point);

    if (point.has_target) {
      res.final_position_error = (g.position - target.position()).norm();
      res.final_angle_error = std::abs(signed_angle_error(target.angle, g.yaw()));
      bool grounded = false;
      for (const auto& o : world.objects) {
        if (o.covers(g.position.head<2>()) && o.extent_along(g.yaw()) <= g.finger_opening &&
            g.position.z() < o.height && g.position.z() > 0.0) {
          grounded = true;
        }
      }
      if (res.final_position_error <= cfg.position_tolerance && res.final_angle_error <= cfg.angle_tolerance && grounded) {
        res.success = true;
        break;
      }
    }
    world = step_scene(world, cfg.dt);
  }

  // Mean planar error over the last half second of tracked ticks.
  const int window = std::max(1, static_cast<int>(std::lround(0.5 / cfg.dt)));
  double lag = 0.0;
  int count = 0;
  for (auto it = res.trajectory.rbegin(); it != res.trajectory.rend() && count < window; ++it) {
    if (!it->has_target) continue;
    lag += (it->position.head<2>() - Vec2(it->tracked.x, it->tracked.y)).norm();
    ++count;
  }
  res.steady_state_lag = count ? lag / count : std::numeric_limits<double>::quiet_NaN();
  return res;
}

}  // namespace pegg::sim
