#include "pegg/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "pegg/errors.hpp"

namespace fs = std::filesystem;

namespace pegg {
namespace {

// Scalar conversion with the expected type named in the error.
template <typename T>
struct TypeName;
template <> struct TypeName<int> { static constexpr const char* value = "integer"; };
template <> struct TypeName<std::uint64_t> { static constexpr const char* value = "non-negative integer"; };
template <> struct TypeName<double> { static constexpr const char* value = "number"; };
template <> struct TypeName<bool> { static constexpr const char* value = "boolean"; };
template <> struct TypeName<std::string> { static constexpr const char* value = "string"; };

template <typename T>
T scalar(const YAML::Node& node, const std::string& path) {
  const std::string expected = TypeName<T>::value;
  if (!node.IsScalar()) throw ConfigError(path + ": expected " + expected);
  if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (!node.Scalar().empty() && node.Scalar().front() == '-') throw ConfigError(path + ": expected " + expected);
  }
  try {
    return node.as<T>();
  } catch (const YAML::BadConversion&) {
    throw ConfigError(path + ": expected " + expected + ", got '" + node.Scalar() + "'");
  }
}

template <typename T>
std::vector<T> list(const YAML::Node& node, const std::string& path) {
  if (!node.IsSequence()) throw ConfigError(path + ": expected list of " + TypeName<T>::value + "s");
  std::vector<T> out;
  for (std::size_t i = 0; i < node.size(); ++i) out.push_back(scalar<T>(node[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

struct Field {
  std::string key;
  std::function<void(AppConfig&, const YAML::Node&, const std::string&)> read;
  std::function<void(const AppConfig&, YAML::Emitter&)> write;
};

struct Section {
  std::string name;
  std::vector<Field> fields;
};

// Binds a plain member reached through `get`.
template <typename T, typename Get>
Field bind(std::string key, Get get) {
  Field f;
  f.key = key;
  f.read = [get](AppConfig& c, const YAML::Node& n, const std::string& path) {
    if constexpr (std::is_same_v<T, std::vector<int>>) {
      get(c) = list<int>(n, path);
    } else if constexpr (std::is_same_v<T, fs::path>) {
      get(c) = scalar<std::string>(n, path);
    } else {
      get(c) = scalar<T>(n, path);
    }
  };
  f.write = [get](const AppConfig& c, YAML::Emitter& e) {
    auto& v = get(const_cast<AppConfig&>(c));
    if constexpr (std::is_same_v<T, std::vector<int>>) {
      e << YAML::Flow << v;
    } else if constexpr (std::is_same_v<T, fs::path>) {
      e << YAML::DoubleQuoted << v.string();
    } else if constexpr (std::is_same_v<T, std::string>) {
      e << YAML::DoubleQuoted << v;
    } else {
      e << v;
    }
  };
  return f;
}

// Angles are configured in degrees and stored in radians.
template <typename Get>
Field bind_degrees(std::string key, Get get) {
  Field f;
  f.key = key;
  f.read = [get](AppConfig& c, const YAML::Node& n, const std::string& path) {
    get(c) = deg2rad(scalar<double>(n, path));
  };
  f.write = [get](const AppConfig& c, YAML::Emitter& e) { e << rad2deg(get(const_cast<AppConfig&>(c))); };
  return f;
}

const std::vector<Section>& schema() {
  static const std::vector<Section> sections = [] {
    std::vector<Section> s;

    Section train{"train", {}};
    auto& t = train.fields;
    t.push_back(bind<std::string>("dataset", [](AppConfig& c) -> auto& { return c.train.dataset; }));
    t.push_back(bind<fs::path>("dataset_root", [](AppConfig& c) -> auto& { return c.train.dataset_root; }));
    t.push_back({"modality",
                 [](AppConfig& c, const YAML::Node& n, const std::string& path) {
                   const auto text = scalar<std::string>(n, path);
                   try {
                     c.train.modality = parse_modality(text);
                   } catch (const std::exception& e) {
                     throw ConfigError(path + ": " + e.what());
                   }
                 },
                 [](const AppConfig& c, YAML::Emitter& e) { e << YAML::DoubleQuoted << to_string(c.train.modality); }});
    t.push_back(bind<int>("input_size", [](AppConfig& c) -> auto& { return c.train.input_size; }));
    t.push_back(bind<int>("batch_size", [](AppConfig& c) -> auto& { return c.train.batch_size; }));
    t.push_back(bind<int>("epochs", [](AppConfig& c) -> auto& { return c.train.epochs; }));
    t.push_back(bind<double>("learning_rate", [](AppConfig& c) -> auto& { return c.train.learning_rate; }));
    t.push_back(bind<double>("beta", [](AppConfig& c) -> auto& { return c.train.beta; }));
    t.push_back(bind<std::uint64_t>("seed", [](AppConfig& c) -> auto& { return c.train.seed; }));
    t.push_back({"split_mode",
                 [](AppConfig& c, const YAML::Node& n, const std::string& path) {
                   const auto text = scalar<std::string>(n, path);
                   try {
                     c.train.split_mode = parse_split_mode(text);
                   } catch (const std::exception& e) {
                     throw ConfigError(path + ": " + e.what());
                   }
                 },
                 [](const AppConfig& c, YAML::Emitter& e) { e << YAML::DoubleQuoted << to_string(c.train.split_mode); }});
    t.push_back(bind<double>("train_fraction", [](AppConfig& c) -> auto& { return c.train.train_fraction; }));
    t.push_back(bind<bool>("augment", [](AppConfig& c) -> auto& { return c.train.augment; }));
    t.push_back(bind<double>("width_scale", [](AppConfig& c) -> auto& { return c.train.width_scale; }));
    t.push_back(bind<int>("max_iterations", [](AppConfig& c) -> auto& { return c.train.max_iterations; }));
    s.push_back(std::move(train));

    Section net{"network", {}};
    auto& n = net.fields;
    n.push_back(bind<int>("input_channels", [](AppConfig& c) -> auto& { return c.network.input_channels; }));
    n.push_back(bind<int>("stem_channels", [](AppConfig& c) -> auto& { return c.network.stem_channels; }));
    n.push_back(bind<std::vector<int>>("channel_schedule", [](AppConfig& c) -> auto& { return c.network.channel_schedule; }));
    n.push_back(bind<int>("num_residual_blocks", [](AppConfig& c) -> auto& { return c.network.num_residual_blocks; }));
    n.push_back(bind<int>("stage_residual_blocks", [](AppConfig& c) -> auto& { return c.network.stage_residual_blocks; }));
    n.push_back(bind<std::vector<int>>("spp_kernels", [](AppConfig& c) -> auto& { return c.network.spp_kernels; }));
    n.push_back(bind<int>("upsample_factor_per_stage", [](AppConfig& c) -> auto& { return c.network.upsample_factor_per_stage; }));
    n.push_back(bind<int>("head_channels", [](AppConfig& c) -> auto& { return c.network.head_channels; }));
    s.push_back(std::move(net));

    Section eval{"eval", {}};
    auto& v = eval.fields;
    v.push_back(bind<double>("smooth_sigma", [](AppConfig& c) -> auto& { return c.eval.decode.smooth_sigma; }));
    v.push_back(bind<double>("iou_threshold", [](AppConfig& c) -> auto& { return c.eval.thresholds.iou; }));
    v.push_back(bind_degrees("angle_threshold_deg", [](AppConfig& c) -> auto& { return c.eval.thresholds.angle; }));
    v.push_back(bind<std::string>("split", [](AppConfig& c) -> auto& { return c.eval.split; }));
    v.push_back(bind<int>("top_k", [](AppConfig& c) -> auto& { return c.eval.top_k; }));
    v.push_back(bind<int>("min_distance", [](AppConfig& c) -> auto& { return c.eval.min_distance; }));
    s.push_back(std::move(eval));

    Section simsec{"sim", {}};
    auto& m = simsec.fields;
    m.push_back(bind<std::string>("predictor", [](AppConfig& c) -> auto& { return c.sim.predictor; }));
    m.push_back(bind<int>("image_rows", [](AppConfig& c) -> auto& { return c.sim.sim.image_rows; }));
    m.push_back(bind<int>("image_cols", [](AppConfig& c) -> auto& { return c.sim.sim.image_cols; }));
    m.push_back(bind<double>("fx", [](AppConfig& c) -> auto& { return c.sim.sim.fx; }));
    m.push_back(bind<double>("fy", [](AppConfig& c) -> auto& { return c.sim.sim.fy; }));
    m.push_back(bind<double>("dt", [](AppConfig& c) -> auto& { return c.sim.sim.dt; }));
    m.push_back(bind<double>("timeout", [](AppConfig& c) -> auto& { return c.sim.sim.timeout; }));
    m.push_back(bind<double>("position_tolerance", [](AppConfig& c) -> auto& { return c.sim.sim.position_tolerance; }));
    m.push_back(bind_degrees("angle_tolerance_deg", [](AppConfig& c) -> auto& { return c.sim.sim.angle_tolerance; }));
    m.push_back(bind<int>("k", [](AppConfig& c) -> auto& { return c.sim.sim.k; }));
    m.push_back(bind<int>("min_distance", [](AppConfig& c) -> auto& { return c.sim.sim.min_distance; }));
    m.push_back(bind<double>("gain_linear", [](AppConfig& c) -> auto& { return c.sim.sim.gains.linear; }));
    m.push_back(bind<double>("gain_angular", [](AppConfig& c) -> auto& { return c.sim.sim.gains.angular; }));
    m.push_back(bind<double>("max_linear_speed", [](AppConfig& c) -> auto& { return c.sim.sim.gripper.max_linear_speed; }));
    m.push_back(bind<double>("max_angular_speed", [](AppConfig& c) -> auto& { return c.sim.sim.gripper.max_angular_speed; }));
    m.push_back(bind<double>("opening_max", [](AppConfig& c) -> auto& { return c.sim.sim.gripper.opening_max; }));
    m.push_back({"start_position",
                 [](AppConfig& c, const YAML::Node& node, const std::string& path) {
                   const auto xs = list<double>(node, path);
                   if (xs.size() != 3) throw ConfigError(path + ": expected list of 3 numbers");
                   c.sim.sim.gripper.position = {xs[0], xs[1], xs[2]};
                 },
                 [](const AppConfig& c, YAML::Emitter& e) {
                   const auto& p = c.sim.sim.gripper.position;
                   e << YAML::Flow << std::vector<double>{p.x(), p.y(), p.z()};
                 }});
    m.push_back(bind<double>("descend_radius", [](AppConfig& c) -> auto& { return c.sim.sim.descend_radius; }));
    m.push_back(bind<double>("finger_clearance", [](AppConfig& c) -> auto& { return c.sim.sim.finger_clearance; }));
    m.push_back(bind<double>("velocity_smoothing", [](AppConfig& c) -> auto& { return c.sim.sim.velocity_smoothing; }));
    m.push_back(bind<double>("depth_noise", [](AppConfig& c) -> auto& { return c.sim.sim.depth_noise; }));
    m.push_back(bind<std::uint64_t>("seed", [](AppConfig& c) -> auto& { return c.sim.sim.seed; }));
    m.push_back(bind<int>("overlay_stride", [](AppConfig& c) -> auto& { return c.sim.sim.overlay_stride; }));
    m.push_back(bind<double>("jaw_size", [](AppConfig& c) -> auto& { return c.sim.oracle.jaw_size; }));
    s.push_back(std::move(simsec));

    Section run{"run", {}};
    auto& r = run.fields;
    r.push_back(bind<fs::path>("out", [](AppConfig& c) -> auto& { return c.run.out; }));
    r.push_back(bind<fs::path>("checkpoint", [](AppConfig& c) -> auto& { return c.run.checkpoint; }));
    r.push_back(bind<fs::path>("scenes", [](AppConfig& c) -> auto& { return c.run.scenes; }));
    r.push_back(bind<fs::path>("image", [](AppConfig& c) -> auto& { return c.run.image; }));
    r.push_back(bind<fs::path>("depth", [](AppConfig& c) -> auto& { return c.run.depth; }));
    r.push_back(bind<fs::path>("maps", [](AppConfig& c) -> auto& { return c.run.maps; }));
    s.push_back(std::move(run));
    return s;
  }();
  return sections;
}

void apply_flags(AppConfig& c, const FlagOverrides& f) {
  if (f.dataset_root) c.train.dataset_root = *f.dataset_root;
  if (f.modality) {
    try {
      c.train.modality = parse_modality(*f.modality);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("--modality: ") + e.what());
    }
  }
  if (f.input_size) c.train.input_size = *f.input_size;
  if (f.checkpoint) c.run.checkpoint = *f.checkpoint;
  if (f.out) c.run.out = *f.out;
  if (f.seed) {
    c.train.seed = *f.seed;
    c.sim.sim.seed = *f.seed;
  }
  if (f.predictor) c.sim.predictor = *f.predictor;
  if (f.scenes) c.run.scenes = *f.scenes;
  if (f.image) c.run.image = *f.image;
  if (f.depth) c.run.depth = *f.depth;
  if (f.maps) c.run.maps = *f.maps;
}

}  // namespace

void AppConfig::validate() const {
  train.validate();
  network.validate();
  sim.sim.validate();
  if (network.input_channels != channel_count(train.modality)) {
    throw ConfigError("network.input_channels is " + std::to_string(network.input_channels) + " but modality " +
                      to_string(train.modality) + " needs " + std::to_string(channel_count(train.modality)));
  }
  if (train.input_size % network.downsample_factor() != 0) {
    throw ConfigError("train.input_size must be a multiple of " + std::to_string(network.downsample_factor()));
  }
  if (eval.split != "val" && eval.split != "all") throw ConfigError("eval.split must be val or all");
  if (eval.top_k < 1 || eval.min_distance < 1) throw ConfigError("eval.top_k and eval.min_distance must be >= 1");
  if (!(eval.decode.smooth_sigma >= 0.0)) throw ConfigError("eval.smooth_sigma must be >= 0");
  if (sim.predictor != "oracle" && sim.predictor != "model") throw ConfigError("sim.predictor must be oracle or model");
  if (!(sim.oracle.jaw_size > 0.0)) throw ConfigError("sim.jaw_size must be > 0");
}

std::string AppConfig::to_yaml() const {
  YAML::Emitter e;
  e.SetDoublePrecision(std::numeric_limits<double>::max_digits10);
  e << YAML::BeginMap;
  for (const auto& section : schema()) {
    e << YAML::Key << section.name << YAML::Value << YAML::BeginMap;
    for (const auto& f : section.fields) {
      e << YAML::Key << f.key << YAML::Value;
      f.write(*this, e);
    }
    e << YAML::EndMap;
  }
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

AppConfig parse_config_text(const std::string& text, const FlagOverrides& flags) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  AppConfig c;
  bool channels_given = false;
  if (root && !root.IsNull()) {
    if (!root.IsMap()) throw ConfigError("config: expected mapping at top level");
    for (const auto& kv : root) {
      const auto name = kv.first.as<std::string>();
      const Section* section = nullptr;
      for (const auto& s : schema()) {
        if (s.name == name) section = &s;
      }
      if (!section) throw ConfigError("unknown key: " + name);
      if (kv.second.IsNull()) continue;
      if (!kv.second.IsMap()) throw ConfigError(name + ": expected mapping");
      for (const auto& entry : kv.second) {
        const auto key = entry.first.as<std::string>();
        const std::string path = name + "." + key;
        const Field* field = nullptr;
        for (const auto& f : section->fields) {
          if (f.key == key) field = &f;
        }
        if (!field) throw ConfigError("unknown key: " + path);
        field->read(c, entry.second, path);
        if (path == "network.input_channels") channels_given = true;
      }
    }
  }
  apply_flags(c, flags);
  if (!channels_given) c.network.input_channels = channel_count(c.train.modality);
  c.eval.decode.width_scale = c.train.width_scale;
  return c;
}

AppConfig parse_config(const fs::path& path, const FlagOverrides& flags) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  AppConfig c = parse_config_text(text, flags);
  if (c.train.dataset_root.empty()) {
    if (const char* env = std::getenv("GRASP_DATA_ROOT"); env && *env) c.train.dataset_root = env;
  }
  c.validate();
  return c;
}

}  // namespace pegg
