#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "pegg/evaluation.hpp"
#include "pegg/network.hpp"
#include "pegg/servo_sim.hpp"
#include "pegg/training.hpp"

namespace pegg {

struct EvalSection {
  DecodeOptions decode;
  MetricThresholds thresholds;
  std::string split = "val";  // val | all
  int top_k = 5;              // grasps drawn by predict / visualize
  int min_distance = 10;
};

struct SimSection {
  sim::SimConfig sim;
  sim::OracleOptions oracle;
  std::string predictor = "oracle";  // oracle | model
};

/// Paths and artifact settings for one invocation.
struct RunSection {
  std::filesystem::path out = "runs";
  std::filesystem::path checkpoint;
  std::filesystem::path scenes;
  std::filesystem::path image;
  std::filesystem::path depth;
  std::filesystem::path maps;
};

struct AppConfig {
  TrainConfig train;
  NetworkConfig network;
  EvalSection eval;
  SimSection sim;
  RunSection run;

  /// Cross-section checks (network channels vs modality, etc). Throws ConfigError.
  void validate() const;

  /// YAML text with every field; parse_config on it yields the same config.
  std::string to_yaml() const;
};

/// Command-line values; set fields win over the file.
struct FlagOverrides {
  std::optional<std::filesystem::path> dataset_root;
  std::optional<std::string> modality;
  std::optional<int> input_size;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> predictor;
  std::optional<std::filesystem::path> scenes;
  std::optional<std::filesystem::path> image;
  std::optional<std::filesystem::path> depth;
  std::optional<std::filesystem::path> maps;
};

/// Parses YAML text on top of the defaults. Unknown keys raise
/// ConfigError("unknown key: <path>"); wrong value types name the expected type.
AppConfig parse_config_text(const std::string& text, const FlagOverrides& flags = {});

/// Reads `path` (empty = defaults only), applies `flags`, then falls back to
/// GRASP_DATA_ROOT for an unset dataset root, and validates.
AppConfig parse_config(const std::filesystem::path& path, const FlagOverrides& flags = {});

}  // namespace pegg
