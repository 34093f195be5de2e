#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "pegg/config.hpp"

namespace pegg::cli {

enum class Command { Train, Eval, Predict, Simulate, Visualize };

Command parse_command(std::string_view s);
std::string to_string(Command c);

/// Creates `<out>/<timestamp>-<command>/`, adding a numeric suffix when the
/// directory already exists.
std::filesystem::path make_run_dir(const std::filesystem::path& out, Command c);

/// Runs one command. Writes the resolved config as config.yaml in the run
/// directory and prints the run directory path to `out`. Every error is
/// reported on `err`; returns 0 only on success.
int dispatch(Command c, const AppConfig& cfg, std::ostream& out, std::ostream& err);

/// Full entry point: flag parsing, config resolution and dispatch.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pegg::cli
