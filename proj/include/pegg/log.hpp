#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace pegg::log {

enum class Level { Debug = 0, Info = 1, Warning = 2, Error = 3, Off = 4 };

inline std::atomic<Level>& threshold() {
  static std::atomic<Level> level{Level::Info};
  return level;
}

inline void write(Level level, std::string_view tag, std::string_view msg) {
  if (level < threshold().load()) return;
  std::clog << "[pegg " << tag << "] " << msg << '\n';
}

inline void info(std::string_view msg) { write(Level::Info, "info", msg); }
inline void warn(std::string_view msg) { write(Level::Warning, "warn", msg); }
inline void error(std::string_view msg) { write(Level::Error, "error", msg); }

}  // namespace pegg::log
