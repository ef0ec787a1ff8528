#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace padapt {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline std::atomic<LogLevel>& log_level() {
  static std::atomic<LogLevel> level{LogLevel::info};
  return level;
}

inline void log(LogLevel level, std::string_view msg) {
  if (level < log_level().load()) return;
  static constexpr const char* names[] = {"debug", "info", "warn", "error"};
  std::clog << "[padapt " << names[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void log_info(std::string_view msg) { log(LogLevel::info, msg); }
inline void log_warn(std::string_view msg) { log(LogLevel::warn, msg); }

}  // namespace padapt
