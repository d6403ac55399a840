#pragma once

// Minimal leveled logging to stderr. The level comes from SPLITSHIELD_LOG
// (error|warn|info|debug, default warn) unless set explicitly.

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>

namespace splitshield::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline Level parse_level(std::string_view s, Level fallback = Level::Warn) {
  if (s == "error") return Level::Error;
  if (s == "warn") return Level::Warn;
  if (s == "info") return Level::Info;
  if (s == "debug") return Level::Debug;
  return fallback;
}

namespace detail {
inline Level& current() {
  static Level lvl = [] {
    const char* env = std::getenv("SPLITSHIELD_LOG");
    return env ? parse_level(env) : Level::Warn;
  }();
  return lvl;
}
inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

inline void set_level(Level l) { detail::current() = l; }
inline Level level() { return detail::current(); }
inline bool enabled(Level l) { return static_cast<int>(l) <= static_cast<int>(level()); }

inline void write(Level l, const std::string& msg) {
  if (!enabled(l)) return;
  static constexpr const char* kTag[] = {"error", "warn", "info", "debug"};
  std::lock_guard lock(detail::sink_mutex());
  std::cerr << "[splitshield " << kTag[static_cast<int>(l)] << "] " << msg << '\n';
}

template <typename... Args>
void emit(Level l, const Args&... args) {
  if (!enabled(l)) return;
  std::ostringstream os;
  (os << ... << args);
  write(l, os.str());
}

template <typename... Args>
void error(const Args&... a) { emit(Level::Error, a...); }
template <typename... Args>
void warn(const Args&... a) { emit(Level::Warn, a...); }
template <typename... Args>
void info(const Args&... a) { emit(Level::Info, a...); }
template <typename... Args>
void debug(const Args&... a) { emit(Level::Debug, a...); }

}  // namespace splitshield::log
