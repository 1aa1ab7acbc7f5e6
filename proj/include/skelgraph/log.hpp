#pragma once

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>

namespace skelgraph::log {

enum class Level { error = 0, info = 1, debug = 2 };

// Level comes from SKELGRAPH_LOG={error|info|debug}; default is error.
inline Level level() {
  static Level lvl = [] {
    const char* env = std::getenv("SKELGRAPH_LOG");
    if (env == nullptr) return Level::error;
    const std::string s(env);
    if (s == "debug") return Level::debug;
    if (s == "info") return Level::info;
    return Level::error;
  }();
  return lvl;
}

inline void write(Level lvl, const std::string& tag, const std::string& msg) {
  if (static_cast<int>(lvl) <= static_cast<int>(level())) {
    std::cerr << "[" << tag << "] " << msg << "\n";
  }
}

inline void error(const std::string& msg) { write(Level::error, "error", msg); }
inline void info(const std::string& msg) { write(Level::info, "info", msg); }
inline void debug(const std::string& msg) { write(Level::debug, "debug", msg); }

}  // namespace skelgraph::log
