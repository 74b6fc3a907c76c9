#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace jigsaw::log {

enum Level { kError = 0, kInfo = 1, kDebug = 2 };

// Level comes from JIGSAW_LOG in {error, info, debug}; default info.
inline Level level() {
  static Level lv = [] {
    const char* e = std::getenv("JIGSAW_LOG");
    if (!e) return kInfo;
    if (std::strcmp(e, "error") == 0) return kError;
    if (std::strcmp(e, "debug") == 0) return kDebug;
    return kInfo;
  }();
  return lv;
}

template <typename... Args>
inline void error(const char* fmt, Args... args) {
  std::fprintf(stderr, "[jigsaw error] ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

template <typename... Args>
inline void info(const char* fmt, Args... args) {
  if (level() < kInfo) return;
  std::fprintf(stderr, "[jigsaw] ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

template <typename... Args>
inline void debug(const char* fmt, Args... args) {
  if (level() < kDebug) return;
  std::fprintf(stderr, "[jigsaw debug] ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

}  // namespace jigsaw::log
