#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace dg {

// Log level comes from the DG_LOG env var: error (default), info, debug.
enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* v = std::getenv("DG_LOG");
        if (v == nullptr) return LogLevel::Error;
        if (std::strcmp(v, "debug") == 0) return LogLevel::Debug;
        if (std::strcmp(v, "info") == 0) return LogLevel::Info;
        return LogLevel::Error;
    }();
    return level;
}

// Diagnostics go to stderr; stdout is reserved for paths and metrics.
inline void log_line(LogLevel lvl, const std::string& msg) {
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    const char* tag = lvl == LogLevel::Error ? "error" : lvl == LogLevel::Info ? "info" : "debug";
    std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_error(const std::string& msg) { log_line(LogLevel::Error, msg); }
inline void log_info(const std::string& msg) { log_line(LogLevel::Info, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::Debug, msg); }

} // namespace dg
