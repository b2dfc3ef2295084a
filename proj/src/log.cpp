#include "p3drad/log.hpp"

#include <cstdarg>
#include <stdexcept>

namespace p3drad {

namespace {
LogLevel g_level = LogLevel::info;
const char* level_tag(LogLevel lvl) {
    switch (lvl) {
        case LogLevel::debug: return "debug";
        case LogLevel::info: return "info";
        case LogLevel::warn: return "warn";
        default: return "error";
    }
}
} // namespace

LogLevel log_level() { return g_level; }
void set_log_level(LogLevel lvl) { g_level = lvl; }

void set_log_level(const std::string& name) {
    if (name == "debug") g_level = LogLevel::debug;
    else if (name == "info") g_level = LogLevel::info;
    else if (name == "warn") g_level = LogLevel::warn;
    else if (name == "error") g_level = LogLevel::error;
    else throw std::invalid_argument("unknown log level: " + name);
}

namespace detail {
void vlog(LogLevel lvl, const char* fmt, ...) {
    if (static_cast<int>(lvl) < static_cast<int>(g_level)) return;
    std::fprintf(stderr, "[%s] ", level_tag(lvl));
    va_list args;
    va_start(args, fmt);
    std::vfprintf(stderr, fmt, args);
    va_end(args);
    std::fprintf(stderr, "\n");
}
} // namespace detail

} // namespace p3drad
