#pragma once

#include <cstdio>
#include <string>

namespace p3drad {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3 };

LogLevel log_level();
void set_log_level(LogLevel lvl);
void set_log_level(const std::string& name); // "debug" | "info" | "warn" | "error"

namespace detail {
void vlog(LogLevel lvl, const char* fmt, ...);
}

template <typename... Args>
void log_debug(const char* fmt, Args... args) { detail::vlog(LogLevel::debug, fmt, args...); }
template <typename... Args>
void log_info(const char* fmt, Args... args) { detail::vlog(LogLevel::info, fmt, args...); }
template <typename... Args>
void log_warn(const char* fmt, Args... args) { detail::vlog(LogLevel::warn, fmt, args...); }
template <typename... Args>
void log_error(const char* fmt, Args... args) { detail::vlog(LogLevel::error, fmt, args...); }

} // namespace p3drad
