#pragma once

#include <string>

namespace cdmm {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Read once from CDMM_LOG (error, info or debug); info when unset.
LogLevel log_level();
// Overrides the environment, e.g. for tests.
void set_log_level(LogLevel level);
LogLevel parse_log_level(const std::string& s);

// All messages go to stderr.
void log_error(const std::string& msg);
void log_warn(const std::string& msg);  // shown at info and above
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace cdmm
