#include "cdmm/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>

#include "cdmm/error.hpp"

namespace cdmm {

namespace {

std::atomic<int> g_level{-1};
std::mutex g_mu;

void emit(const char* tag, const std::string& msg) {
  std::lock_guard lock(g_mu);
  std::cerr << "[" << tag << "] " << msg << '\n';
}

}  // namespace

LogLevel parse_log_level(const std::string& s) {
  if (s == "error") return LogLevel::Error;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  throw ContractError("unknown log level '" + s + "' (expected error, info or debug)");
}

LogLevel log_level() {
  int v = g_level.load();
  if (v < 0) {
    LogLevel l = LogLevel::Info;
    if (const char* env = std::getenv("CDMM_LOG")) {
      try {
        l = parse_log_level(env);
      } catch (const ContractError&) {
        emit("warn", std::string("ignoring CDMM_LOG=") + env);
      }
    }
    v = static_cast<int>(l);
    g_level.store(v);
  }
  return static_cast<LogLevel>(v);
}

void set_log_level(LogLevel level) { g_level.store(static_cast<int>(level)); }

void log_error(const std::string& msg) { emit("error", msg); }
void log_warn(const std::string& msg) {
  if (log_level() >= LogLevel::Info) emit("warn", msg);
}
void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::Info) emit("info", msg);
}
void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::Debug) emit("debug", msg);
}

}  // namespace cdmm
