#include "rticket/log.hpp"

#include <iostream>
#include <utility>

namespace rticket {

namespace {

LogSink& sink() {
  static LogSink s = [](LogLevel level, const std::string& msg) {
    std::cerr << (level == LogLevel::warning ? "warning: " : "") << msg << '\n';
  };
  return s;
}

}  // namespace

LogSink set_log_sink(LogSink s) { return std::exchange(sink(), std::move(s)); }

void log_info(const std::string& message) {
  if (sink()) sink()(LogLevel::info, message);
}

void log_warning(const std::string& message) {
  if (sink()) sink()(LogLevel::warning, message);
}

}  // namespace rticket
