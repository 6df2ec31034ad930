#pragma once

#include <functional>
#include <string>

namespace rticket {

enum class LogLevel { info, warning };

using LogSink = std::function<void(LogLevel, const std::string&)>;

/// Replace the process-wide sink (default: stderr). Returns the previous sink.
LogSink set_log_sink(LogSink sink);

void log_info(const std::string& message);
void log_warning(const std::string& message);

}  // namespace rticket
