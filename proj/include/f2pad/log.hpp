#pragma once

#include <functional>
#include <string>

namespace f2pad::log {

enum class Level { info, warning };

using Sink = std::function<void(Level, const std::string&)>;

// Default sink writes warnings to stderr and drops info messages.
void set_sink(Sink sink);
void reset_sink();
void set_verbose(bool verbose);

void info(const std::string& msg);
void warn(const std::string& msg);

}  // namespace f2pad::log
