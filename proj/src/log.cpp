#include "f2pad/log.hpp"

#include <iostream>
#include <mutex>

namespace f2pad::log {

namespace {

std::mutex g_mutex;
Sink g_sink;
bool g_verbose = false;

void emit(Level level, const std::string& msg) {
    std::lock_guard<std::mutex> lock(g_mutex);
    if (g_sink) {
        g_sink(level, msg);
        return;
    }
    if (level == Level::warning) {
        std::cerr << "warning: " << msg << '\n';
    } else if (g_verbose) {
        std::cerr << msg << '\n';
    }
}

}  // namespace

void set_sink(Sink sink) {
    std::lock_guard<std::mutex> lock(g_mutex);
    g_sink = std::move(sink);
}

void reset_sink() { set_sink(nullptr); }

void set_verbose(bool verbose) {
    std::lock_guard<std::mutex> lock(g_mutex);
    g_verbose = verbose;
}

void info(const std::string& msg) { emit(Level::info, msg); }
void warn(const std::string& msg) { emit(Level::warning, msg); }

}  // namespace f2pad::log
