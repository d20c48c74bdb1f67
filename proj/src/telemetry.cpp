#include "llmimg/telemetry.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <mutex>
#include <string>

namespace llmimg::telemetry {

namespace {
std::atomic<bool> g_enabled{false};
std::mutex g_mutex;
}  // namespace

void enable(bool on) { g_enabled.store(on, std::memory_order_relaxed); }

bool enabled() { return g_enabled.load(std::memory_order_relaxed); }

void emit(std::string_view event, nlohmann::json fields) {
    if (!enabled()) {
        return;
    }
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    fields["event"] = std::string(event);
    fields["ts_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    const std::string line = fields.dump();
    std::lock_guard<std::mutex> lock(g_mutex);
    std::fprintf(stderr, "%s\n", line.c_str());
}

}  // namespace llmimg::telemetry
