#pragma once

// Progress telemetry: JSON lines on stderr, one object per event.
// Disabled by default in library use; the CLI switches it on.

#include <string_view>

#include "json.hpp"

namespace llmimg::telemetry {

void enable(bool on);
bool enabled();

// Adds "event" and "ts_ms" fields and writes one line to stderr.
void emit(std::string_view event, nlohmann::json fields = nlohmann::json::object());

}  // namespace llmimg::telemetry
