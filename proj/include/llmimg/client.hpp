#pragma once

// HTTP client sessions.
//
// The native profile speaks the protocol in server.hpp: capabilities are
// fetched once at connect time and are authoritative. The
// openai_compatible profile emits the public chat-completions shape
// ("logit_bias", "top_logprobs", bearer auth) for endpoints that do not
// expose a capabilities route; their limits must be supplied explicitly.
//
// Transient transport failures and 5xx responses retry with exponential
// backoff (max_retries, doubling from backoff_base); 4xx validation errors
// never retry. The raw response body is kept on each TopKResponse for
// forensics on providers with unknown logprob rounding.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>

#include "llmimg/session.hpp"

namespace llmimg {

enum class ApiProfile { native, openai_compatible };

struct ConnectOptions {
    ApiProfile profile = ApiProfile::native;
    std::string bearer_token;        // falls back to $LLMIMG_API_KEY
    bool cache = true;
    bool echo_replica = false;
    int max_retries = 5;
    int backoff_base_ms = 100;
    int pool_size = 8;               // concurrent connections
    std::string model_hint;          // "model" field, openai_compatible
    // Required for openai_compatible (no capabilities endpoint to ask).
    std::optional<Capabilities> capability_override;
};

std::unique_ptr<ApiSession> connect(const std::string& base_url,
                                    const ConnectOptions& options = {});

}  // namespace llmimg
