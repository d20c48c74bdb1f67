#pragma once

// Query sessions: the one interface extraction code sees.
//
// A session validates each request against the advertised capabilities,
// counts round-trips that actually hit the backend, and (for deterministic
// endpoints) memoizes responses on a canonical key so repeated queries are
// free. The in-process session calls the mock model directly; the HTTP
// client in client.hpp implements the same contract over the wire.

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>

#include "llmimg/mock_model.hpp"
#include "llmimg/rng.hpp"

namespace llmimg {

class ApiSession {
  public:
    virtual ~ApiSession() = default;

    virtual const Capabilities& capabilities() const = 0;
    virtual TopKResponse query(const std::string& context, const BiasSpec& bias,
                               int k) = 0;
    // Round-trips that reached the backend (cache hits excluded).
    virtual uint64_t call_count() const = 0;
    virtual void set_cache_enabled(bool enabled) = 0;
    virtual bool cache_enabled() const = 0;
};

// Shared request validation, response validation, counting and caching.
// Transports implement transport_query() only.
class CachingSession : public ApiSession {
  public:
    const Capabilities& capabilities() const final { return caps_; }
    TopKResponse query(const std::string& context, const BiasSpec& bias,
                       int k) final;
    uint64_t call_count() const final;
    void set_cache_enabled(bool enabled) final;
    bool cache_enabled() const final;

  protected:
    CachingSession(Capabilities caps, bool cache_enabled)
        : caps_(std::move(caps)), cache_enabled_(cache_enabled) {}

    virtual TopKResponse transport_query(const std::string& context,
                                         const BiasSpec& bias, int k) = 0;

  private:
    Capabilities caps_;
    mutable std::mutex mutex_;
    bool cache_enabled_;
    uint64_t calls_ = 0;
    std::unordered_map<std::string, TopKResponse> cache_;
};

struct InProcessOptions {
    bool cache = true;
    bool echo_replica = false;
    // Seed salt for the replica-draw stream; the HTTP server uses the same
    // derivation, so both transports see identical draw sequences for the
    // same query order.
    uint64_t draw_salt = 0;
};

std::unique_ptr<ApiSession> make_in_process_session(
    std::shared_ptr<const MockModel> model, InProcessOptions options = {});

// Canonical cache key: byte-exact in context, bias (ids ascending, bias bits
// verbatim) and k.
std::string canonical_query_key(const std::string& context,
                                const BiasSpec& bias, int k);

// Raises ProtocolError unless entries are sorted by logprob descending with
// distinct in-range token ids, logprobs finite and <= 0, and count <= k.
void validate_response(const TopKResponse& resp, int k, int64_t vocab_size);

// Shared replica-draw stream (used by the in-process session and the HTTP
// server so that the two transports are byte-equivalent).
class ReplicaChooser {
  public:
    ReplicaChooser(uint64_t model_seed, int n_replicas, uint64_t salt);
    int next();

  private:
    std::mutex mutex_;
    SplitMix64 stream_;
    int n_;
};

}  // namespace llmimg
