#include "llmimg/session.hpp"

#include <bit>
#include <cmath>
#include <cstdio>

namespace llmimg {

namespace {

constexpr uint64_t kTagDraw = 0x44524157ull;  // "DRAW"

}  // namespace

std::string canonical_query_key(const std::string& context,
                                const BiasSpec& bias, int k) {
    std::string key;
    key.reserve(context.size() + 24 * bias.entries.size() + 16);
    key += context;
    key += '\x1f';
    key += std::to_string(k);
    for (const auto& [token, b] : bias.entries) {  // std::map: ids ascending
        char buf[40];
        std::snprintf(buf, sizeof buf, "\x1f%d=%016llx", token,
                      static_cast<unsigned long long>(std::bit_cast<uint64_t>(b)));
        key += buf;
    }
    return key;
}

void validate_response(const TopKResponse& resp, int k, int64_t vocab_size) {
    if (resp.entries.empty() ||
        static_cast<int>(resp.entries.size()) > k) {
        raise(ErrorCode::protocol_error,
              "response has " + std::to_string(resp.entries.size()) +
                  " entries for k=" + std::to_string(k));
    }
    double prev = 0.0;
    for (std::size_t i = 0; i < resp.entries.size(); ++i) {
        const TopEntry& e = resp.entries[i];
        if (e.token < 0 || static_cast<int64_t>(e.token) >= vocab_size) {
            raise(ErrorCode::protocol_error,
                  "response token id " + std::to_string(e.token) +
                      " outside vocabulary");
        }
        if (!std::isfinite(e.logprob) || e.logprob > 0.0) {
            raise(ErrorCode::protocol_error,
                  "response logprob " + std::to_string(e.logprob) +
                      " not finite and <= 0");
        }
        if (i > 0 && e.logprob > prev) {
            raise(ErrorCode::protocol_error,
                  "response logprobs not sorted descending");
        }
        prev = e.logprob;
        for (std::size_t j = 0; j < i; ++j) {
            if (resp.entries[j].token == e.token) {
                raise(ErrorCode::protocol_error,
                      "response repeats token id " + std::to_string(e.token));
            }
        }
    }
}

TopKResponse CachingSession::query(const std::string& context,
                                   const BiasSpec& bias, int k) {
    if (k < 1 || k > caps_.k_max) {
        raise(ErrorCode::capability_mismatch,
              "k=" + std::to_string(k) + " outside advertised [1, " +
                  std::to_string(caps_.k_max) + "]");
    }
    if (static_cast<int>(bias.entries.size()) > caps_.k_max) {
        raise(ErrorCode::capability_mismatch,
              "bias with " + std::to_string(bias.entries.size()) +
                  " entries exceeds advertised k_max");
    }
    for (const auto& [token, b] : bias.entries) {
        if (token < 0 || static_cast<int64_t>(token) >= caps_.vocab_size) {
            raise(ErrorCode::capability_mismatch,
                  "bias token id " + std::to_string(token) +
                      " outside vocabulary");
        }
        if (!std::isfinite(b) || std::abs(b) > caps_.beta_max) {
            raise(ErrorCode::capability_mismatch,
                  "bias " + std::to_string(b) + " exceeds advertised beta_max=" +
                      std::to_string(caps_.beta_max));
        }
    }

    const bool use_cache = cache_enabled() && !caps_.stochastic;
    std::string key;
    if (use_cache) {
        key = canonical_query_key(context, bias, k);
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = cache_.find(key);
        if (it != cache_.end()) {
            return it->second;
        }
    }

    TopKResponse resp = transport_query(context, bias, k);
    validate_response(resp, k, caps_.vocab_size);

    {
        std::lock_guard<std::mutex> lock(mutex_);
        ++calls_;
        if (use_cache) {
            cache_.emplace(std::move(key), resp);
        }
    }
    return resp;
}

uint64_t CachingSession::call_count() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return calls_;
}

void CachingSession::set_cache_enabled(bool enabled) {
    std::lock_guard<std::mutex> lock(mutex_);
    cache_enabled_ = enabled;
}

bool CachingSession::cache_enabled() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return cache_enabled_;
}

ReplicaChooser::ReplicaChooser(uint64_t model_seed, int n_replicas,
                               uint64_t salt)
    : stream_(mix_seed(model_seed, kTagDraw ^ salt)), n_(n_replicas) {}

int ReplicaChooser::next() {
    std::lock_guard<std::mutex> lock(mutex_);
    if (n_ <= 1) {
        return 0;
    }
    return static_cast<int>(stream_.next_below(static_cast<uint64_t>(n_)));
}

namespace {

class InProcessSession final : public CachingSession {
  public:
    InProcessSession(std::shared_ptr<const MockModel> model,
                     InProcessOptions options)
        : CachingSession(model->capabilities(), options.cache),
          model_(std::move(model)),
          chooser_(model_->spec().seed, model_->spec().n_replicas,
                   options.draw_salt),
          echo_replica_(options.echo_replica) {}

  protected:
    TopKResponse transport_query(const std::string& context,
                                 const BiasSpec& bias, int k) override {
        return model_->api_query(context, bias, k, chooser_.next(),
                                 echo_replica_);
    }

  private:
    std::shared_ptr<const MockModel> model_;
    ReplicaChooser chooser_;
    bool echo_replica_;
};

}  // namespace

std::unique_ptr<ApiSession> make_in_process_session(
    std::shared_ptr<const MockModel> model, InProcessOptions options) {
    return std::make_unique<InProcessSession>(std::move(model), options);
}

}  // namespace llmimg
