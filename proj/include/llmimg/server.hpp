#pragma once

// HTTP server exposing a MockModel as a provider-style API.
//
//   POST /v1/query          {"context", "logit_bias": {"17": 100.0, ...},
//                            "top_logprobs": k, "echo_replica": bool}
//                        -> {"model_id", "top_logprobs":
//                            [{"token": 17, "logprob": -0.03}, ...],
//                            "replica_hint"?}
//   GET  /v1/capabilities -> {"v", "k_max", "beta_max", "stochastic",
//                            "model_id"}
//   GET  /healthz         -> {"status": "ok"}
//
// Validation failures return 400 with {"error": {"code", "message"}} where
// code is one of bias_too_large, k_too_large, bad_token_id, bad_request.
// Logprobs are serialized with 17 significant digits so the client parses
// back the exact doubles the model computed.

#include <cstdint>
#include <memory>
#include <string>

#include "llmimg/mock_model.hpp"

namespace llmimg {

struct ServeOptions {
    std::string host = "127.0.0.1";
    int port = 0;                // 0 = pick a free port
    bool allow_echo_replica = true;
    double rate_limit_rps = 0;   // 0 = unlimited
    uint64_t draw_salt = 0;      // replica-draw stream salt (matches the
                                 // in-process session default)
};

class MockServer {
  public:
    MockServer(std::shared_ptr<const MockModel> model, ServeOptions options);
    ~MockServer();

    MockServer(const MockServer&) = delete;
    MockServer& operator=(const MockServer&) = delete;

    // Binds and serves on a background thread; raises BindFailure.
    void start();
    void stop();

    int port() const;
    std::string base_url() const;
    uint64_t requests_served() const;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace llmimg
