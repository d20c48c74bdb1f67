#pragma once

#include <stdexcept>
#include <string>

namespace llmimg {

enum class ErrorCode {
    invalid_argument,
    domain_error,
    degenerate_input,
    shape_mismatch,
    singular_system,
    numerical_instability,
    biased_set_mismatch,
    top_token_displaced,
    missing_tokens,
    budget_exhausted,
    reference_tokens_unstable,
    vocab_exhausted,
    out_of_image,
    no_plateau,
    unknown_replica,
    bias_too_large,
    k_too_large,
    bad_token_id,
    protocol_error,
    capability_mismatch,
    auth_error,
    bind_failure,
    io_error,
};

const char* error_code_name(ErrorCode code);

// CLI exit buckets: 2 = validation/config, 3 = protocol/API, 4 = numerical.
int error_exit_code(ErrorCode code);

class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const { return code_; }

  private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace llmimg
