#include "llmimg/errors.hpp"

namespace llmimg {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument:          return "InvalidArgument";
        case ErrorCode::domain_error:              return "DomainError";
        case ErrorCode::degenerate_input:          return "DegenerateInput";
        case ErrorCode::shape_mismatch:            return "ShapeMismatch";
        case ErrorCode::singular_system:           return "SingularSystem";
        case ErrorCode::numerical_instability:     return "NumericalInstability";
        case ErrorCode::biased_set_mismatch:       return "BiasedSetMismatch";
        case ErrorCode::top_token_displaced:       return "TopTokenDisplaced";
        case ErrorCode::missing_tokens:            return "MissingTokens";
        case ErrorCode::budget_exhausted:          return "BudgetExhausted";
        case ErrorCode::reference_tokens_unstable: return "ReferenceTokensUnstable";
        case ErrorCode::vocab_exhausted:           return "VocabExhausted";
        case ErrorCode::out_of_image:              return "OutOfImage";
        case ErrorCode::no_plateau:                return "NoPlateau";
        case ErrorCode::unknown_replica:           return "UnknownReplica";
        case ErrorCode::bias_too_large:            return "BiasTooLarge";
        case ErrorCode::k_too_large:               return "KTooLarge";
        case ErrorCode::bad_token_id:              return "BadTokenId";
        case ErrorCode::protocol_error:            return "ProtocolError";
        case ErrorCode::capability_mismatch:       return "CapabilityMismatch";
        case ErrorCode::auth_error:                return "AuthError";
        case ErrorCode::bind_failure:              return "BindFailure";
        case ErrorCode::io_error:                  return "IoError";
    }
    return "UnknownError";
}

int error_exit_code(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument:
        case ErrorCode::domain_error:
        case ErrorCode::degenerate_input:
        case ErrorCode::shape_mismatch:
        case ErrorCode::capability_mismatch:
        case ErrorCode::bias_too_large:
        case ErrorCode::k_too_large:
        case ErrorCode::bad_token_id:
        case ErrorCode::unknown_replica:
            return 2;
        case ErrorCode::protocol_error:
        case ErrorCode::auth_error:
        case ErrorCode::bind_failure:
        case ErrorCode::io_error:
            return 3;
        case ErrorCode::singular_system:
        case ErrorCode::numerical_instability:
        case ErrorCode::biased_set_mismatch:
        case ErrorCode::top_token_displaced:
        case ErrorCode::missing_tokens:
        case ErrorCode::budget_exhausted:
        case ErrorCode::reference_tokens_unstable:
        case ErrorCode::vocab_exhausted:
        case ErrorCode::out_of_image:
        case ErrorCode::no_plateau:
            return 4;
    }
    return 1;
}

}  // namespace llmimg
