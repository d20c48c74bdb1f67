#pragma once

// Full-vocabulary distribution extraction from a top-k + logit-bias API.
//
// Every strategy pushes a chosen token batch to the top of the ranking with
// a large additive bias, reads the returned (biased) top-k logprobs and
// algebraically removes the bias:
//
//   fast        ~ v/k calls      closed-form unbias from one batch; the
//                                 denominator amplifies rounding by e^beta,
//                                 so it is precise only for moderate bias
//   stable      ~ v/(k-1) calls  one unbiased call pins the top token's
//                                 probability, then every batch is expressed
//                                 relative to it; exact at any usable bias
//   stochastic  ~ n*v/(k-2)      for APIs that route queries to one of n
//                                 slightly different replicas: responses are
//                                 grouped by an invariant fingerprint (the
//                                 unbiased gap between the top two tokens,
//                                 recoverable from every biased response)
//                                 and each group is completed independently
//   logprob-free v*ceil(log2(beta_max/eps)) calls
//                                 no logprobs at all: bisect on the bias
//                                 that flips the argmax to recover each
//                                 token's logit gap to the top token

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "llmimg/session.hpp"
#include "llmimg/types.hpp"

namespace llmimg {

// Fast-path default bias. The closed-form denominator e^b(1-S)+S computes
// 1-S in doubles, so returned-probability rounding (~1e-15) is amplified by
// e^b: measured error is ~1e-10 at b=20 but ~0.6 at b=40. 20 is far above
// any realistic logit spread yet leaves six orders of margin to the 1e-6
// accuracy target; pass an explicit bias to override.
inline constexpr double kFastBiasCap = 20.0;

struct FastOptions {
    std::optional<double> bias;  // default min(beta_max, kFastBiasCap)
    int concurrency = 8;
};

struct StableOptions {
    std::optional<double> bias;  // default beta_max
    int concurrency = 8;
    int max_retries = 5;         // bias halvings when the top token drops out
};

struct StochasticOptions {
    std::optional<double> bias;        // default beta_max
    std::optional<int> n_hint;         // expected replica count
    std::optional<uint64_t> call_budget;  // default 10 * n * ceil((v-2)/(k-2))
    bool use_replica_hint = false;     // trust an echoed replica id if present
};

struct LogprobFreeOptions {
    double epsilon = 1e-6;  // logit-gap resolution
    int concurrency = 8;
};

// Closed-form unbias of one biased batch: given the returned probabilities
// p'_i of the tokens biased by beta,
//   p_i = p'_i / (e^beta - e^beta * S + S),   S = sum_j p'_j.
// Raises NumericalInstability when the denominator is <= 0 or < 1e-12.
std::vector<std::pair<int32_t, double>> unbias_fast(
    const std::vector<std::pair<int32_t, double>>& biased, double beta);

// Reference-anchored unbias: p_i = exp(log p'_i - beta - log p'_top + log p_top)
// where p'_top is the biased and p_top the unbiased probability of the
// unbiased-top token.
double unbias_stable(double log_p_biased_i, double log_p_biased_top,
                     double log_p_top, double beta);

// Replica fingerprint: log p(top) - log p(second), computed from any
// response that ranks `top` first and `second` second. Invariant under
// biasing other tokens because the normalizer cancels.
double fingerprint(const TopKResponse& resp, int32_t top_token,
                   int32_t second_token);

ProbVector extract_fast(ApiSession& session, const std::string& context,
                        const FastOptions& options = {});

ProbVector extract_stable(ApiSession& session, const std::string& context,
                          const StableOptions& options = {});

struct StochasticOutput {
    double fingerprint = 0.0;          // full-precision first sighting
    std::optional<int32_t> replica_hint;
    bool complete = false;
    int64_t tokens_seen = 0;
    std::optional<ProbVector> distribution;  // only when complete
};

struct StochasticResult {
    std::vector<StochasticOutput> outputs;  // completed first
    uint64_t calls_used = 0;
    int completed_index = -1;               // into outputs
};

StochasticResult extract_stochastic(ApiSession& session,
                                    const std::string& context,
                                    const StochasticOptions& options = {});

struct LogprobFreeResult {
    ProbVector distribution;
    Eigen::VectorXd logit_gaps;            // gap to the top token, >= 0
    std::vector<int32_t> unargmaxable;     // gap exceeded beta_max; gap is a
                                           // lower bound for these tokens
    int32_t top_token = 0;
};

LogprobFreeResult extract_logprob_free(ApiSession& session,
                                       const std::string& context,
                                       const LogprobFreeOptions& options = {});

// Stable-strategy probe of an arbitrary token subset: one unbiased call
// (skipped when the caller passes the response it already holds) plus
// ceil(|tokens|/(k-1)) biased batches. Returns unbiased log-probabilities.
// Shared by extract_stable and image-assisted extraction.
struct StableProbe {
    int32_t top_token = 0;
    double top_logprob = 0.0;
    std::vector<TopEntry> unbiased_entries;           // the pinning response
    std::vector<std::pair<int32_t, double>> log_probs;  // probed tokens
};

StableProbe stable_probe(ApiSession& session, const std::string& context,
                         const std::vector<int32_t>& tokens,
                         const StableOptions& options = {},
                         const TopKResponse* pinned_unbiased = nullptr);

// Deterministic parallel map over [0, n): fn(i) may throw; the first
// exception (lowest index) is rethrown after all workers join.
void parallel_for(int64_t n, int concurrency,
                  const std::function<void(int64_t)>& fn);

}  // namespace llmimg
