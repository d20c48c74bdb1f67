#pragma once

// Deterministic mock softmax-head model.
//
// The mock stands in for a real LLM API: it owns a seeded output matrix
// W (v x d), derives a unit-norm hidden state h(context) from a hash of the
// context string, and serves top-k logprobs with additive logit bias exactly
// the way the extraction code expects a provider endpoint to behave. Because
// every byte is a pure function of the spec, tests can compare extraction
// results against oracle distributions to machine precision.

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "llmimg/algebra.hpp"
#include "llmimg/types.hpp"

namespace llmimg {

struct MockModelSpec {
    int64_t v = 0;              // vocabulary size
    int d = 0;                  // embedding size, 2 <= d < v
    uint64_t seed = 0;
    int n_replicas = 1;         // >= 1; queries draw a replica uniformly
    double replica_noise = 0.0; // stddev of per-replica weight perturbation
    int k_max = 5;              // largest top-k a query may request
    double beta_max = 100.0;    // largest |logit bias| accepted
    double logit_scale = 8.0;   // ||h|| = logit_scale, so logits ~ N(0, scale^2/d)
    std::string model_id;       // defaults to mock-<seed>-v<v>-d<d>

    void validate() const;
    std::string resolved_model_id() const;

    static MockModelSpec from_json_text(const std::string& text);
    std::string to_json_text() const;
};

struct BiasSpec {
    std::map<int32_t, double> entries;  // token id -> additive logit bias
};

struct TopEntry {
    int32_t token = 0;
    double logprob = 0.0;
};

struct TopKResponse {
    std::vector<TopEntry> entries;        // sorted by logprob desc, id asc
    std::optional<int32_t> replica_hint;  // only when echo is enabled
    std::string raw_body;                 // HTTP transport keeps the raw JSON

    const TopEntry* find(int32_t token) const;
};

struct Capabilities {
    int64_t vocab_size = 0;
    int32_t k_max = 0;
    double beta_max = 0.0;
    bool stochastic = false;  // more than one replica behind the endpoint
    std::string model_id;
};

// Checkpoint-update kinds used to build families of related models.
enum class UpdateKindType {
    clone,             // byte-identical re-instantiation
    hidden_prompt,     // same weights, contexts get a hidden suffix
    partial_finetune,  // same output matrix, re-derived hidden states
    lora,              // W += A B with rank(A B) = rank
    full_finetune,     // W += dense noise
};

struct UpdateKind {
    UpdateKindType type = UpdateKindType::clone;
    std::string suffix;    // hidden_prompt
    int rank = 0;          // lora
    double noise = 0.0;    // full_finetune (relative to W's entry scale)
    uint64_t salt = 0;     // distinguishes repeated kinds in one family

    static UpdateKind clone();
    static UpdateKind hidden_prompt(std::string suffix);
    static UpdateKind partial_finetune(uint64_t salt = 0);
    static UpdateKind lora(int rank, uint64_t salt = 0);
    static UpdateKind full_finetune(double noise, uint64_t salt = 0);

    const char* name() const;
};

class MockModel {
  public:
    explicit MockModel(MockModelSpec spec);

    // Test hook: a model with an explicit output matrix (rank-deficient
    // fixtures, hand-written worked examples). Spec fields v and d are
    // taken from the matrix shape and exempted from the d >= 2 invariant.
    static std::shared_ptr<const MockModel> with_weights(Eigen::MatrixXd w,
                                                         MockModelSpec spec);

    const MockModelSpec& spec() const { return spec_; }
    Capabilities capabilities() const;

    // Deterministic hidden state for a context: unit vector scaled by
    // logit_scale, derived from fnv1a64(context) and the model seed.
    Eigen::VectorXd embedding(const std::string& context) const;

    // l = W_replica h(context); replica 0 is the base model.
    LogitVector full_logits(const std::string& context, int replica = 0) const;

    // softmax(full_logits): the ground truth extraction is judged against.
    ProbVector oracle_distribution(const std::string& context,
                                   int replica = 0) const;

    // Top-k logprobs of softmax(l + bias) for a fixed replica. Ties break
    // toward the smaller token id. Validates k and the bias spec the same
    // way the HTTP server does.
    TopKResponse api_query(const std::string& context, const BiasSpec& bias,
                           int k, int replica, bool echo_replica = false) const;

    // One model per kind, each derived from the same base spec.
    static std::vector<std::shared_ptr<const MockModel>> make_checkpoint_family(
        const MockModelSpec& spec, const std::vector<UpdateKind>& kinds);

    const Eigen::MatrixXd& weights() const { return w_; }

  private:
    struct Caches {
        std::mutex mutex;
        std::unordered_map<std::string, Eigen::VectorXd> embeddings;
        std::map<std::pair<std::string, int>, Eigen::VectorXd> logits;
    };

    MockModelSpec spec_;
    Eigen::MatrixXd w_;                          // v x d
    std::vector<Eigen::MatrixXd> replica_delta_; // n_replicas entries; [0] is zero
    std::string context_suffix_;                 // hidden_prompt
    uint64_t embed_salt_ = 0;                    // partial_finetune
    mutable std::unique_ptr<Caches> caches_;

    Eigen::VectorXd logits_vector(const std::string& context, int replica) const;
};

}  // namespace llmimg
