#include "llmimg/mock_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "llmimg/rng.hpp"

namespace llmimg {

namespace {

// Domain-separation tags for the derived splitmix64 streams.
constexpr uint64_t kTagWeights = 0x57454947ull;        // "WEIG"
constexpr uint64_t kTagReplica = 0x5245504cull;        // "REPL"
constexpr uint64_t kTagEmbed = 0x454d4244ull;          // "EMBD"
constexpr uint64_t kTagPartial = 0x50415254ull;        // "PART"
constexpr uint64_t kTagLoraA = 0x4c4f5241ull;          // "LORA"
constexpr uint64_t kTagLoraB = 0x4c4f5242ull;          // "LORB"
constexpr uint64_t kTagFull = 0x46554c4cull;           // "FULL"

Eigen::MatrixXd gaussian_matrix(uint64_t seed, Eigen::Index rows,
                                Eigen::Index cols, double stddev) {
    GaussianStream g(seed);
    Eigen::MatrixXd m(rows, cols);
    // Column-major fill order, fixed forever: reordering would change every
    // seeded fixture.
    for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) {
            m(r, c) = g.next() * stddev;
        }
    }
    return m;
}

}  // namespace

void MockModelSpec::validate() const {
    if (v < 3) {
        raise(ErrorCode::invalid_argument, "mock spec: v must be >= 3");
    }
    if (d < 2 || static_cast<int64_t>(d) >= v) {
        raise(ErrorCode::invalid_argument, "mock spec: need 2 <= d < v");
    }
    if (n_replicas < 1) {
        raise(ErrorCode::invalid_argument, "mock spec: n_replicas must be >= 1");
    }
    if (replica_noise < 0.0 || !std::isfinite(replica_noise)) {
        raise(ErrorCode::invalid_argument, "mock spec: replica_noise must be >= 0");
    }
    if (k_max < 1) {
        raise(ErrorCode::invalid_argument, "mock spec: k_max must be >= 1");
    }
    if (!(beta_max > 0.0) || !std::isfinite(beta_max)) {
        raise(ErrorCode::invalid_argument, "mock spec: beta_max must be > 0");
    }
    if (!(logit_scale > 0.0) || !std::isfinite(logit_scale)) {
        raise(ErrorCode::invalid_argument, "mock spec: logit_scale must be > 0");
    }
}

std::string MockModelSpec::resolved_model_id() const {
    if (!model_id.empty()) {
        return model_id;
    }
    return "mock-" + std::to_string(seed) + "-v" + std::to_string(v) + "-d" +
           std::to_string(d);
}

MockModelSpec MockModelSpec::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::invalid_argument,
              std::string("mock spec: invalid JSON: ") + e.what());
    }
    MockModelSpec spec;
    try {
        spec.v = j.at("v").get<int64_t>();
        spec.d = j.at("d").get<int>();
        spec.seed = j.at("seed").get<uint64_t>();
        spec.n_replicas = j.value("n_replicas", 1);
        spec.replica_noise = j.value("replica_noise", 0.0);
        spec.k_max = j.value("k_max", 5);
        spec.beta_max = j.value("beta_max", 100.0);
        spec.logit_scale = j.value("logit_scale", 8.0);
        spec.model_id = j.value("model_id", std::string());
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::invalid_argument,
              std::string("mock spec: missing or mistyped field: ") + e.what());
    }
    spec.validate();
    return spec;
}

std::string MockModelSpec::to_json_text() const {
    nlohmann::json j{
        {"v", v},
        {"d", d},
        {"seed", seed},
        {"n_replicas", n_replicas},
        {"replica_noise", replica_noise},
        {"k_max", k_max},
        {"beta_max", beta_max},
        {"logit_scale", logit_scale},
        {"model_id", resolved_model_id()},
    };
    return j.dump(2);
}

const TopEntry* TopKResponse::find(int32_t token) const {
    for (const auto& e : entries) {
        if (e.token == token) {
            return &e;
        }
    }
    return nullptr;
}

UpdateKind UpdateKind::clone() { return UpdateKind{}; }

UpdateKind UpdateKind::hidden_prompt(std::string suffix) {
    UpdateKind k;
    k.type = UpdateKindType::hidden_prompt;
    k.suffix = std::move(suffix);
    return k;
}

UpdateKind UpdateKind::partial_finetune(uint64_t salt) {
    UpdateKind k;
    k.type = UpdateKindType::partial_finetune;
    k.salt = salt;
    return k;
}

UpdateKind UpdateKind::lora(int rank, uint64_t salt) {
    UpdateKind k;
    k.type = UpdateKindType::lora;
    k.rank = rank;
    k.salt = salt;
    return k;
}

UpdateKind UpdateKind::full_finetune(double noise, uint64_t salt) {
    UpdateKind k;
    k.type = UpdateKindType::full_finetune;
    k.noise = noise;
    k.salt = salt;
    return k;
}

const char* UpdateKind::name() const {
    switch (type) {
        case UpdateKindType::clone:            return "clone";
        case UpdateKindType::hidden_prompt:    return "hidden_prompt";
        case UpdateKindType::partial_finetune: return "partial_finetune";
        case UpdateKindType::lora:             return "lora";
        case UpdateKindType::full_finetune:    return "full_finetune";
    }
    return "unknown";
}

MockModel::MockModel(MockModelSpec spec)
    : spec_(std::move(spec)), caches_(std::make_unique<Caches>()) {
    spec_.validate();
    // Entries N(0, 1/d) so that logits W h have variance logit_scale^2 / d
    // per coordinate on a unit-direction h scaled by logit_scale.
    w_ = gaussian_matrix(mix_seed(spec_.seed, kTagWeights), spec_.v, spec_.d,
                         1.0 / std::sqrt(static_cast<double>(spec_.d)));
    replica_delta_.resize(spec_.n_replicas);
    replica_delta_[0] = Eigen::MatrixXd::Zero(spec_.v, spec_.d);
    for (int r = 1; r < spec_.n_replicas; ++r) {
        replica_delta_[r] =
            gaussian_matrix(mix_seed(spec_.seed, mix_seed(kTagReplica, r)),
                            spec_.v, spec_.d, spec_.replica_noise);
    }
}

std::shared_ptr<const MockModel> MockModel::with_weights(Eigen::MatrixXd w,
                                                         MockModelSpec spec) {
    spec.v = w.rows();
    spec.d = static_cast<int>(w.cols());
    // Bypass the public constructor's validation: explicit weights may have
    // any d >= 1, including the rank-1 fixtures.
    if (spec.v < 3 || spec.d < 1) {
        raise(ErrorCode::invalid_argument,
              "with_weights: need at least 3 rows and 1 column");
    }
    MockModelSpec inner = spec;
    inner.d = 2;  // placate validate(); real shape comes from the matrix
    if (inner.v <= inner.d) inner.d = static_cast<int>(inner.v) - 1;
    auto model = std::shared_ptr<MockModel>(new MockModel(std::move(inner)));
    model->spec_ = spec;
    model->w_ = std::move(w);
    model->replica_delta_.assign(
        spec.n_replicas, Eigen::MatrixXd::Zero(spec.v, spec.d));
    model->caches_ = std::make_unique<Caches>();
    return model;
}

Capabilities MockModel::capabilities() const {
    Capabilities caps;
    caps.vocab_size = spec_.v;
    caps.k_max = spec_.k_max;
    caps.beta_max = spec_.beta_max;
    caps.stochastic = spec_.n_replicas > 1;
    caps.model_id = spec_.resolved_model_id();
    return caps;
}

Eigen::VectorXd MockModel::embedding(const std::string& context) const {
    {
        std::lock_guard<std::mutex> lock(caches_->mutex);
        auto it = caches_->embeddings.find(context);
        if (it != caches_->embeddings.end()) {
            return it->second;
        }
    }
    const std::string effective = context + context_suffix_;
    const uint64_t stream_seed = mix_seed(
        mix_seed(spec_.seed, kTagEmbed ^ embed_salt_), fnv1a64(effective));
    GaussianStream g(stream_seed);
    Eigen::VectorXd h(spec_.d);
    double norm = 0.0;
    do {
        for (int i = 0; i < spec_.d; ++i) {
            h(i) = g.next();
        }
        norm = h.norm();
    } while (norm == 0.0);
    h *= spec_.logit_scale / norm;
    {
        std::lock_guard<std::mutex> lock(caches_->mutex);
        caches_->embeddings.emplace(context, h);
    }
    return h;
}

Eigen::VectorXd MockModel::logits_vector(const std::string& context,
                                         int replica) const {
    if (replica < 0 || replica >= spec_.n_replicas) {
        raise(ErrorCode::unknown_replica,
              "replica " + std::to_string(replica) + " out of range [0, " +
                  std::to_string(spec_.n_replicas) + ")");
    }
    {
        std::lock_guard<std::mutex> lock(caches_->mutex);
        auto it = caches_->logits.find({context, replica});
        if (it != caches_->logits.end()) {
            return it->second;
        }
    }
    const Eigen::VectorXd h = embedding(context);
    Eigen::VectorXd l = w_ * h;
    if (replica > 0) {
        l += replica_delta_[replica] * h;
    }
    {
        std::lock_guard<std::mutex> lock(caches_->mutex);
        caches_->logits.emplace(std::make_pair(context, replica), l);
    }
    return l;
}

LogitVector MockModel::full_logits(const std::string& context,
                                   int replica) const {
    return LogitVector(logits_vector(context, replica));
}

ProbVector MockModel::oracle_distribution(const std::string& context,
                                          int replica) const {
    return softmax(full_logits(context, replica));
}

TopKResponse MockModel::api_query(const std::string& context,
                                  const BiasSpec& bias, int k, int replica,
                                  bool echo_replica) const {
    if (k < 1 || k > spec_.k_max) {
        raise(ErrorCode::k_too_large,
              "k=" + std::to_string(k) + " outside [1, " +
                  std::to_string(spec_.k_max) + "]");
    }
    if (static_cast<int>(bias.entries.size()) > spec_.k_max) {
        raise(ErrorCode::k_too_large,
              "bias has " + std::to_string(bias.entries.size()) +
                  " entries, limit is k_max=" + std::to_string(spec_.k_max));
    }
    for (const auto& [token, b] : bias.entries) {
        if (token < 0 || static_cast<int64_t>(token) >= spec_.v) {
            raise(ErrorCode::bad_token_id,
                  "token id " + std::to_string(token) + " outside [0, " +
                      std::to_string(spec_.v) + ")");
        }
        if (!std::isfinite(b) || std::abs(b) > spec_.beta_max) {
            raise(ErrorCode::bias_too_large,
                  "bias " + std::to_string(b) + " for token " +
                      std::to_string(token) + " outside [-" +
                      std::to_string(spec_.beta_max) + ", " +
                      std::to_string(spec_.beta_max) + "]");
        }
    }

    Eigen::VectorXd l = logits_vector(context, replica);
    for (const auto& [token, b] : bias.entries) {
        l(token) += b;
    }
    const double lse = log_sum_exp(l);

    const int count = static_cast<int>(
        std::min<int64_t>(k, static_cast<int64_t>(l.size())));
    std::vector<int32_t> idx(l.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + count, idx.end(),
                      [&l](int32_t a, int32_t b) {
                          if (l(a) != l(b)) return l(a) > l(b);
                          return a < b;  // ties toward the smaller id
                      });

    TopKResponse resp;
    resp.entries.reserve(count);
    for (int i = 0; i < count; ++i) {
        resp.entries.push_back(TopEntry{idx[i], l(idx[i]) - lse});
    }
    if (echo_replica) {
        resp.replica_hint = replica;
    }
    return resp;
}

std::vector<std::shared_ptr<const MockModel>> MockModel::make_checkpoint_family(
    const MockModelSpec& spec, const std::vector<UpdateKind>& kinds) {
    std::vector<std::shared_ptr<const MockModel>> family;
    family.reserve(kinds.size());
    for (const UpdateKind& kind : kinds) {
        auto model = std::make_shared<MockModel>(spec);
        switch (kind.type) {
            case UpdateKindType::clone:
                break;
            case UpdateKindType::hidden_prompt:
                if (kind.suffix.empty()) {
                    raise(ErrorCode::invalid_argument,
                          "hidden_prompt kind needs a non-empty suffix");
                }
                model->context_suffix_ = kind.suffix;
                break;
            case UpdateKindType::partial_finetune:
                model->embed_salt_ = mix_seed(kTagPartial, kind.salt + 1);
                break;
            case UpdateKindType::lora: {
                if (kind.rank < 1 || kind.rank >= spec.d) {
                    raise(ErrorCode::invalid_argument,
                          "lora kind needs 1 <= rank < d");
                }
                // A (v x r) entries N(0, 1/v), B (r x d) entries N(0, 1/d):
                // sigma(A B) = O(1), well separated from both sigma_1(W)
                // (~ sqrt(v/d)) and the rank tolerance.
                const Eigen::MatrixXd a = gaussian_matrix(
                    mix_seed(spec.seed, mix_seed(kTagLoraA, kind.salt)),
                    spec.v, kind.rank, 1.0 / std::sqrt(double(spec.v)));
                const Eigen::MatrixXd b = gaussian_matrix(
                    mix_seed(spec.seed, mix_seed(kTagLoraB, kind.salt)),
                    kind.rank, spec.d, 1.0 / std::sqrt(double(spec.d)));
                model->w_ += a * b;
                break;
            }
            case UpdateKindType::full_finetune: {
                if (!(kind.noise > 0.0)) {
                    raise(ErrorCode::invalid_argument,
                          "full_finetune kind needs noise > 0");
                }
                model->w_ += gaussian_matrix(
                    mix_seed(spec.seed, mix_seed(kTagFull, kind.salt)),
                    spec.v, spec.d,
                    kind.noise / std::sqrt(static_cast<double>(spec.d)));
                break;
            }
        }
        family.push_back(std::move(model));
    }
    return family;
}

}  // namespace llmimg
