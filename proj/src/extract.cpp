#include "llmimg/extract.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "llmimg/telemetry.hpp"

namespace llmimg {

namespace {

// Tokens 0..v-1 except those in `excluded` (sorted), chunked into batches of
// `batch_size`, ascending token id, last batch possibly short.
std::vector<std::vector<int32_t>> partition_tokens(
    int64_t v, const std::vector<int32_t>& excluded, int batch_size) {
    std::vector<std::vector<int32_t>> batches;
    std::vector<int32_t> current;
    current.reserve(batch_size);
    for (int64_t t = 0; t < v; ++t) {
        if (std::binary_search(excluded.begin(), excluded.end(),
                               static_cast<int32_t>(t))) {
            continue;
        }
        current.push_back(static_cast<int32_t>(t));
        if (static_cast<int>(current.size()) == batch_size) {
            batches.push_back(std::move(current));
            current = {};
            current.reserve(batch_size);
        }
    }
    if (!current.empty()) {
        batches.push_back(std::move(current));
    }
    return batches;
}

double default_bias(const Capabilities& caps, const std::optional<double>& opt,
                    double cap) {
    double b = opt.value_or(std::min(caps.beta_max, cap));
    if (!(b > 0.0) || b > caps.beta_max) {
        raise(ErrorCode::invalid_argument,
              "bias must lie in (0, beta_max=" + std::to_string(caps.beta_max) +
                  "]");
    }
    return b;
}

std::string batch_to_string(const std::vector<int32_t>& batch) {
    std::string s = "{";
    for (std::size_t i = 0; i < batch.size() && i < 8; ++i) {
        if (i) s += ",";
        s += std::to_string(batch[i]);
    }
    if (batch.size() > 8) s += ",...";
    return s + "}";
}

}  // namespace

void parallel_for(int64_t n, int concurrency,
                  const std::function<void(int64_t)>& fn) {
    if (concurrency < 1) {
        raise(ErrorCode::invalid_argument, "concurrency must be >= 1");
    }
    if (n <= 0) {
        return;
    }
    if (concurrency == 1 || n == 1) {
        for (int64_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    const int workers = static_cast<int>(std::min<int64_t>(concurrency, n));
    std::atomic<int64_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    int64_t first_error_index = -1;

    auto body = [&] {
        while (true) {
            const int64_t i = next.fetch_add(1, std::memory_order_relaxed);
            if (i >= n) {
                return;
            }
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (first_error_index < 0 || i < first_error_index) {
                    first_error = std::current_exception();
                    first_error_index = i;
                }
            }
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back(body);
    }
    for (auto& t : pool) {
        t.join();
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }
}

std::vector<std::pair<int32_t, double>> unbias_fast(
    const std::vector<std::pair<int32_t, double>>& biased, double beta) {
    if (biased.empty()) {
        raise(ErrorCode::invalid_argument, "unbias_fast: empty batch");
    }
    if (!(beta > 0.0) || !std::isfinite(beta)) {
        raise(ErrorCode::invalid_argument, "unbias_fast: beta must be > 0");
    }
    double s = 0.0;
    for (const auto& [token, p] : biased) {
        if (!(p > 0.0) || p > 1.0) {
            raise(ErrorCode::domain_error,
                  "unbias_fast: biased probability outside (0, 1]");
        }
        s += p;
    }
    const double eb = std::exp(beta);
    const double denom = eb - eb * s + s;
    if (!(denom > 0.0) || denom < 1e-12) {
        raise(ErrorCode::numerical_instability,
              "unbias_fast: denominator " + std::to_string(denom) +
                  " at beta=" + std::to_string(beta) +
                  "; use a smaller bias or the stable strategy");
    }
    std::vector<std::pair<int32_t, double>> out;
    out.reserve(biased.size());
    for (const auto& [token, p] : biased) {
        out.emplace_back(token, p / denom);
    }
    return out;
}

double unbias_stable(double log_p_biased_i, double log_p_biased_top,
                     double log_p_top, double beta) {
    return std::exp(log_p_biased_i - beta - log_p_biased_top + log_p_top);
}

double fingerprint(const TopKResponse& resp, int32_t top_token,
                   int32_t second_token) {
    // The reference tokens may be ranked anywhere: biased tokens outrank
    // them in batch responses, yet the gap is invariant because the
    // normalizer cancels (neither reference carries a bias).
    const TopEntry* top = resp.find(top_token);
    const TopEntry* second = resp.find(second_token);
    if (top == nullptr || second == nullptr) {
        raise(ErrorCode::missing_tokens,
              "fingerprint: response lacks reference token " +
                  std::to_string(top == nullptr ? top_token : second_token));
    }
    return top->logprob - second->logprob;
}

ProbVector extract_fast(ApiSession& session, const std::string& context,
                        const FastOptions& options) {
    const Capabilities& caps = session.capabilities();
    const int64_t v = caps.vocab_size;
    const int k = caps.k_max;
    const double beta = default_bias(caps, options.bias, kFastBiasCap);

    const auto batches = partition_tokens(v, {}, k);
    Eigen::VectorXd p = Eigen::VectorXd::Zero(v);

    parallel_for(
        static_cast<int64_t>(batches.size()), options.concurrency,
        [&](int64_t bi) {
            const auto& batch = batches[static_cast<std::size_t>(bi)];
            BiasSpec bias;
            for (int32_t t : batch) {
                bias.entries.emplace(t, beta);
            }
            const TopKResponse resp =
                session.query(context, bias, static_cast<int>(batch.size()));
            std::vector<std::pair<int32_t, double>> biased;
            biased.reserve(batch.size());
            for (int32_t t : batch) {
                const TopEntry* e = resp.find(t);
                if (e == nullptr) {
                    raise(ErrorCode::biased_set_mismatch,
                          "extract_fast: biased token " + std::to_string(t) +
                              " missing from top-k of batch " +
                              batch_to_string(batch) +
                              "; beta_max may be below the logit spread");
                }
                biased.emplace_back(t, std::exp(e->logprob));
            }
            for (const auto& [t, prob] : unbias_fast(biased, beta)) {
                p(t) = prob;
            }
        });

    const double sum = p.sum();
    if (!std::isfinite(sum) || std::abs(sum - 1.0) > 1e-3) {
        raise(ErrorCode::numerical_instability,
              "extract_fast: assembled mass " + std::to_string(sum) +
                  " at beta=" + std::to_string(beta) +
                  "; bias too large for the closed-form unbias");
    }
    // Each batch shares one denominator, so its mass carries a common
    // relative error ~ e^beta * 1e-15; renormalizing removes the systematic
    // part and leaves ~1e-10 at the default bias.
    p /= sum;
    return ProbVector(std::move(p));
}

StableProbe stable_probe(ApiSession& session, const std::string& context,
                         const std::vector<int32_t>& tokens,
                         const StableOptions& options,
                         const TopKResponse* pinned_unbiased) {
    const Capabilities& caps = session.capabilities();
    const int64_t v = caps.vocab_size;
    const int k = caps.k_max;
    if (k < 2) {
        raise(ErrorCode::capability_mismatch,
              "stable strategy needs k_max >= 2");
    }
    const double beta = default_bias(caps, options.bias, caps.beta_max);

    StableProbe probe;
    if (pinned_unbiased != nullptr && !pinned_unbiased->entries.empty()) {
        probe.top_token = pinned_unbiased->entries[0].token;
        probe.top_logprob = pinned_unbiased->entries[0].logprob;
        probe.unbiased_entries = pinned_unbiased->entries;
    } else {
        const TopKResponse unbiased =
            session.query(context, BiasSpec{}, std::min<int64_t>(k, v));
        probe.top_token = unbiased.entries[0].token;
        probe.top_logprob = unbiased.entries[0].logprob;
        probe.unbiased_entries = unbiased.entries;
    }

    std::vector<int32_t> wanted;
    wanted.reserve(tokens.size());
    for (int32_t t : tokens) {
        if (t < 0 || static_cast<int64_t>(t) >= v) {
            raise(ErrorCode::invalid_argument,
                  "stable_probe: token id out of range");
        }
        if (t != probe.top_token) {
            wanted.push_back(t);
        }
    }
    std::sort(wanted.begin(), wanted.end());
    wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());

    std::vector<std::vector<int32_t>> batches;
    for (std::size_t i = 0; i < wanted.size(); i += (k - 1)) {
        batches.emplace_back(
            wanted.begin() + i,
            wanted.begin() + std::min(wanted.size(), i + (k - 1)));
    }

    std::vector<std::vector<std::pair<int32_t, double>>> per_batch(
        batches.size());

    parallel_for(
        static_cast<int64_t>(batches.size()), options.concurrency,
        [&](int64_t bi) {
            const auto& batch = batches[static_cast<std::size_t>(bi)];
            double local_beta = beta;
            for (int attempt = 0;; ++attempt) {
                BiasSpec bias;
                for (int32_t t : batch) {
                    bias.entries.emplace(t, local_beta);
                }
                const TopKResponse resp = session.query(
                    context, bias, static_cast<int>(batch.size()) + 1);
                const TopEntry* top = resp.find(probe.top_token);
                if (top == nullptr) {
                    // The unbiased top token fell out of the returned set;
                    // a smaller bias keeps it in view.
                    if (attempt >= options.max_retries) {
                        raise(ErrorCode::top_token_displaced,
                              "stable probe: top token " +
                                  std::to_string(probe.top_token) +
                                  " displaced after " +
                                  std::to_string(attempt + 1) + " attempts");
                    }
                    local_beta /= 2.0;
                    continue;
                }
                auto& out = per_batch[static_cast<std::size_t>(bi)];
                out.reserve(batch.size());
                for (int32_t t : batch) {
                    const TopEntry* e = resp.find(t);
                    if (e == nullptr) {
                        raise(ErrorCode::biased_set_mismatch,
                              "stable probe: biased token " +
                                  std::to_string(t) +
                                  " missing from response for batch " +
                                  batch_to_string(batch) +
                                  "; beta_max may be below the logit spread");
                    }
                    out.emplace_back(
                        t, e->logprob - local_beta - top->logprob +
                               probe.top_logprob);
                }
                return;
            }
        });

    for (const auto& chunk : per_batch) {
        probe.log_probs.insert(probe.log_probs.end(), chunk.begin(),
                               chunk.end());
    }
    return probe;
}

ProbVector extract_stable(ApiSession& session, const std::string& context,
                          const StableOptions& options) {
    const Capabilities& caps = session.capabilities();
    const int64_t v = caps.vocab_size;

    std::vector<int32_t> all(v);
    for (int64_t t = 0; t < v; ++t) {
        all[static_cast<std::size_t>(t)] = static_cast<int32_t>(t);
    }
    const StableProbe probe = stable_probe(session, context, all, options);

    Eigen::VectorXd p = Eigen::VectorXd::Zero(v);
    p(probe.top_token) = std::exp(probe.top_logprob);
    int64_t filled = 1;
    for (const auto& [t, logp] : probe.log_probs) {
        p(t) = std::exp(logp);
        ++filled;
    }
    if (filled != v) {
        raise(ErrorCode::missing_tokens,
              "extract_stable: filled " + std::to_string(filled) + " of " +
                  std::to_string(v) + " tokens");
    }
    return ProbVector(std::move(p));
}

LogprobFreeResult extract_logprob_free(ApiSession& session,
                                       const std::string& context,
                                       const LogprobFreeOptions& options) {
    const Capabilities& caps = session.capabilities();
    const int64_t v = caps.vocab_size;
    const double beta = caps.beta_max;
    if (!(options.epsilon > 0.0) || options.epsilon >= beta) {
        raise(ErrorCode::invalid_argument,
              "logprob-free: epsilon must lie in (0, beta_max)");
    }
    const int iters = std::max(
        1, static_cast<int>(std::ceil(std::log2(beta / options.epsilon))));

    const TopKResponse argmax0 = session.query(context, BiasSpec{}, 1);
    const int32_t top = argmax0.entries[0].token;

    Eigen::VectorXd gaps = Eigen::VectorXd::Zero(v);
    std::vector<std::atomic<bool>> flagged(static_cast<std::size_t>(v));
    for (auto& f : flagged) f.store(false, std::memory_order_relaxed);

    parallel_for(v, options.concurrency, [&](int64_t t) {
        if (static_cast<int32_t>(t) == top) {
            return;  // gap 0, no search
        }
        // Invariant: argmax flips to t at bias in (lo, hi]; hi_known means
        // the upper end was actually observed to flip.
        double lo = 0.0;
        double hi = beta;
        bool hi_known = false;
        for (int it = 0; it < iters; ++it) {
            const double mid = 0.5 * (lo + hi);
            BiasSpec bias;
            bias.entries.emplace(static_cast<int32_t>(t), mid);
            const TopKResponse resp = session.query(context, bias, 1);
            if (resp.entries[0].token == static_cast<int32_t>(t)) {
                hi = mid;
                hi_known = true;
            } else {
                lo = mid;
            }
        }
        if (!hi_known) {
            // Never became argmax even at bias ~ beta_max: the true gap
            // exceeds beta_max and `lo` is only a lower bound.
            flagged[static_cast<std::size_t>(t)].store(
                true, std::memory_order_relaxed);
            gaps(t) = lo;
        } else {
            gaps(t) = 0.5 * (lo + hi);
        }
    });

    LogprobFreeResult result{
        softmax(LogitVector(-gaps)),
        std::move(gaps),
        {},
        top,
    };
    for (int64_t t = 0; t < v; ++t) {
        if (flagged[static_cast<std::size_t>(t)].load(
                std::memory_order_relaxed)) {
            result.unargmaxable.push_back(static_cast<int32_t>(t));
        }
    }
    if (!result.unargmaxable.empty()) {
        telemetry::emit("extract.logprob_free.unargmaxable",
                        {{"count", result.unargmaxable.size()}});
    }
    return result;
}

namespace {

// Accumulator for one replica during stochastic extraction.
struct ReplicaAccumulator {
    double fingerprint = 0.0;  // full precision, first sighting
    std::optional<int32_t> replica_hint;
    bool has_top_logprob = false;
    double top_logprob = 0.0;
    // log p(t) - log p(top) for every token seen so far.
    std::vector<bool> seen;
    std::vector<double> rel;
    int64_t n_seen = 0;

    explicit ReplicaAccumulator(int64_t v)
        : seen(static_cast<std::size_t>(v), false),
          rel(static_cast<std::size_t>(v), 0.0) {}

    void record(int32_t token, double rel_logp) {
        auto i = static_cast<std::size_t>(token);
        if (!seen[i]) {
            seen[i] = true;
            rel[i] = rel_logp;
            ++n_seen;
        }
    }
};

}  // namespace

StochasticResult extract_stochastic(ApiSession& session,
                                    const std::string& context,
                                    const StochasticOptions& options) {
    const Capabilities& caps = session.capabilities();
    const int64_t v = caps.vocab_size;
    const int k = caps.k_max;
    if (k < 3) {
        raise(ErrorCode::capability_mismatch,
              "stochastic strategy needs k_max >= 3");
    }
    const double beta = default_bias(caps, options.bias, caps.beta_max);
    // Responses must bypass any cache: replays would masquerade as fresh
    // replica draws. Restored on every exit path.
    struct CacheGuard {
        ApiSession& s;
        bool was;
        ~CacheGuard() { s.set_cache_enabled(was); }
    } cache_guard{session, session.cache_enabled()};
    session.set_cache_enabled(false);
    const uint64_t calls_before = session.call_count();

    if (!caps.stochastic) {
        telemetry::emit("extract.stochastic.degenerate",
                        {{"note", "endpoint advertises a single replica"}});
    }

    // -- Reference discovery: the top-2 tokens must be shared by all
    //    replicas for the fingerprint to be comparable.
    const TopKResponse first = session.query(context, BiasSpec{}, k);
    const int32_t t_top = first.entries[0].token;
    const int32_t t_second = first.entries[1].token;

    std::vector<ReplicaAccumulator> accs;
    constexpr double kMatchTol = 1e-9;

    auto find_or_create = [&](double fp, std::optional<int32_t> hint)
        -> ReplicaAccumulator& {
        for (auto& acc : accs) {
            if (std::abs(acc.fingerprint - fp) <= kMatchTol) {
                if (options.use_replica_hint && hint && acc.replica_hint &&
                    *acc.replica_hint != *hint) {
                    raise(ErrorCode::protocol_error,
                          "stochastic: fingerprint collision across distinct "
                          "replica hints");
                }
                if (hint && !acc.replica_hint) {
                    acc.replica_hint = hint;
                }
                return acc;
            }
        }
        accs.emplace_back(v);
        accs.back().fingerprint = fp;
        accs.back().replica_hint = hint;
        return accs.back();
    };

    auto register_unbiased = [&](const TopKResponse& resp)
        -> ReplicaAccumulator& {
        const double fp = fingerprint(resp, t_top, t_second);
        ReplicaAccumulator& acc = find_or_create(fp, resp.replica_hint);
        // Anchor at t_top explicitly: a replica may rank the references in
        // the other order, and rel values are defined against t_top.
        const TopEntry* top = resp.find(t_top);
        acc.has_top_logprob = true;
        acc.top_logprob = top->logprob;
        for (const TopEntry& e : resp.entries) {
            acc.record(e.token, e.logprob - top->logprob);
        }
        return acc;
    };

    auto register_batch = [&](const TopKResponse& resp,
                              const std::vector<int32_t>& batch)
        -> ReplicaAccumulator& {
        // Request k entries: k-2 biased plus the two reference tokens, which
        // stay on top among unbiased tokens because the batch excludes them.
        const TopEntry* top = resp.find(t_top);
        const TopEntry* second = resp.find(t_second);
        if (top == nullptr || second == nullptr) {
            raise(ErrorCode::reference_tokens_unstable,
                  "stochastic: a response omitted the reference tokens; the "
                  "replicas do not share a stable top-2");
        }
        const double fp = top->logprob - second->logprob;
        ReplicaAccumulator& acc = find_or_create(fp, resp.replica_hint);
        for (int32_t t : batch) {
            const TopEntry* e = resp.find(t);
            if (e == nullptr) {
                raise(ErrorCode::biased_set_mismatch,
                      "stochastic: biased token " + std::to_string(t) +
                          " missing from response");
            }
            acc.record(t, e->logprob - beta - top->logprob);
        }
        acc.record(t_top, 0.0);
        acc.record(t_second, second->logprob - top->logprob);
        return acc;
    };

    register_unbiased(first);

    std::vector<int32_t> excluded{t_top, t_second};
    std::sort(excluded.begin(), excluded.end());
    const auto batches = partition_tokens(v, excluded, k - 2);

    const int64_t n_est0 = std::max<int64_t>(
        options.n_hint.value_or(1), static_cast<int64_t>(accs.size()));
    auto budget_limit = [&](int64_t n_est) -> uint64_t {
        if (options.call_budget) {
            return *options.call_budget;
        }
        return static_cast<uint64_t>(
            10 * std::max<int64_t>(n_est, 1) *
            std::max<std::size_t>(batches.size(), 1));
    };

    auto used = [&]() -> uint64_t {
        return session.call_count() - calls_before;
    };

    auto complete_index = [&]() -> int {
        for (std::size_t i = 0; i < accs.size(); ++i) {
            if (accs[i].has_top_logprob && accs[i].n_seen == v) {
                return static_cast<int>(i);
            }
        }
        return -1;
    };

    auto run_batch = [&](std::size_t bi) {
        BiasSpec bias;
        for (int32_t t : batches[bi]) {
            bias.entries.emplace(t, beta);
        }
        const int want = static_cast<int>(batches[bi].size()) + 2;
        register_batch(session.query(context, bias, std::min(want, k)),
                       batches[bi]);
    };

    int done = -1;
    // Pass 1: every batch once; replicas land where the draws fall.
    for (std::size_t bi = 0; bi < batches.size() && done < 0; ++bi) {
        if (used() >= budget_limit(std::max<int64_t>(
                          n_est0, static_cast<int64_t>(accs.size())))) {
            raise(ErrorCode::budget_exhausted,
                  "stochastic: budget exhausted during the first sweep");
        }
        run_batch(bi);
        done = complete_index();
    }

    // Greedy completion: drive the accumulator closest to done by querying
    // its first missing batch; draws landing elsewhere still make progress.
    while (done < 0) {
        const int64_t n_est = std::max<int64_t>(
            n_est0, static_cast<int64_t>(accs.size()));
        if (used() >= budget_limit(n_est)) {
            raise(ErrorCode::budget_exhausted,
                  "stochastic: budget of " +
                      std::to_string(budget_limit(n_est)) +
                      " calls exhausted with " + std::to_string(accs.size()) +
                      " partial replicas");
        }
        // Leader: most tokens seen among accumulators with a usable top
        // logprob; if none has one, issue an unbiased query.
        int leader = -1;
        int64_t best_seen = -1;
        for (std::size_t i = 0; i < accs.size(); ++i) {
            if (!accs[i].has_top_logprob) {
                continue;
            }
            if (accs[i].n_seen > best_seen) {
                best_seen = accs[i].n_seen;
                leader = static_cast<int>(i);
            }
        }
        if (leader < 0) {
            register_unbiased(session.query(context, BiasSpec{}, k));
            done = complete_index();
            continue;
        }
        std::size_t missing_batch = batches.size();
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            bool all_seen = true;
            for (int32_t t : batches[bi]) {
                if (!accs[static_cast<std::size_t>(leader)]
                         .seen[static_cast<std::size_t>(t)]) {
                    all_seen = false;
                    break;
                }
            }
            if (!all_seen) {
                missing_batch = bi;
                break;
            }
        }
        if (missing_batch == batches.size()) {
            // Leader only lacks bookkeeping completeness; re-check.
            done = complete_index();
            if (done < 0) {
                register_unbiased(session.query(context, BiasSpec{}, k));
                done = complete_index();
            }
            continue;
        }
        run_batch(missing_batch);
        done = complete_index();
    }

    StochasticResult result;
    result.calls_used = used();
    result.completed_index = 0;

    // Completed accumulator first, the rest in discovery order.
    std::vector<std::size_t> order;
    order.push_back(static_cast<std::size_t>(done));
    for (std::size_t i = 0; i < accs.size(); ++i) {
        if (static_cast<int>(i) != done) {
            order.push_back(i);
        }
    }
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const ReplicaAccumulator& acc = accs[order[oi]];
        StochasticOutput out;
        out.fingerprint = acc.fingerprint;
        out.replica_hint = acc.replica_hint;
        out.tokens_seen = acc.n_seen;
        out.complete = acc.has_top_logprob && acc.n_seen == v;
        if (out.complete) {
            Eigen::VectorXd p(v);
            for (int64_t t = 0; t < v; ++t) {
                p(t) = std::exp(acc.rel[static_cast<std::size_t>(t)] +
                                acc.top_logprob);
            }
            out.distribution = ProbVector(std::move(p));
        }
        result.outputs.push_back(std::move(out));
    }

    telemetry::emit("extract.stochastic.done",
                    {{"calls", result.calls_used},
                     {"replicas_seen", accs.size()}});
    return result;
}

}  // namespace llmimg
