#include "llmimg/image.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <limits>

#include "llmimg/algebra.hpp"
#include "llmimg/telemetry.hpp"

namespace llmimg {

namespace {

std::string current_utc_iso8601() {
    const std::time_t now =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Incremental orthonormal-basis rank tracker (modified Gram-Schmidt with
// one re-orthogonalization pass). Drives the per-column plateau rule; the
// full SVD cross-checks it every `batch` columns and produces the final
// spectrum.
class RankTracker {
  public:
    RankTracker(Eigen::Index v, double rel_tol) : rel_tol_(rel_tol) {
        basis_.resize(v, 0);
    }

    bool add(const Eigen::VectorXd& column) {
        const double norm0 = column.norm();
        if (norm0 == 0.0) {
            return false;
        }
        scale_ = std::max(scale_, norm0);
        Eigen::VectorXd q = column;
        for (int pass = 0; pass < 2; ++pass) {
            if (basis_.cols() > 0) {
                q -= basis_ * (basis_.transpose() * q);
            }
        }
        const double norm = q.norm();
        if (norm <= rel_tol_ * scale_) {
            return false;
        }
        basis_.conservativeResize(Eigen::NoChange, basis_.cols() + 1);
        basis_.col(basis_.cols() - 1) = q / norm;
        return true;
    }

    int rank() const { return static_cast<int>(basis_.cols()); }

  private:
    Eigen::MatrixXd basis_;
    double rel_tol_;
    double scale_ = 0.0;
};

}  // namespace

ModelImage collect_image(ApiSession& session, const Extractor& extractor,
                         const CollectOptions& options) {
    if (options.margin < 1) {
        raise(ErrorCode::invalid_argument, "collect_image: margin must be >= 1");
    }
    if (options.batch < 1) {
        raise(ErrorCode::invalid_argument, "collect_image: batch must be >= 1");
    }
    if (options.extra_columns < 0) {
        raise(ErrorCode::invalid_argument,
              "collect_image: extra_columns must be >= 0");
    }
    const Capabilities& caps = session.capabilities();
    const int64_t v = caps.vocab_size;

    Eigen::MatrixXd collected(v, 0);
    std::vector<std::string> prompts;
    RankTracker tracker(v, options.tolerance);
    int64_t next_context = 0;
    int64_t last_increase = 0;  // 1-based column count at last rank growth
    int64_t plateau_at = -1;

    auto context_for = [&](int64_t i) {
        return options.context_prefix + std::to_string(i);
    };

    while (plateau_at < 0) {
        if (next_context >= v) {
            raise(ErrorCode::vocab_exhausted,
                  "collect_image: all " + std::to_string(v) +
                      " unique prompts consumed before the rank plateaued "
                      "(rank " +
                      std::to_string(tracker.rank()) +
                      "); extraction output is likely corrupted");
        }
        const int64_t chunk =
            std::min<int64_t>(options.batch, v - next_context);
        std::vector<Eigen::VectorXd> columns(
            static_cast<std::size_t>(chunk));
        parallel_for(chunk, options.concurrency, [&](int64_t i) {
            const ProbVector p =
                extractor(session, context_for(next_context + i));
            columns[static_cast<std::size_t>(i)] = clr(p).values();
        });

        for (int64_t i = 0; i < chunk && plateau_at < 0; ++i) {
            collected.conservativeResize(Eigen::NoChange,
                                         collected.cols() + 1);
            collected.col(collected.cols() - 1) =
                columns[static_cast<std::size_t>(i)];
            prompts.push_back(context_for(next_context + i));
            const int64_t m = collected.cols();
            if (tracker.add(columns[static_cast<std::size_t>(i)])) {
                last_increase = m;
            }
            if (m - last_increase >= options.margin) {
                plateau_at = m;
            }
        }
        next_context += chunk;

        if (plateau_at < 0 && collected.cols() > 0 &&
            collected.cols() % options.batch == 0) {
            // Periodic full-SVD cross-check of the incremental tracker.
            const RankResult check =
                numerical_rank(collected, options.tolerance);
            if (check.rank != tracker.rank()) {
                telemetry::emit("image.collect.rank_mismatch",
                                {{"tracker", tracker.rank()},
                                 {"svd", check.rank},
                                 {"columns", collected.cols()}});
                if (check.rank > tracker.rank()) {
                    last_increase = collected.cols();
                }
            }
            telemetry::emit("image.collect.progress",
                            {{"columns", collected.cols()},
                             {"rank", check.rank}});
        }
    }

    // Optional over-collection beyond the plateau.
    int64_t extra_left = options.extra_columns;
    while (extra_left > 0) {
        if (next_context >= v) {
            raise(ErrorCode::vocab_exhausted,
                  "collect_image: vocabulary exhausted during over-collection");
        }
        const int64_t chunk = std::min<int64_t>(
            std::min<int64_t>(options.batch, extra_left), v - next_context);
        std::vector<Eigen::VectorXd> columns(
            static_cast<std::size_t>(chunk));
        parallel_for(chunk, options.concurrency, [&](int64_t i) {
            const ProbVector p =
                extractor(session, context_for(next_context + i));
            columns[static_cast<std::size_t>(i)] = clr(p).values();
        });
        for (int64_t i = 0; i < chunk; ++i) {
            collected.conservativeResize(Eigen::NoChange,
                                         collected.cols() + 1);
            collected.col(collected.cols() - 1) =
                columns[static_cast<std::size_t>(i)];
            prompts.push_back(context_for(next_context + i));
        }
        next_context += chunk;
        extra_left -= chunk;
    }

    ModelImage image;
    image.matrix = std::move(collected);
    image.prompts = std::move(prompts);
    image.tolerance = options.tolerance;
    image.source_id = options.source_id;
    image.created_at =
        options.created_at.empty() ? current_utc_iso8601() : options.created_at;

    const RankResult final_rank = numerical_rank(image.matrix, options.tolerance);
    image.d_estimate = final_rank.rank;
    image.spectrum = final_rank.spectrum;

    telemetry::emit("image.collect.done", {{"columns", image.matrix.cols()},
                                           {"d_estimate", image.d_estimate}});
    return image;
}

EmbeddingEstimate estimate_embedding_size(const Eigen::MatrixXd& clr_outputs,
                                          double tol, bool with_leverage) {
    const RankResult rank = numerical_rank(clr_outputs, tol);
    EmbeddingEstimate est;
    est.d = rank.rank;
    est.spectrum = rank.spectrum;
    est.gap_index = largest_log_gap_index(rank.spectrum);

    // A plateau is a drop of >= 3 orders of magnitude between consecutive
    // singular values at or after the estimated rank.
    est.plateau = false;
    const Eigen::VectorXd& s = est.spectrum.values;
    for (Eigen::Index i = 0; i + 1 < s.size(); ++i) {
        const double hi = s(i);
        const double lo = s(i + 1);
        if (hi > 0.0 && (lo <= 0.0 || hi / std::max(lo, kProbFloor) >= 1e3)) {
            est.plateau = true;
            break;
        }
    }
    if (!est.plateau) {
        telemetry::emit(
            "image.embed_size.no_plateau",
            {{"d", est.d},
             {"note", "no 3-order spectrum drop; collect more outputs"}});
    }

    if (with_leverage) {
        // Leverage of column j: its leave-one-out relative residual, i.e.
        // how much of the column the remaining columns cannot explain. A
        // clean output is spanned by the others (score ~ 0); a corrupted
        // output carries its own direction and scores high, marking the
        // columns that inflate the rank estimate. O(m) least-squares solves,
        // so it is computed only on request.
        const Eigen::Index m = clr_outputs.cols();
        Eigen::VectorXd lev(m);
        Eigen::MatrixXd rest(clr_outputs.rows(), m > 0 ? m - 1 : 0);
        for (Eigen::Index j = 0; j < m; ++j) {
            if (m == 1) {
                lev(j) = 1.0;
                break;
            }
            Eigen::Index w = 0;
            for (Eigen::Index i = 0; i < m; ++i) {
                if (i != j) rest.col(w++) = clr_outputs.col(i);
            }
            const double norm = clr_outputs.col(j).norm();
            lev(j) = norm > 0.0
                         ? lstsq_residual(rest, clr_outputs.col(j)) / norm
                         : 0.0;
        }
        est.column_leverage = std::move(lev);
    }
    return est;
}

ImageBasis::ImageBasis(const ModelImage& image) {
    if (image.d_estimate < 1) {
        raise(ErrorCode::invalid_argument,
              "ImageBasis: image has no estimated rank");
    }
    if (image.matrix.cols() < image.d_estimate) {
        raise(ErrorCode::shape_mismatch,
              "ImageBasis: image has fewer columns than d_estimate");
    }
    // d well-conditioned spanning columns by column-pivoted QR.
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(image.matrix);
    const auto& perm = qr.colsPermutation().indices();
    basis_.resize(image.matrix.rows(), image.d_estimate);
    for (int j = 0; j < image.d_estimate; ++j) {
        basis_.col(j) = image.matrix.col(perm(j));
    }
}

ProbVector ImageBasis::extract(ApiSession& session, const std::string& context,
                               const FastExtractOptions& options) const {
    const Capabilities& caps = session.capabilities();
    const int64_t v = basis_.rows();
    if (caps.vocab_size != v) {
        raise(ErrorCode::shape_mismatch,
              "fast_extract: session vocabulary " +
                  std::to_string(caps.vocab_size) +
                  " != image vocabulary " + std::to_string(v));
    }
    const int d = static_cast<int>(basis_.cols());

    // One unbiased call pins the reference token r (the current top token)
    // and its absolute probability.
    const TopKResponse unbiased = session.query(
        context, BiasSpec{}, static_cast<int>(std::min<int64_t>(caps.k_max, v)));
    const int32_t r = unbiased.entries[0].token;
    const double log_pr = unbiased.entries[0].logprob;

    // Pivot rows: d token ids (excluding r) picked by column-pivoted QR of
    // the transposed alr-differenced basis, so the d x d system is as well
    // conditioned as the image allows.
    const Eigen::RowVectorXd ref_row = basis_.row(r);
    auto select_pivots = [&](const std::vector<int32_t>& banned)
        -> std::vector<int32_t> {
        std::vector<int32_t> rows;
        rows.reserve(v - 1);
        for (int64_t t = 0; t < v; ++t) {
            if (static_cast<int32_t>(t) == r) continue;
            if (std::find(banned.begin(), banned.end(),
                          static_cast<int32_t>(t)) != banned.end()) {
                continue;
            }
            rows.push_back(static_cast<int32_t>(t));
        }
        if (rows.size() < static_cast<std::size_t>(d)) {
            raise(ErrorCode::singular_system,
                  "fast_extract: not enough fresh pivot rows to re-pivot");
        }
        Eigen::MatrixXd at(d, static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            at.col(static_cast<Eigen::Index>(i)) =
                (basis_.row(rows[i]) - ref_row).transpose();
        }
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(at);
        const auto& perm = qr.colsPermutation().indices();
        std::vector<int32_t> pivots(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) {
            pivots[static_cast<std::size_t>(j)] =
                rows[static_cast<std::size_t>(perm(j))];
        }
        return pivots;
    };

    StableOptions probe_options;
    probe_options.bias = options.bias;
    probe_options.max_retries = options.max_retries;
    probe_options.concurrency = 1;

    std::vector<int32_t> banned;
    for (int attempt = 0;; ++attempt) {
        const std::vector<int32_t> pivots = select_pivots(banned);
        // Probe the pivot tokens: log p_t - log p_r per token. The pinning
        // response is the one already in hand; re-querying it would add a
        // wire call per extraction on cache-less sessions.
        const StableProbe probe =
            stable_probe(session, context, pivots, probe_options, &unbiased);

        Eigen::MatrixXd a(d, d);
        Eigen::VectorXd rhs(d);
        std::vector<std::pair<int32_t, double>> observed;
        observed.reserve(pivots.size() + unbiased.entries.size());
        {
            std::size_t row = 0;
            for (const auto& [t, logp] : probe.log_probs) {
                a.row(static_cast<Eigen::Index>(row)) = basis_.row(t) - ref_row;
                rhs(static_cast<Eigen::Index>(row)) = logp - log_pr;
                observed.emplace_back(t, std::exp(logp));
                ++row;
            }
            if (row != static_cast<std::size_t>(d)) {
                raise(ErrorCode::missing_tokens,
                      "fast_extract: probe returned " + std::to_string(row) +
                          " of " + std::to_string(d) + " pivots");
            }
        }
        for (const TopEntry& e : unbiased.entries) {
            observed.emplace_back(e.token, std::exp(e.logprob));
        }

        Eigen::VectorXd x;
        try {
            x = solve_image_coordinates(a, rhs);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::singular_system && attempt == 0) {
                // Re-pivot once without the rows that produced the singular
                // system, then retry.
                banned = pivots;
                continue;
            }
            throw;
        }

        // Reconstruct: log p_t - log p_r = (basis_row_t - basis_row_r) x,
        // normalized over the vocabulary by log-sum-exp.
        Eigen::VectorXd w = basis_ * x;
        const double w_r = w(r);
        w.array() -= w_r;
        const double lse = log_sum_exp(w);
        Eigen::VectorXd p(v);
        for (int64_t t = 0; t < v; ++t) {
            p(t) = std::exp(w(t) - lse);
        }

        for (const auto& [t, p_obs] : observed) {
            if (std::abs(p(t) - p_obs) > options.mismatch_tol) {
                raise(ErrorCode::out_of_image,
                      "fast_extract: reconstruction disagrees with observed "
                      "probability of token " +
                          std::to_string(t) + " by " +
                          std::to_string(std::abs(p(t) - p_obs)) +
                          "; the model no longer matches this image");
            }
        }
        return ProbVector(std::move(p));
    }
}

ProbVector fast_extract(const ModelImage& image, ApiSession& session,
                        const std::string& context,
                        const FastExtractOptions& options) {
    return ImageBasis(image).extract(session, context, options);
}

AttributionReport attribute(const std::vector<const ModelImage*>& candidates,
                            const ClrVector& output,
                            const AttributeOptions& options) {
    if (candidates.empty()) {
        raise(ErrorCode::invalid_argument, "attribute: no candidate images");
    }
    for (const ModelImage* image : candidates) {
        if (image == nullptr) {
            raise(ErrorCode::invalid_argument, "attribute: null candidate");
        }
        if (image->vocab_size() != output.size()) {
            raise(ErrorCode::shape_mismatch,
                  "attribute: candidate '" + image->source_id +
                      "' has vocabulary " +
                      std::to_string(image->vocab_size()) +
                      ", output has " + std::to_string(output.size()));
        }
    }

    AttributionReport report;
    report.entries.reserve(candidates.size());
    for (const ModelImage* image : candidates) {
        report.entries.push_back(AttributionEntry{
            image->source_id,
            lstsq_residual(image->matrix, output.values())});
    }
    std::sort(report.entries.begin(), report.entries.end(),
              [](const AttributionEntry& a, const AttributionEntry& b) {
                  if (a.residual != b.residual) return a.residual < b.residual;
                  return a.source_id < b.source_id;
              });

    const double best = report.entries[0].residual;
    const double second = report.entries.size() > 1
                              ? report.entries[1].residual
                              : std::numeric_limits<double>::infinity();
    report.margin = second / std::max(best, kProbFloor);
    const double threshold = options.threshold_scale * output.values().norm();
    if (best < threshold && report.margin > options.margin_min) {
        report.best_match = report.entries[0].source_id;
    }
    return report;
}

ImageChange compare_images(const ModelImage& a, const ModelImage& b,
                           double tol) {
    if (a.vocab_size() != b.vocab_size()) {
        raise(ErrorCode::shape_mismatch,
              "compare_images: vocabulary sizes differ");
    }
    Eigen::MatrixXd joined(a.vocab_size(), a.columns() + b.columns());
    joined << a.matrix, b.matrix;
    const int u = numerical_rank(joined, tol).rank;

    ImageChange change;
    change.union_rank = u;
    if (a.d_estimate != b.d_estimate) {
        change.kind = ImageChange::Kind::full;
        change.rank_delta = std::abs(a.d_estimate - b.d_estimate);
        return change;
    }
    const int d = a.d_estimate;
    const int gap_guard = std::max(4, d / 16);
    if (u <= d) {
        change.kind = ImageChange::Kind::none;
    } else if (u < 2 * d - gap_guard) {
        change.kind = ImageChange::Kind::low_rank;
        change.rank_delta = u - d;
    } else {
        change.kind = ImageChange::Kind::full;
        change.rank_delta = u - d;
    }
    return change;
}

const char* update_class_name(UpdateClass c) {
    switch (c) {
        case UpdateClass::no_update:
            return "no_update";
        case UpdateClass::hidden_prompt_or_partial_finetune:
            return "hidden_prompt_or_partial_finetune";
        case UpdateClass::lora_update:
            return "lora_update";
        case UpdateClass::full_finetune:
            return "full_finetune";
    }
    return "unknown";
}

const char* image_change_kind_name(ImageChange::Kind k) {
    switch (k) {
        case ImageChange::Kind::none:     return "none";
        case ImageChange::Kind::low_rank: return "low_rank";
        case ImageChange::Kind::full:     return "full";
    }
    return "unknown";
}

UpdateClass classify_update(bool logit_change, const ImageChange& change) {
    switch (change.kind) {
        case ImageChange::Kind::low_rank:
            return UpdateClass::lora_update;
        case ImageChange::Kind::full:
            return UpdateClass::full_finetune;
        case ImageChange::Kind::none:
            return logit_change
                       ? UpdateClass::hidden_prompt_or_partial_finetune
                       : UpdateClass::no_update;
    }
    return UpdateClass::no_update;
}

bool probe_logit_change(ApiSession& session_a, ApiSession& session_b,
                        const std::vector<std::string>& probe_contexts,
                        const Extractor& extractor, double tol) {
    if (probe_contexts.empty()) {
        raise(ErrorCode::invalid_argument,
              "probe_logit_change: no probe contexts");
    }
    for (const std::string& context : probe_contexts) {
        const ClrVector a = clr(extractor(session_a, context));
        const ClrVector b = clr(extractor(session_b, context));
        if (a.size() != b.size()) {
            raise(ErrorCode::shape_mismatch,
                  "probe_logit_change: vocabulary sizes differ");
        }
        const double linf = (a.values() - b.values()).cwiseAbs().maxCoeff();
        if (linf > tol) {
            return true;
        }
    }
    return false;
}

}  // namespace llmimg
