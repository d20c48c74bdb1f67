#pragma once

// Model images: collection, embedding-size estimation, O(d) extraction,
// attribution and update auditing.
//
// An image is a v x m matrix of clr-transformed full outputs whose span is
// the model's whole output subspace. Rank stops growing at the embedding
// size d; once m >= d the image answers questions no single output can:
// how big the model's hidden state is, whether an output could have come
// from the model, and whether an update touched the output matrix.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "llmimg/extract.hpp"
#include "llmimg/session.hpp"
#include "llmimg/types.hpp"

namespace llmimg {

struct ModelImage {
    Eigen::MatrixXd matrix;             // v x m, clr columns
    std::vector<std::string> prompts;   // m entries; may be empty when loaded
    int d_estimate = 0;
    double tolerance = 1e-6;
    std::string source_id;
    std::string created_at;             // ISO-8601 UTC
    SingularSpectrum spectrum;

    Eigen::Index vocab_size() const { return matrix.rows(); }
    Eigen::Index columns() const { return matrix.cols(); }
};

// Extraction strategy used per collected column.
using Extractor =
    std::function<ProbVector(ApiSession& session, const std::string& context)>;

struct CollectOptions {
    int margin = 100;        // stop after this many columns without rank growth
    int batch = 64;          // SVD cross-check cadence and parallel chunk size
    int extra_columns = 0;   // over-collection beyond the plateau
    double tolerance = 1e-6;
    int concurrency = 8;
    std::string source_id = "unknown";
    std::string created_at;           // empty -> current UTC time
    std::string context_prefix = "img:";  // unique prompts context_prefix + i
};

ModelImage collect_image(ApiSession& session, const Extractor& extractor,
                         const CollectOptions& options = {});

struct EmbeddingEstimate {
    int d = 0;
    SingularSpectrum spectrum;
    int gap_index = 0;      // largest-log-gap secondary estimate
    bool plateau = false;   // spectrum drops >= 3 orders of magnitude
    // Per-column leave-one-out relative residual, on request. Columns the
    // rest of the collection cannot explain score high — they are the ones
    // inflating the rank estimate (corrupted or out-of-subspace outputs).
    std::optional<Eigen::VectorXd> column_leverage;
};

EmbeddingEstimate estimate_embedding_size(const Eigen::MatrixXd& clr_outputs,
                                          double tol = 1e-6,
                                          bool with_leverage = false);

struct FastExtractOptions {
    std::optional<double> bias;   // forwarded to the pivot probes
    int max_retries = 5;
    double mismatch_tol = 1e-4;   // observed-vs-reconstructed gate
};

// Precomputed pivot machinery for repeated O(d)-call extractions against
// one image. Construction selects d well-conditioned basis columns by
// column-pivoted QR; each extract() then solves a d x d system from d
// probed token probabilities.
class ImageBasis {
  public:
    explicit ImageBasis(const ModelImage& image);

    // 1 unbiased call + ceil(d/(k-1)) biased batches. Raises OutOfImage when
    // the reconstruction disagrees with any observed probability by more
    // than mismatch_tol (the model no longer matches the image).
    ProbVector extract(ApiSession& session, const std::string& context,
                       const FastExtractOptions& options = {}) const;

    int d() const { return static_cast<int>(basis_.cols()); }

  private:
    Eigen::MatrixXd basis_;  // v x d clr columns
};

ProbVector fast_extract(const ModelImage& image, ApiSession& session,
                        const std::string& context,
                        const FastExtractOptions& options = {});

struct AttributeOptions {
    double threshold_scale = 1e-6;  // best residual < scale * ||output||
    double margin_min = 100.0;      // second-best / best
};

struct AttributionEntry {
    std::string source_id;
    double residual = 0.0;
};

struct AttributionReport {
    std::vector<AttributionEntry> entries;  // ascending residual
    std::optional<std::string> best_match;
    double margin = 0.0;  // second-best / best residual
};

AttributionReport attribute(const std::vector<const ModelImage*>& candidates,
                            const ClrVector& output,
                            const AttributeOptions& options = {});

struct ImageChange {
    enum class Kind { none, low_rank, full };
    Kind kind = Kind::none;
    int rank_delta = 0;   // only for low_rank
    int union_rank = 0;   // diagnostic: rank of [A|B]
};

// u = rank([A|B]): none if u = d, low_rank(u - d) if d < u < 2d - gap_guard
// with gap_guard = max(4, d/16), full otherwise. Images with differing
// d_estimate are immediately "full".
ImageChange compare_images(const ModelImage& a, const ModelImage& b,
                           double tol = 1e-6);

enum class UpdateClass {
    no_update,
    hidden_prompt_or_partial_finetune,
    lora_update,
    full_finetune,
};

const char* update_class_name(UpdateClass c);
const char* image_change_kind_name(ImageChange::Kind k);

// (false, none) -> no_update; (true, none) -> hidden prompt or partial
// finetune; (*, low_rank) -> lora_update; (*, full) -> full_finetune.
UpdateClass classify_update(bool logit_change, const ImageChange& change);

struct UpdateReport {
    bool logit_change = false;
    ImageChange image_change;
    UpdateClass classification = UpdateClass::no_update;
};

// Extract each probe context from both sessions, compare in clr space.
bool probe_logit_change(ApiSession& session_a, ApiSession& session_b,
                        const std::vector<std::string>& probe_contexts,
                        const Extractor& extractor, double tol = 1e-6);

}  // namespace llmimg
