#include "llmimg/cost.hpp"

#include <cmath>

#include "llmimg/errors.hpp"

namespace llmimg {

CostEstimate estimate_cost(const CostQuery& q) {
    if (q.v < 2) {
        raise(ErrorCode::invalid_argument, "cost: v must be >= 2");
    }
    if (q.k < 1) {
        raise(ErrorCode::invalid_argument, "cost: k must be >= 1");
    }
    if (q.n < 1) {
        raise(ErrorCode::invalid_argument, "cost: n must be >= 1");
    }
    if (!(q.beta_max > 0.0) || !(q.epsilon > 0.0) ||
        q.epsilon >= q.beta_max) {
        raise(ErrorCode::invalid_argument,
              "cost: need 0 < epsilon < beta_max");
    }
    if (q.d && *q.d < 1) {
        raise(ErrorCode::invalid_argument, "cost: d must be >= 1");
    }
    if (!(q.price_per_call >= 0.0)) {
        raise(ErrorCode::invalid_argument, "cost: price_per_call must be >= 0");
    }

    const double v = static_cast<double>(q.v);
    auto price = [&](double calls) -> std::optional<double> {
        if (!q.d) {
            return std::nullopt;  // image price needs d outputs
        }
        return static_cast<double>(*q.d) * calls * q.price_per_call;
    };

    CostEstimate est;
    est.rows.push_back(CostRow{
        "logprob-free", "Logprob-free",
        v * std::log10(q.beta_max / q.epsilon),
        price(v * std::log10(q.beta_max / q.epsilon))});
    est.rows.push_back(
        CostRow{"fast", "With logprobs", v / q.k, price(v / q.k)});
    if (q.k >= 2) {
        est.rows.push_back(CostRow{"stable", "Numerically stable",
                                   v / (q.k - 1), price(v / (q.k - 1))});
    }
    if (q.k >= 3) {
        est.rows.push_back(CostRow{"stochastic", "Stochastically robust",
                                   q.n * v / (q.k - 2),
                                   price(q.n * v / (q.k - 2))});
    }
    if (q.d && q.k >= 2) {
        const double calls =
            1.0 + std::ceil(static_cast<double>(*q.d) / (q.k - 1));
        // Amortized per-output cost once the image exists; the build price
        // is already captured by the collection rows above.
        est.rows.push_back(
            CostRow{"image", "Image-assisted", calls, std::nullopt});
    }
    return est;
}

}  // namespace llmimg
