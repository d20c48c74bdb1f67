#pragma once

// Distribution calculus on the simplex.
//
// A softmax head maps a d-dimensional hidden state h through a v x d matrix
// W, so every output distribution p = softmax(W h) lives on a d-dimensional
// manifold inside the (v-1)-simplex. The centered log-ratio transform
// straightens that manifold: clr(p) = log p - mean(log p) is linear in h, so
// a matrix of clr-transformed outputs has numerical rank d. Everything in
// this project (rank probing, low-call extraction, attribution, audits)
// reduces to linear algebra in clr coordinates; this header holds the
// transforms and the shared numerics.

#include <Eigen/Dense>

#include "llmimg/types.hpp"

namespace llmimg {

// softmax(l)_i = exp(l_i) / sum_j exp(l_j), computed with max subtraction.
// Inverse of clr (and of alr after prepending the reference coordinate).
ProbVector softmax(const LogitVector& logits);

// clr(p)_i = log p_i - mean_j(log p_j). Bijection between the open simplex
// and the zero-sum hyperplane; clr(softmax(l)) recenters l exactly.
ClrVector clr(const ProbVector& p);

// Inverse clr: softmax of the coordinates (any constant offset cancels).
ProbVector clr_inverse(const ClrVector& x);

// alr(p)_i = log p_{i+1} - log p_1 for i = 1..v-1 (component 0 is the
// reference). Returns a (v-1)-vector.
Eigen::VectorXd alr(const ProbVector& p);

// alr_inverse(x) = softmax(0, x_1, ..., x_{v-1}); stable for large |x|.
ProbVector alr_inverse(const Eigen::VectorXd& x);

struct RankResult {
    int rank = 0;
    SingularSpectrum spectrum;
};

// Singular values of M (descending). Shapes with one dimension much larger
// than the other are QR-reduced first; values are identical either way.
Eigen::VectorXd singular_values(const Eigen::MatrixXd& m);

// Numerical rank: #{ sigma_i : sigma_i / sigma_1 > relative_tol }.
// The all-zero matrix has rank 0 by convention. relative_tol must lie in
// (0, 1); non-finite entries raise DomainError.
RankResult numerical_rank(const Eigen::MatrixXd& m, double relative_tol = 1e-6);

// Index of the largest consecutive log-gap in a descending spectrum:
// argmax_i log(sigma_i / sigma_{i+1}), returned as the count of values
// before the gap (i+1 for 0-based argmax i). A secondary rank detector.
int largest_log_gap_index(const SingularSpectrum& s);

// min_x || L x - target ||_2 via SVD (rank-deficient safe). Shared by
// attribution and image-membership checks.
double lstsq_residual(const Eigen::MatrixXd& l, const Eigen::VectorXd& target);

// Solve the square system A x = b arising from pivot rows of an image
// basis. Raises SingularSystem when the column-pivoted QR of A reports an
// effective condition number above 1e12 or the verification residual
// || A x - b || / max(1, ||b||) exceeds 1e-8.
Eigen::VectorXd solve_image_coordinates(const Eigen::MatrixXd& a,
                                        const Eigen::VectorXd& b);

// log(sum_i exp(x_i)) with max subtraction.
double log_sum_exp(const Eigen::VectorXd& x);

}  // namespace llmimg
