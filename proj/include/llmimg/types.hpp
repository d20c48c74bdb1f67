#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <utility>

#include "llmimg/errors.hpp"

namespace llmimg {

// Validation tolerances for the three coordinate systems.
inline constexpr double kProbSumTol = 1e-9;   // |sum(p) - 1| allowed
inline constexpr double kClrSumTol = 1e-6;    // |sum(clr)| allowed
inline constexpr double kProbFloor = 1e-300;  // clamp for nonpositive inputs

// Clamp nonpositive entries up to kProbFloor in place; returns how many were
// clamped. Used on ingestion paths (API responses, CSV) before building a
// ProbVector, which itself rejects nonpositive entries outright.
std::size_t clamp_nonpositive(Eigen::VectorXd& values);

// A point on the open simplex: v >= 2 strictly positive entries summing to 1.
class ProbVector {
  public:
    explicit ProbVector(Eigen::VectorXd values);

    const Eigen::VectorXd& values() const { return values_; }
    Eigen::Index size() const { return values_.size(); }
    double operator[](Eigen::Index i) const { return values_(i); }

  private:
    Eigen::VectorXd values_;
};

// Raw (unnormalized) logits; finite entries, v >= 2.
class LogitVector {
  public:
    explicit LogitVector(Eigen::VectorXd values);

    const Eigen::VectorXd& values() const { return values_; }
    Eigen::Index size() const { return values_.size(); }
    double operator[](Eigen::Index i) const { return values_(i); }

  private:
    Eigen::VectorXd values_;
};

// Centered log-ratio coordinates: entries sum to 0 (the zero-sum hyperplane).
class ClrVector {
  public:
    explicit ClrVector(Eigen::VectorXd values);

    const Eigen::VectorXd& values() const { return values_; }
    Eigen::Index size() const { return values_.size(); }
    double operator[](Eigen::Index i) const { return values_(i); }

  private:
    Eigen::VectorXd values_;
};

// Singular values of some matrix, descending, along with its shape.
struct SingularSpectrum {
    Eigen::VectorXd values;  // length min(rows, cols), non-negative, sorted
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
};

// Throws DomainError unless the spectrum satisfies its invariants.
void validate_spectrum(const SingularSpectrum& s);

}  // namespace llmimg
