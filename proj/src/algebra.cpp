#include "llmimg/algebra.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace llmimg {

namespace {

void require_finite(const Eigen::MatrixXd& m, const char* what) {
    if (!m.allFinite()) {
        raise(ErrorCode::domain_error,
              std::string(what) + ": non-finite entries");
    }
}

}  // namespace

std::size_t clamp_nonpositive(Eigen::VectorXd& values) {
    std::size_t clamped = 0;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (!(values(i) > 0.0)) {
            values(i) = kProbFloor;
            ++clamped;
        }
    }
    return clamped;
}

ProbVector::ProbVector(Eigen::VectorXd values) : values_(std::move(values)) {
    if (values_.size() < 2) {
        raise(ErrorCode::domain_error, "ProbVector: need at least 2 entries");
    }
    double sum = 0.0;
    for (Eigen::Index i = 0; i < values_.size(); ++i) {
        const double p = values_(i);
        if (!(p > 0.0) || !std::isfinite(p)) {
            raise(ErrorCode::domain_error,
                  "ProbVector: entry " + std::to_string(i) +
                      " not strictly positive");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > kProbSumTol) {
        raise(ErrorCode::domain_error,
              "ProbVector: entries sum to " + std::to_string(sum) +
                  ", expected 1 within 1e-9");
    }
}

LogitVector::LogitVector(Eigen::VectorXd values) : values_(std::move(values)) {
    if (values_.size() < 2) {
        raise(ErrorCode::domain_error, "LogitVector: need at least 2 entries");
    }
    if (!values_.allFinite()) {
        raise(ErrorCode::domain_error, "LogitVector: non-finite entries");
    }
}

ClrVector::ClrVector(Eigen::VectorXd values) : values_(std::move(values)) {
    if (values_.size() < 2) {
        raise(ErrorCode::domain_error, "ClrVector: need at least 2 entries");
    }
    if (!values_.allFinite()) {
        raise(ErrorCode::domain_error, "ClrVector: non-finite entries");
    }
    const double sum = values_.sum();
    if (std::abs(sum) > kClrSumTol) {
        raise(ErrorCode::domain_error,
              "ClrVector: entries sum to " + std::to_string(sum) +
                  ", expected 0 within 1e-6");
    }
}

void validate_spectrum(const SingularSpectrum& s) {
    if (s.values.size() != std::min(s.rows, s.cols)) {
        raise(ErrorCode::domain_error,
              "SingularSpectrum: length != min(rows, cols)");
    }
    for (Eigen::Index i = 0; i < s.values.size(); ++i) {
        if (!(s.values(i) >= 0.0)) {
            raise(ErrorCode::domain_error,
                  "SingularSpectrum: negative singular value");
        }
        if (i > 0 && s.values(i) > s.values(i - 1)) {
            raise(ErrorCode::domain_error, "SingularSpectrum: not descending");
        }
    }
}

double log_sum_exp(const Eigen::VectorXd& x) {
    const double m = x.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        sum += std::exp(x(i) - m);
    }
    return m + std::log(sum);
}

ProbVector softmax(const LogitVector& logits) {
    const Eigen::VectorXd& l = logits.values();
    const double m = l.maxCoeff();
    Eigen::VectorXd e(l.size());
    double sum = 0.0;
    for (Eigen::Index i = 0; i < l.size(); ++i) {
        e(i) = std::exp(l(i) - m);
        sum += e(i);
    }
    return ProbVector(e / sum);
}

ClrVector clr(const ProbVector& p) {
    Eigen::VectorXd logp = p.values().array().log();
    const double mean = logp.mean();
    return ClrVector(logp.array() - mean);
}

ProbVector clr_inverse(const ClrVector& x) {
    return softmax(LogitVector(x.values()));
}

Eigen::VectorXd alr(const ProbVector& p) {
    const Eigen::VectorXd& v = p.values();
    const double log_ref = std::log(v(0));
    Eigen::VectorXd out(v.size() - 1);
    for (Eigen::Index i = 1; i < v.size(); ++i) {
        out(i - 1) = std::log(v(i)) - log_ref;
    }
    return out;
}

ProbVector alr_inverse(const Eigen::VectorXd& x) {
    if (x.size() < 1) {
        raise(ErrorCode::domain_error, "alr_inverse: need at least 1 entry");
    }
    if (!x.allFinite()) {
        raise(ErrorCode::domain_error, "alr_inverse: non-finite entries");
    }
    Eigen::VectorXd full(x.size() + 1);
    full(0) = 0.0;
    full.tail(x.size()) = x;
    return softmax(LogitVector(std::move(full)));
}

Eigen::VectorXd singular_values(const Eigen::MatrixXd& m) {
    // Tall and wide shapes are QR-reduced to the small square factor first:
    // singular values of R equal those of M, and the BDC bidiagonalization
    // on the reduced matrix is much cheaper at v >> m.
    const Eigen::Index rows = m.rows();
    const Eigen::Index cols = m.cols();
    if (rows >= 2 * cols && cols > 0) {
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
        Eigen::MatrixXd r = qr.matrixQR()
                                .topRows(cols)
                                .triangularView<Eigen::Upper>();
        return Eigen::BDCSVD<Eigen::MatrixXd>(r).singularValues();
    }
    if (cols >= 2 * rows && rows > 0) {
        return singular_values(m.transpose());
    }
    return Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues();
}

RankResult numerical_rank(const Eigen::MatrixXd& m, double relative_tol) {
    if (m.size() == 0) {
        raise(ErrorCode::invalid_argument, "numerical_rank: empty matrix");
    }
    if (!(relative_tol > 0.0) || !(relative_tol < 1.0)) {
        raise(ErrorCode::invalid_argument,
              "numerical_rank: relative_tol must lie in (0, 1)");
    }
    require_finite(m, "numerical_rank");

    RankResult out;
    out.spectrum.values = singular_values(m);
    out.spectrum.rows = m.rows();
    out.spectrum.cols = m.cols();

    const double s1 = out.spectrum.values.size() ? out.spectrum.values(0) : 0.0;
    if (s1 == 0.0) {
        out.rank = 0;  // all-zero matrix: rank 0 by convention
        return out;
    }
    int rank = 0;
    for (Eigen::Index i = 0; i < out.spectrum.values.size(); ++i) {
        if (out.spectrum.values(i) / s1 > relative_tol) {
            ++rank;
        }
    }
    out.rank = rank;
    return out;
}

int largest_log_gap_index(const SingularSpectrum& s) {
    validate_spectrum(s);
    if (s.values.size() < 2 || s.values(0) == 0.0) {
        return static_cast<int>(s.values.size());
    }
    // Values at or below sigma_1 * machine epsilon are indistinguishable
    // from zero; clamp them to one common floor so gaps between two noise
    // values (or a noise value and an exact zero) never win.
    const double floor =
        s.values(0) * std::numeric_limits<double>::epsilon();
    int best_index = 1;
    double best_gap = -1.0;
    for (Eigen::Index i = 0; i + 1 < s.values.size(); ++i) {
        const double hi = std::max(s.values(i), floor);
        const double lo = std::max(s.values(i + 1), floor);
        const double gap = std::log(hi) - std::log(lo);
        if (gap > best_gap) {
            best_gap = gap;
            best_index = static_cast<int>(i) + 1;
        }
    }
    return best_index;
}

double lstsq_residual(const Eigen::MatrixXd& l, const Eigen::VectorXd& target) {
    if (l.rows() != target.size()) {
        raise(ErrorCode::shape_mismatch,
              "lstsq_residual: matrix rows != target length");
    }
    require_finite(l, "lstsq_residual");
    require_finite(target, "lstsq_residual");
    Eigen::BDCSVD<Eigen::MatrixXd> svd(l, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd x = svd.solve(target);
    return (l * x - target).norm();
}

Eigen::VectorXd solve_image_coordinates(const Eigen::MatrixXd& a,
                                        const Eigen::VectorXd& b) {
    if (a.rows() != a.cols()) {
        raise(ErrorCode::shape_mismatch, "solve_image_coordinates: not square");
    }
    if (a.rows() != b.size()) {
        raise(ErrorCode::shape_mismatch,
              "solve_image_coordinates: rhs length mismatch");
    }
    require_finite(a, "solve_image_coordinates");
    require_finite(b, "solve_image_coordinates");

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    const Eigen::VectorXd diag = qr.matrixR().diagonal().cwiseAbs();
    const double dmax = diag.maxCoeff();
    const double dmin = diag.minCoeff();
    if (dmin == 0.0 || dmax / dmin > 1e12) {
        raise(ErrorCode::singular_system,
              "solve_image_coordinates: effective condition number above 1e12");
    }
    const Eigen::VectorXd x = qr.solve(b);
    const double rel = (a * x - b).norm() / std::max(1.0, b.norm());
    if (!(rel <= 1e-8)) {
        raise(ErrorCode::singular_system,
              "solve_image_coordinates: verification residual " +
                  std::to_string(rel));
    }
    return x;
}

}  // namespace llmimg
