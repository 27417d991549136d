#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <string>

#include "lore/errors.hpp"

namespace lore {

// Row-major to match the on-disk tensor layout, so checkpoint data maps
// straight into matrices without transposition.
using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Thin SVD: u is rows x k, vt is k x cols, k = min(rows, cols),
/// singular values sorted descending.
struct SvdResult {
    Matrix u;
    Vector singular_values;
    Matrix vt;

    Matrix reconstruct() const { return u * singular_values.asDiagonal() * vt; }
};

namespace detail {

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_finite(const Matrix& m, const char* op) {
    if (!m.allFinite())
        throw ValidationError(std::string(op) + ": non-finite entries in " +
                              shape_str(m) + " input");
}

}  // namespace detail

/// Full deterministic thin SVD (no randomized sketching).
inline SvdResult svd(const Matrix& m) {
    detail::require_finite(m, "svd");
    Eigen::BDCSVD<Matrix> dec(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (dec.info() != Eigen::Success)
        throw NumericalError("svd did not converge on a " +
                             detail::shape_str(m) + " matrix");
    return SvdResult{dec.matrixU(), dec.singularValues(),
                     dec.matrixV().transpose()};
}

/// Singular values only (descending). Cheaper than svd() when the
/// factors are not needed, e.g. for nuclear norms and spectra.
inline Vector singular_values(const Matrix& m) {
    detail::require_finite(m, "singular_values");
    Eigen::BDCSVD<Matrix> dec(m);
    if (dec.info() != Eigen::Success)
        throw NumericalError("svd did not converge on a " +
                             detail::shape_str(m) + " matrix");
    return dec.singularValues();
}

namespace detail {

// Rebuild from the leading `keep` singular triplets with shrunk values.
// Trailing triplets are dropped entirely so the output rank is exactly
// the number of retained values.
inline Matrix reconstruct_truncated(const SvdResult& dec, const Vector& values,
                                    Eigen::Index keep) {
    const Eigen::Index rows = dec.u.rows(), cols = dec.vt.cols();
    if (keep == 0) return Matrix::Zero(rows, cols);
    return dec.u.leftCols(keep) * values.head(keep).asDiagonal() *
           dec.vt.topRows(keep);
}

}  // namespace detail

/// Singular value thresholding: U diag((sigma_i - mu)+) V^T.
/// Exact minimizer of ||X - m||_F^2 + 2 mu ||X||_*.
inline Matrix svt(const Matrix& m, double mu) {
    if (!(mu >= 0.0))
        throw ValidationError("svt: threshold must be non-negative, got " +
                              std::to_string(mu));
    const SvdResult dec = svd(m);
    Vector shrunk = (dec.singular_values.array() - mu).max(0.0);
    Eigen::Index keep = 0;
    while (keep < shrunk.size() && shrunk[keep] > 0.0) ++keep;
    return detail::reconstruct_truncated(dec, shrunk, keep);
}

/// Best rank-min(r, k) Frobenius approximation (Eckart-Young).
inline Matrix truncate_rank(const Matrix& m, Eigen::Index r) {
    if (r < 1)
        throw ValidationError("truncate_rank: rank must be positive, got " +
                              std::to_string(r));
    const SvdResult dec = svd(m);
    const Eigen::Index keep = std::min(r, dec.singular_values.size());
    return detail::reconstruct_truncated(dec, dec.singular_values, keep);
}

inline double frobenius_norm(const Matrix& m) { return m.norm(); }

/// Sum of singular values.
inline double nuclear_norm(const Matrix& m) { return singular_values(m).sum(); }

}  // namespace lore
