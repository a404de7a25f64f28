#pragma once

// Thin Eigen-backed dense linear-algebra helpers shared by the solvers:
// thin SVD, Moore-Penrose pseudoinverse, and multi-RHS least squares.

#include <Eigen/Dense>

#include <algorithm>

#include "ctfuse/errors.hpp"
#include "ctfuse/tensor.hpp"

namespace ctfuse {

/// Thin singular value decomposition A = U diag(s) V^T.
struct SvdResult {
  Matrix u;  ///< m x k, k = min(m, n)
  Vector s;  ///< k, non-increasing
  Matrix v;  ///< n x k
};

/// Thin SVD. Uses the divide-and-conquer kernel for large matrices and the
/// Jacobi kernel (more accurate) for small ones.
inline SvdResult svd(const Matrix& a) {
  detail::require(a.size() > 0, "svd: empty matrix");
  detail::require(a.allFinite(), "svd: non-finite input");
  SvdResult out;
  if (std::min(a.rows(), a.cols()) <= 16) {
    Eigen::JacobiSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.u = dec.matrixU();
    out.s = dec.singularValues();
    out.v = dec.matrixV();
  } else {
    Eigen::BDCSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.u = dec.matrixU();
    out.s = dec.singularValues();
    out.v = dec.matrixV();
  }
  return out;
}

/// Moore-Penrose pseudoinverse with singular values below
/// rcond * s_max treated as zero.
inline Matrix pinv(const Matrix& a, double rcond = 1e-12) {
  const SvdResult dec = svd(a);
  const double cutoff = rcond * (dec.s.size() > 0 ? dec.s(0) : 0.0);
  Vector inv_s = Vector::Zero(dec.s.size());
  for (Index i = 0; i < dec.s.size(); ++i) {
    if (dec.s(i) > cutoff) inv_s(i) = 1.0 / dec.s(i);
  }
  return dec.v * inv_s.asDiagonal() * dec.u.transpose();
}

/// Minimum-norm least-squares solution X of min ||A X - B||_F.
/// Column-pivoted QR for well-posed systems; SVD fallback keeps
/// rank-deficient systems finite.
inline Matrix lstsq(const Matrix& a, const Matrix& b) {
  detail::require(a.rows() == b.rows(), "lstsq: row counts of A and B differ");
  detail::require(a.allFinite() && b.allFinite(), "lstsq: non-finite input");
  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  if (qr.rank() == std::min(a.rows(), a.cols())) {
    return qr.solve(b);
  }
  return pinv(a) * b;
}

/// Pearson correlation of two equal-length vectors after mean removal.
/// Returns 0 when either vector has zero variance.
inline double pearson(const Vector& a, const Vector& b) {
  detail::require(a.size() == b.size() && a.size() > 0, "pearson: size mismatch");
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  const double denom = ac.norm() * bc.norm();
  if (denom <= 0.0) return 0.0;
  return ac.dot(bc) / denom;
}

}  // namespace ctfuse
