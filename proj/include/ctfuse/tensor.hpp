#pragma once

// Dense N-way tensor storage plus the multilinear kernels every solver in
// this library is built from: unfolding/folding, Khatri-Rao products,
// MTTKRP, and rank-R reconstruction.
//
// Storage convention: values are kept in a flat array with the FIRST index
// fastest, i.e. element (i_1, ..., i_N) of a tensor with dimensions
// (I_1, ..., I_N) lives at linear offset i_1 + i_2*I_1 + i_3*I_1*I_2 + ...
// (all indices 0-based). For order-2 tensors this is exactly column-major,
// so matrices round-trip through DenseTensor without copying semantics.
//
// Mode-n unfolding maps element (i_1, ..., i_N) to row i_n and column
// j = sum_{m != n} i_m * prod_{l < m, l != n} I_l, i.e. the remaining
// indices are flattened first-fastest. Under this convention the mode-1
// unfolding of the stored array is a free reshape, and a rank-R model
// satisfies T_(n) = F_n * Z_n^T with Z_n the Khatri-Rao product of the
// remaining factors in DESCENDING mode order.

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ctfuse/errors.hpp"

namespace ctfuse {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Dense real tensor of arbitrary order with first-index-fastest storage.
class DenseTensor {
 public:
  DenseTensor() = default;

  /// Zero-filled tensor with the given dimensions (all must be >= 1).
  explicit DenseTensor(std::vector<Index> dims) : dims_(std::move(dims)) {
    values_ = Vector::Zero(checked_size(dims_));
  }

  /// Wraps an existing flat value array (first index fastest).
  DenseTensor(std::vector<Index> dims, Vector values) : dims_(std::move(dims)), values_(std::move(values)) {
    detail::require(values_.size() == checked_size(dims_),
                    "DenseTensor: value count does not match dimensions");
  }

  /// Order-2 tensor sharing the matrix layout (column-major == first-fastest).
  static DenseTensor from_matrix(const Matrix& m) {
    DenseTensor t;
    t.dims_ = {m.rows(), m.cols()};
    t.values_ = Eigen::Map<const Vector>(m.data(), m.size());
    return t;
  }

  Index order() const noexcept { return static_cast<Index>(dims_.size()); }
  const std::vector<Index>& dims() const noexcept { return dims_; }

  Index dim(Index n) const {
    detail::require(n >= 0 && n < order(), "DenseTensor::dim: mode index out of range");
    return dims_[static_cast<std::size_t>(n)];
  }

  Index size() const noexcept { return values_.size(); }

  Vector& values() noexcept { return values_; }
  const Vector& values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  /// Element access by multi-index, e.g. t(i, j, k). Bounds-checked.
  template <typename... Ix>
  double& operator()(Ix... ix) {
    return values_[linear_index({static_cast<Index>(ix)...})];
  }
  template <typename... Ix>
  double operator()(Ix... ix) const {
    return values_[linear_index({static_cast<Index>(ix)...})];
  }

  double frobenius_norm() const { return values_.norm(); }
  double squared_norm() const { return values_.squaredNorm(); }
  void set_zero() { values_.setZero(); }

  /// Order-2 tensor viewed as a matrix (copies into an Eigen matrix).
  Matrix as_matrix() const {
    detail::require(order() == 2, "DenseTensor::as_matrix: tensor order is not 2");
    return Eigen::Map<const Matrix>(values_.data(), dims_[0], dims_[1]);
  }

  /// Zero-copy mode-1 unfolding: an I_1 x (size/I_1) map over the stored
  /// values. Valid while the tensor is alive and unmodified.
  Eigen::Map<const Matrix> mode0_view() const {
    detail::require(order() >= 1 && size() > 0, "DenseTensor::mode0_view: empty tensor");
    return Eigen::Map<const Matrix>(values_.data(), dims_[0], size() / dims_[0]);
  }

  /// Linear offset of a multi-index under first-index-fastest storage.
  Index linear_index(std::initializer_list<Index> ix) const {
    detail::require(static_cast<Index>(ix.size()) == order(),
                    "DenseTensor: index arity does not match tensor order");
    Index offset = 0;
    Index stride = 1;
    Index n = 0;
    for (Index i : ix) {
      detail::require(i >= 0 && i < dims_[static_cast<std::size_t>(n)],
                      "DenseTensor: index out of range in mode " + std::to_string(n));
      offset += i * stride;
      stride *= dims_[static_cast<std::size_t>(n)];
      ++n;
    }
    return offset;
  }

 private:
  static Index checked_size(const std::vector<Index>& dims) {
    detail::require(!dims.empty(), "DenseTensor: order must be >= 1");
    Index total = 1;
    for (Index d : dims) {
      detail::require(d >= 1, "DenseTensor: all dimensions must be >= 1");
      total *= d;
    }
    return total;
  }

  std::vector<Index> dims_;
  Vector values_;
};

/// Khatri-Rao (column-wise Kronecker) product. For A (I x R) and B (J x R)
/// the result is (I*J x R) with row i*J + j equal to a_{i r} * b_{j r}, i.e.
/// B's row index runs fastest inside each block of A rows.
inline Matrix khatri_rao(const Matrix& a, const Matrix& b) {
  detail::require(a.cols() == b.cols(), "khatri_rao: operands must have the same column count");
  const Index i_rows = a.rows(), j_rows = b.rows(), r = a.cols();
  Matrix out(i_rows * j_rows, r);
  for (Index c = 0; c < r; ++c) {
    for (Index i = 0; i < i_rows; ++i) {
      out.col(c).segment(i * j_rows, j_rows) = a(i, c) * b.col(c);
    }
  }
  return out;
}

/// Khatri-Rao chain of all factors except `skip`, composed in descending
/// mode order: Z = F_N (.) ... (.) F_{skip+1} (.) F_{skip-1} (.) ... (.) F_1.
/// Row layout matches the unfolding column order (first kept mode fastest),
/// so for factors of a rank-R model, unfold(T, n) ≈ F_n * Z^T.
inline Matrix khatri_rao_excluding(const std::vector<Matrix>& factors, Index skip) {
  detail::require(!factors.empty(), "khatri_rao_excluding: empty factor list");
  detail::require(skip >= 0 && skip < static_cast<Index>(factors.size()),
                  "khatri_rao_excluding: skip index out of range");
  const Index r = factors.front().cols();
  Matrix z = Matrix::Ones(1, r);
  for (Index m = static_cast<Index>(factors.size()) - 1; m >= 0; --m) {
    if (m == skip) continue;
    detail::require(factors[static_cast<std::size_t>(m)].cols() == r,
                    "khatri_rao_excluding: factor column counts differ");
    z = khatri_rao(z, factors[static_cast<std::size_t>(m)]);
  }
  return z;
}

/// Hadamard product of the factor Gram matrices F_m^T F_m over all m != skip.
/// Pass skip = -1 to include every factor.
inline Matrix gram_hadamard_excluding(const std::vector<Matrix>& factors, Index skip) {
  detail::require(!factors.empty(), "gram_hadamard_excluding: empty factor list");
  const Index r = factors.front().cols();
  Matrix g = Matrix::Ones(r, r);
  for (Index m = 0; m < static_cast<Index>(factors.size()); ++m) {
    if (m == skip) continue;
    const Matrix& f = factors[static_cast<std::size_t>(m)];
    detail::require(f.cols() == r, "gram_hadamard_excluding: factor column counts differ");
    g.array() *= (f.transpose() * f).array();
  }
  return g;
}

/// Mode-n unfolding of `t` into an I_n x (size/I_n) matrix under the
/// first-fastest index map described in the file header.
inline Matrix unfold(const DenseTensor& t, Index mode) {
  detail::require(mode >= 0 && mode < t.order(), "unfold: mode index out of range");
  const auto& dims = t.dims();
  const Index i_n = dims[static_cast<std::size_t>(mode)];
  Index pre = 1;
  for (Index m = 0; m < mode; ++m) pre *= dims[static_cast<std::size_t>(m)];
  const Index post = t.size() / (pre * i_n);

  Matrix out(i_n, t.size() / i_n);
  const double* src = t.data();
  // Element (p, q, s) of the (pre, I_n, post) view sits at p + q*pre +
  // s*pre*I_n and maps to row q, column p + s*pre.
  for (Index s = 0; s < post; ++s) {
    for (Index q = 0; q < i_n; ++q) {
      const double* block = src + (q + s * i_n) * pre;
      for (Index p = 0; p < pre; ++p) out(q, p + s * pre) = block[p];
    }
  }
  return out;
}

/// Inverse of unfold: rebuilds the tensor with the given dimensions from its
/// mode-n unfolding.
inline DenseTensor fold(const Matrix& m, Index mode, const std::vector<Index>& dims) {
  DenseTensor t(dims);
  detail::require(mode >= 0 && mode < t.order(), "fold: mode index out of range");
  const Index i_n = dims[static_cast<std::size_t>(mode)];
  detail::require(m.rows() == i_n && m.cols() == t.size() / i_n,
                  "fold: matrix shape does not match target dimensions");
  Index pre = 1;
  for (Index n = 0; n < mode; ++n) pre *= dims[static_cast<std::size_t>(n)];
  const Index post = t.size() / (pre * i_n);
  double* dst = t.data();
  for (Index s = 0; s < post; ++s) {
    for (Index q = 0; q < i_n; ++q) {
      double* block = dst + (q + s * i_n) * pre;
      for (Index p = 0; p < pre; ++p) block[p] = m(q, p + s * pre);
    }
  }
  return t;
}

/// Matricized-tensor times Khatri-Rao product: unfold(t, mode) * Z_mode with
/// Z_mode = khatri_rao_excluding(factors, mode), computed without forming
/// the unfolding for modes > 0 (one GEMM against the mode-0 view plus a
/// cheap contraction of the R x (size/I_1) partial).
inline Matrix mttkrp(const DenseTensor& t, const std::vector<Matrix>& factors, Index mode) {
  const Index n_modes = static_cast<Index>(factors.size());
  detail::require(n_modes == t.order(), "mttkrp: factor count does not match tensor order");
  detail::require(mode >= 0 && mode < n_modes, "mttkrp: mode index out of range");
  for (Index m = 0; m < n_modes; ++m) {
    detail::require(factors[static_cast<std::size_t>(m)].rows() == t.dim(m),
                    "mttkrp: factor row count does not match tensor dimension in mode " + std::to_string(m));
  }
  const Index r = factors.front().cols();

  if (mode == 0) {
    return t.mode0_view() * khatri_rao_excluding(factors, 0);
  }

  // Partial contraction over mode 0: Y = F_1^T * T_(1), of shape R x rest.
  Matrix y = factors[0].transpose() * t.mode0_view();

  const auto& dims = t.dims();
  Matrix out = Matrix::Zero(dims[static_cast<std::size_t>(mode)], r);
  std::vector<Index> idx(static_cast<std::size_t>(n_modes), 0);  // idx[1..N-1] used
  Eigen::RowVectorXd w(r);
  const Index rest = y.cols();
  for (Index c = 0; c < rest; ++c) {
    w.setOnes();
    for (Index m = 1; m < n_modes; ++m) {
      if (m == mode) continue;
      w.array() *= factors[static_cast<std::size_t>(m)].row(idx[static_cast<std::size_t>(m)]).array();
    }
    out.row(idx[static_cast<std::size_t>(mode)]) += y.col(c).transpose().cwiseProduct(w);
    // Odometer increment over modes 1..N-1 (mode-1 fastest).
    for (Index m = 1; m < n_modes; ++m) {
      auto& im = idx[static_cast<std::size_t>(m)];
      if (++im < dims[static_cast<std::size_t>(m)]) break;
      im = 0;
    }
  }
  return out;
}

/// Dimensions implied by a factor list (row counts).
inline std::vector<Index> factor_dims(const std::vector<Matrix>& factors) {
  std::vector<Index> dims;
  dims.reserve(factors.size());
  for (const auto& f : factors) dims.push_back(f.rows());
  return dims;
}

/// Dense rank-R reconstruction: T = sum_r f_1(:,r) o f_2(:,r) o ... o f_N(:,r).
inline DenseTensor cpd_reconstruct(const std::vector<Matrix>& factors) {
  detail::require(factors.size() >= 2, "cpd_reconstruct: need at least two factor matrices");
  const Matrix t0 = factors[0] * khatri_rao_excluding(factors, 0).transpose();
  DenseTensor t(factor_dims(factors));
  // Mode-0 unfolding order coincides with storage order.
  t.values() = Eigen::Map<const Vector>(t0.data(), t0.size());
  return t;
}

/// Squared Frobenius distance ||t - cpd_reconstruct(factors)||_F^2 evaluated
/// by explicit reconstruction (the independent checker used for final costs).
inline double cpd_residual_sq(const DenseTensor& t, const std::vector<Matrix>& factors) {
  const Matrix model0 = factors[0] * khatri_rao_excluding(factors, 0).transpose();
  return (t.mode0_view() - model0).squaredNorm();
}

}  // namespace ctfuse
