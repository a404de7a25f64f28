#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "ctfuse/rng.hpp"
#include "ctfuse/tensor.hpp"

using namespace ctfuse;

namespace {

Matrix random_matrix(Index rows, Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  }
  return m;
}

DenseTensor random_tensor(const std::vector<Index>& dims, Rng& rng) {
  DenseTensor t(dims);
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = rng.normal();
  return t;
}

// Independent oracle: unfolding column index via the textbook map
// j = sum_{k != n} i_k * J_k with J_k = prod of the sizes of the modes
// before k, skipping mode n (all zero-based).
Matrix unfold_oracle(const DenseTensor& t, Index mode) {
  const Index n_modes = t.order();
  Index n_cols = 1;
  for (Index m = 0; m < n_modes; ++m) {
    if (m != mode) n_cols *= t.dim(m);
  }
  Matrix out(t.dim(mode), n_cols);
  std::vector<Index> idx(static_cast<std::size_t>(n_modes), 0);
  for (Index lin = 0; lin < t.size(); ++lin) {
    Index col = 0;
    Index stride = 1;
    for (Index k = 0; k < n_modes; ++k) {
      if (k == mode) continue;
      col += idx[static_cast<std::size_t>(k)] * stride;
      stride *= t.dim(k);
    }
    out(idx[static_cast<std::size_t>(mode)], col) = t.values()[lin];
    for (Index m = 0; m < n_modes; ++m) {
      auto& im = idx[static_cast<std::size_t>(m)];
      if (++im < t.dim(m)) break;
      im = 0;
    }
  }
  return out;
}

// Independent oracle: (A (.) B)_{i*J + j, r} = a_{i,r} * b_{j,r}.
Matrix khatri_rao_oracle(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols());
  for (Index r = 0; r < a.cols(); ++r) {
    for (Index i = 0; i < a.rows(); ++i) {
      for (Index j = 0; j < b.rows(); ++j) out(i * b.rows() + j, r) = a(i, r) * b(j, r);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("unfold: zero tensor gives zero matrix") {
  DenseTensor t({2, 2, 2});
  const Matrix u = unfold(t, 1);
  REQUIRE(u.rows() == 2);
  REQUIRE(u.cols() == 4);
  REQUIRE(u.norm() == 0.0);
}

TEST_CASE("unfold: matches brute-force index-map oracle on enumerated 2x3x4") {
  DenseTensor t({2, 3, 4});
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = static_cast<double>(i + 1);
  for (Index mode = 0; mode < 3; ++mode) {
    const Matrix u = unfold(t, mode);
    const Matrix o = unfold_oracle(t, mode);
    INFO("mode " << mode);
    REQUIRE(u.rows() == o.rows());
    REQUIRE(u.cols() == o.cols());
    REQUIRE((u - o).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("unfold/fold: bit-exact roundtrip on 100 random tensors") {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const Index order = 2 + static_cast<Index>(rng.below(3));
    std::vector<Index> dims;
    for (Index m = 0; m < order; ++m) dims.push_back(1 + static_cast<Index>(rng.below(5)));
    const DenseTensor t = random_tensor(dims, rng);
    for (Index mode = 0; mode < order; ++mode) {
      const Matrix u = unfold(t, mode);
      const DenseTensor back = fold(u, mode, dims);
      REQUIRE(back.values() == t.values());
      REQUIRE(u.norm() == Catch::Approx(t.frobenius_norm()).epsilon(1e-14));
    }
  }
}

TEST_CASE("unfold: mode out of range throws") {
  DenseTensor t({2, 2});
  REQUIRE_THROWS_AS(unfold(t, 2), std::invalid_argument);
  REQUIRE_THROWS_AS(unfold(t, -1), std::invalid_argument);
}

TEST_CASE("khatri_rao: identity columns") {
  const Matrix a = Matrix::Identity(2, 2);
  const Matrix k = khatri_rao(a, a);
  Matrix expect = Matrix::Zero(4, 2);
  expect(0, 0) = 1.0;  // e1 (x) e1
  expect(3, 1) = 1.0;  // e2 (x) e2
  REQUIRE((k - expect).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("khatri_rao: all-ones") {
  const Matrix k = khatri_rao(Matrix::Ones(2, 3), Matrix::Ones(3, 3));
  REQUIRE(k.rows() == 6);
  REQUIRE(k.cols() == 3);
  REQUIRE((k.array() - 1.0).abs().maxCoeff() == 0.0);
}

TEST_CASE("khatri_rao: matches element-loop oracle on random inputs") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(3, 2, rng);
    const Matrix b = random_matrix(4, 2, rng);
    REQUIRE((khatri_rao(a, b) - khatri_rao_oracle(a, b)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("khatri_rao: column-count mismatch throws") {
  REQUIRE_THROWS_AS(khatri_rao(Matrix::Ones(2, 2), Matrix::Ones(2, 3)), std::invalid_argument);
}

TEST_CASE("cpd_reconstruct: canonical rank-1") {
  Matrix a(2, 1), b(2, 1), c(2, 1);
  a << 1, 0;
  b << 1, 0;
  c << 1, 0;
  const DenseTensor t = cpd_reconstruct({a, b, c});
  REQUIRE(t(0, 0, 0) == 1.0);
  REQUIRE(t.squared_norm() == 1.0);
}

TEST_CASE("cpd_reconstruct: all-zero column is absorbed") {
  Rng rng(3);
  Matrix a = random_matrix(4, 3, rng), b = random_matrix(5, 3, rng), c = random_matrix(6, 3, rng);
  Matrix a2 = a, b2 = b, c2 = c;
  a2.col(1).setZero();
  const DenseTensor full = cpd_reconstruct({a2, b2, c2});
  const DenseTensor dropped = cpd_reconstruct(
      {Matrix(a2(Eigen::all, std::vector<Index>{0, 2})), Matrix(b2(Eigen::all, std::vector<Index>{0, 2})),
       Matrix(c2(Eigen::all, std::vector<Index>{0, 2}))});
  REQUIRE((Eigen::Map<const Vector>(full.values().data(), full.size()) -
           Eigen::Map<const Vector>(dropped.values().data(), dropped.size()))
              .cwiseAbs()
              .maxCoeff() < 1e-15);
}

TEST_CASE("cpd_reconstruct: matches triple-loop oracle") {
  Rng rng(11);
  const Matrix a = random_matrix(4, 3, rng), b = random_matrix(5, 3, rng), c = random_matrix(6, 3, rng);
  const DenseTensor t = cpd_reconstruct({a, b, c});
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 5; ++j) {
      for (Index k = 0; k < 6; ++k) {
        double expect = 0.0;
        for (Index r = 0; r < 3; ++r) expect += a(i, r) * b(j, r) * c(k, r);
        REQUIRE(t(i, j, k) == Catch::Approx(expect).margin(1e-13));
      }
    }
  }
}

TEST_CASE("cpd_reconstruct: matricized identity along mode 0") {
  Rng rng(13);
  const Matrix a = random_matrix(4, 3, rng), b = random_matrix(5, 3, rng), c = random_matrix(6, 3, rng);
  const DenseTensor t = cpd_reconstruct({a, b, c});
  const Matrix lhs = unfold(t, 0);
  const Matrix rhs = a * khatri_rao(c, b).transpose();
  REQUIRE((lhs - rhs).norm() / rhs.norm() < 1e-12);
}

TEST_CASE("mttkrp: agrees with unfold * khatri_rao_excluding on random tensors") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const Index order = 3 + static_cast<Index>(rng.below(2));
    std::vector<Index> dims;
    std::vector<Matrix> factors;
    for (Index m = 0; m < order; ++m) dims.push_back(2 + static_cast<Index>(rng.below(4)));
    const DenseTensor t = random_tensor(dims, rng);
    for (Index m = 0; m < order; ++m) factors.push_back(random_matrix(dims[static_cast<std::size_t>(m)], 3, rng));
    for (Index mode = 0; mode < order; ++mode) {
      const Matrix fast = mttkrp(t, factors, mode);
      const Matrix ref = unfold(t, mode) * khatri_rao_excluding(factors, mode);
      REQUIRE((fast - ref).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("mode0_view: zero-copy equals unfold(.,0)") {
  Rng rng(19);
  DenseTensor t = random_tensor({3, 4, 5}, rng);
  REQUIRE((Matrix(t.mode0_view()) - unfold(t, 0)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("DenseTensor: bounds-checked access and bad construction") {
  DenseTensor t({2, 3});
  REQUIRE_THROWS_AS(t(2, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(t(0, 3), std::invalid_argument);
  REQUIRE_THROWS_AS(DenseTensor({2, 0, 3}), std::invalid_argument);
}

TEST_CASE("gram_hadamard_excluding: equals explicit Hadamard product of Grams") {
  Rng rng(23);
  std::vector<Matrix> f = {random_matrix(4, 3, rng), random_matrix(5, 3, rng), random_matrix(6, 3, rng)};
  Matrix expect = Matrix::Ones(3, 3);
  for (std::size_t m = 0; m < f.size(); ++m) {
    if (m != 1) expect = expect.cwiseProduct(Matrix(f[m].transpose() * f[m]));
  }
  REQUIRE((gram_hadamard_excluding(f, 1) - expect).cwiseAbs().maxCoeff() < 1e-12);
}
