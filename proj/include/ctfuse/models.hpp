#pragma once

// Single-tensor decomposition models.
//
//  * cpd_fit — rank-R canonical polyadic decomposition of an N-way tensor by
//    alternating least squares: each factor update solves its linear
//    least-squares subproblem exactly, so the cost is non-increasing. Runs
//    n_starts independent starts and returns the best. Optional joint damped
//    Gauss-Newton refinement polishes all factors simultaneously.
//  * parafac2_fit — flip-flop algorithm for irregular slice stacks
//    T_k ≈ P_k F D_k B^T with column-orthonormal P_k: alternates the exact
//    orthogonal-Procrustes update of every P_k (via SVD) with one ALS sweep
//    of (F, B, C) on the projected slices P_k^T T_k.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ctfuse/errors.hpp"
#include "ctfuse/linalg.hpp"
#include "ctfuse/rng.hpp"
#include "ctfuse/tensor.hpp"

namespace ctfuse {

/// Factor-matrix bundle for a CPD model. With normalization enabled every
/// column of every non-last factor has unit 2-norm and the column scale is
/// absorbed into the last factor.
struct CpdFactors {
  std::vector<Matrix> factors;

  Index rank() const { return factors.empty() ? 0 : factors.front().cols(); }
  Index order() const { return static_cast<Index>(factors.size()); }
};

/// PARAFAC2 factor bundle: slice loadings A_k = P_k F share the cross
/// product A_k^T A_k = F^T F across slices.
struct Parafac2Factors {
  Matrix f;               ///< R x R
  Matrix b;               ///< J x R
  Matrix c;               ///< K x R (row k scales slice k)
  std::vector<Matrix> p;  ///< K column-orthonormal matrices, rows_k x R

  Index rank() const { return f.cols(); }
  Matrix slice_loading(Index k) const { return p[static_cast<std::size_t>(k)] * f; }
};

/// Controls for the iterative fitting routines.
struct FitOptions {
  int max_iters = 2500;     ///< hard iteration cap
  double tol = 1e-8;        ///< relative cost-decrease stopping threshold
  int n_starts = 1;         ///< independent multi-starts, best cost wins
  std::uint64_t seed = 0;   ///< RNG seed; start s uses (seed, s)
  bool normalize = true;    ///< canonical column scaling on output

  /// Initialization: random unit-column factors, or leading singular
  /// vectors of each unfolding for the first start (remaining starts random).
  enum class Init { random, svd };
  Init init = Init::random;

  bool nls_refine = false;  ///< joint damped Gauss-Newton polish after ALS
  int nls_max_iters = 30;

  void validate() const {
    detail::require(max_iters >= 1, "FitOptions: max_iters must be >= 1");
    detail::require(tol > 0.0, "FitOptions: tol must be > 0");
    detail::require(n_starts >= 1, "FitOptions: n_starts must be >= 1");
  }
};

/// Outcome of a single-tensor fit.
struct CpdFitResult {
  CpdFactors factors;
  double cost = 0.0;                ///< squared Frobenius residual
  std::vector<double> trace;        ///< cost after each ALS iteration
  int iters = 0;
  std::vector<std::string> notes;   ///< degenerate-column reinits etc.
};

struct Parafac2FitResult {
  Parafac2Factors factors;
  double cost = 0.0;
  std::vector<double> trace;
  int iters = 0;
  std::vector<std::string> notes;
};

namespace detail {

inline Matrix random_factor(Index rows, Index r, Rng& rng) {
  Matrix f(rows, r);
  for (Index j = 0; j < r; ++j) {
    for (Index i = 0; i < rows; ++i) f(i, j) = rng.normal();
    const double n = f.col(j).norm();
    if (n > 0) f.col(j) /= n;
  }
  return f;
}

/// Leading R left singular vectors of the mode-n unfolding, padded with
/// random unit columns when the spectrum runs out. Always eigendecomposes
/// the smaller Gram side: rows x rows when the unfolding is wide, cols x
/// cols (mapping right vectors through u / sqrt(eigenvalue)) when it is
/// tall, so voxel-sized modes stay cheap.
inline Matrix svd_init_factor(const DenseTensor& t, Index mode, Index r, Rng& rng) {
  const Matrix u = unfold(t, mode);
  const Index rows = u.rows(), cols = u.cols();
  Matrix f(rows, r);
  Index take = 0;
  if (rows <= cols) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(u * u.transpose());
    take = std::min(rows, r);
    for (Index j = 0; j < take; ++j) f.col(j) = es.eigenvectors().col(rows - 1 - j);
  } else {
    Eigen::SelfAdjointEigenSolver<Matrix> es(u.transpose() * u);
    const double floor = 1e-12 * std::max(1.0, es.eigenvalues()(cols - 1));
    const Index want = std::min(cols, r);
    for (Index j = 0; j < want; ++j) {
      const double ev = es.eigenvalues()(cols - 1 - j);
      if (ev <= floor) break;
      f.col(take++) = u * es.eigenvectors().col(cols - 1 - j) / std::sqrt(ev);
    }
  }
  for (Index j = take; j < r; ++j) f.col(j) = random_factor(rows, 1, rng);
  return f;
}

/// Solves X * G = RHS for X given a symmetric positive semi-definite G,
/// adding a 1e-10 ridge if the plain solve is unreliable. Appends a note
/// when the ridge fires.
inline Matrix solve_gram(const Matrix& g, const Matrix& rhs, std::vector<std::string>* notes) {
  Eigen::LDLT<Matrix> ldlt(g);
  if (ldlt.info() == Eigen::Success) {
    Matrix x = ldlt.solve(rhs.transpose()).transpose();
    if (x.allFinite()) {
      const double res = (x * g - rhs).norm();
      if (res <= 1e-8 * std::max(1.0, rhs.norm())) return x;
    }
  }
  Matrix gr = g;
  gr.diagonal().array() += 1e-10;
  if (notes) notes->push_back("ridge 1e-10 applied to singular least-squares subproblem");
  return gr.ldlt().solve(rhs.transpose()).transpose();
}

/// Reinitializes factor columns whose norm collapsed below 1e-12.
inline void reinit_degenerate_columns(Matrix& f, Rng& rng, std::vector<std::string>* notes) {
  for (Index j = 0; j < f.cols(); ++j) {
    if (f.col(j).norm() < 1e-12) {
      f.col(j) = random_factor(f.rows(), 1, rng);
      if (notes) notes->push_back("reinitialized degenerate factor column " + std::to_string(j));
    }
  }
}

/// ||T - model||^2 from cached MTTKRP/Gram pieces of the last updated mode:
/// ||T||^2 - 2<M, F> + 1^T (G ∘ F^T F) 1, exact in exact arithmetic.
inline double residual_from_grams(double t_sq, const Matrix& m_last, const Matrix& f_last,
                                  const Matrix& gram_others) {
  const double cross = (m_last.array() * f_last.array()).sum();
  const double model_sq = (gram_others.array() * (f_last.transpose() * f_last).array()).sum();
  return t_sq - 2.0 * cross + model_sq;
}

/// Exact squared residual ||T - model(factors)||^2 via one MTTKRP and the
/// Gram identity; valid for arbitrary (not just ALS-optimal) factors.
inline double exact_cpd_cost(const DenseTensor& t, double t_sq, const std::vector<Matrix>& factors) {
  const Index last = t.order() - 1;
  const Matrix m = mttkrp(t, factors, last);
  const Matrix g = gram_hadamard_excluding(factors, last);
  return residual_from_grams(t_sq, m, factors[static_cast<std::size_t>(last)], g);
}

/// Monotone extrapolation along the last ALS step (swamp mitigation): tries
/// factors + beta * (factors - prev) and accepts only on cost improvement.
/// `beta` adapts across calls; `eval` must return the exact cost of a
/// candidate. Returns the (possibly unchanged) cost.
template <typename CostFn>
double extrapolate_step(std::vector<Matrix>& factors, const std::vector<Matrix>& prev, double cost,
                        double& beta, const CostFn& eval) {
  std::vector<Matrix> trial(factors.size());
  for (std::size_t m = 0; m < factors.size(); ++m) trial[m] = factors[m] + beta * (factors[m] - prev[m]);
  const double trial_cost = eval(trial);
  if (std::isfinite(trial_cost) && trial_cost < cost) {
    factors = std::move(trial);
    beta = std::min(beta * 1.25, 16.0);
    return trial_cost;
  }
  beta = std::max(beta * 0.5, 0.25);
  return cost;
}

/// Moves column scale into the last factor and makes other columns unit.
inline void canonicalize_scale(std::vector<Matrix>& factors) {
  const Index n = static_cast<Index>(factors.size());
  for (Index m = 0; m + 1 < n; ++m) {
    Matrix& f = factors[static_cast<std::size_t>(m)];
    for (Index j = 0; j < f.cols(); ++j) {
      const double s = f.col(j).norm();
      if (s > 0) {
        f.col(j) /= s;
        factors[static_cast<std::size_t>(n - 1)].col(j) *= s;
      }
    }
  }
}

/// Joint damped Gauss-Newton (Levenberg-Marquardt) refinement of all CPD
/// factors. Normal equations are accumulated entry-by-entry (each tensor
/// entry's gradient row has N*R nonzeros), so no Jacobian is materialized.
inline double gauss_newton_refine(const DenseTensor& t, std::vector<Matrix>& factors, double cost,
                                  int max_iters, std::vector<double>* trace) {
  const Index n_modes = t.order();
  const Index r = factors.front().cols();
  std::vector<Index> offs(static_cast<std::size_t>(n_modes) + 1, 0);
  for (Index m = 0; m < n_modes; ++m) {
    offs[static_cast<std::size_t>(m) + 1] = offs[static_cast<std::size_t>(m)] + t.dim(m) * r;
  }
  const Index n_par = offs.back();

  double mu = 1e-4;
  for (int it = 0; it < max_iters; ++it) {
    Matrix jtj = Matrix::Zero(n_par, n_par);
    Vector jtr = Vector::Zero(n_par);
    std::vector<Index> idx(static_cast<std::size_t>(n_modes), 0);
    std::vector<Index> cols(static_cast<std::size_t>(n_modes) * static_cast<std::size_t>(r));
    Vector vals(n_modes * r);
    for (Index lin = 0; lin < t.size(); ++lin) {
      // Model value and per-parameter partials at this entry.
      double model = 0.0;
      for (Index rr = 0; rr < r; ++rr) {
        double prod = 1.0;
        for (Index m = 0; m < n_modes; ++m) {
          prod *= factors[static_cast<std::size_t>(m)](idx[static_cast<std::size_t>(m)], rr);
        }
        model += prod;
        for (Index m = 0; m < n_modes; ++m) {
          const double fm = factors[static_cast<std::size_t>(m)](idx[static_cast<std::size_t>(m)], rr);
          const double partial = (fm != 0.0) ? prod / fm : [&] {
            double p = 1.0;
            for (Index mm = 0; mm < n_modes; ++mm) {
              if (mm == m) continue;
              p *= factors[static_cast<std::size_t>(mm)](idx[static_cast<std::size_t>(mm)], rr);
            }
            return p;
          }();
          const Index slot = m * r + rr;
          cols[static_cast<std::size_t>(slot)] = offs[static_cast<std::size_t>(m)] + rr * t.dim(m) + idx[static_cast<std::size_t>(m)];
          vals(slot) = partial;
        }
      }
      const double resid = t.values()[lin] - model;
      for (Index a = 0; a < n_modes * r; ++a) {
        jtr(cols[static_cast<std::size_t>(a)]) += vals(a) * resid;
        for (Index b = 0; b < n_modes * r; ++b) {
          jtj(cols[static_cast<std::size_t>(a)], cols[static_cast<std::size_t>(b)]) += vals(a) * vals(b);
        }
      }
      for (Index m = 0; m < n_modes; ++m) {
        auto& im = idx[static_cast<std::size_t>(m)];
        if (++im < t.dim(m)) break;
        im = 0;
      }
    }

    bool accepted = false;
    for (int tries = 0; tries < 10; ++tries) {
      Matrix damped = jtj;
      damped.diagonal() += mu * jtj.diagonal().cwiseMax(1e-12);
      const Vector step = damped.ldlt().solve(jtr);
      std::vector<Matrix> trial = factors;
      for (Index m = 0; m < n_modes; ++m) {
        trial[static_cast<std::size_t>(m)] += Eigen::Map<const Matrix>(step.data() + offs[static_cast<std::size_t>(m)], t.dim(m), r);
      }
      const double trial_cost = cpd_residual_sq(t, trial);
      if (trial_cost < cost) {
        factors = std::move(trial);
        cost = trial_cost;
        mu = std::max(mu * 0.3, 1e-14);
        accepted = true;
        break;
      }
      mu *= 4.0;
    }
    if (trace) trace->push_back(cost);
    if (!accepted) break;
  }
  return cost;
}

}  // namespace detail

/// Rank-R CPD fit by ALS; see file header. Throws std::invalid_argument on
/// rank preconditions and numeric_error on non-finite cost.
inline CpdFitResult cpd_fit(const DenseTensor& t, Index rank, const FitOptions& opts = {}) {
  opts.validate();
  const Index n_modes = t.order();
  detail::require(n_modes >= 2, "cpd_fit: tensor order must be >= 2");
  detail::require(rank >= 1, "cpd_fit: rank must be >= 1");
  for (Index n = 0; n < n_modes; ++n) {
    detail::require(rank <= t.size() / t.dim(n),
                    "cpd_fit: rank exceeds the product of the other mode sizes (mode " + std::to_string(n) + ")");
  }

  const double t_sq = t.squared_norm();
  CpdFitResult best;
  best.cost = std::numeric_limits<double>::infinity();

  for (int start = 0; start < opts.n_starts; ++start) {
    Rng rng(seed_combine(opts.seed, static_cast<std::uint64_t>(start)));
    std::vector<Matrix> factors;
    factors.reserve(static_cast<std::size_t>(n_modes));
    const bool use_svd = opts.init == FitOptions::Init::svd && start == 0;
    for (Index n = 0; n < n_modes; ++n) {
      factors.push_back(use_svd ? detail::svd_init_factor(t, n, rank, rng)
                                : detail::random_factor(t.dim(n), rank, rng));
    }

    CpdFitResult run;
    double prev = std::numeric_limits<double>::infinity();
    std::vector<Matrix> last_accepted;
    double beta = 1.0;
    for (int it = 0; it < opts.max_iters; ++it) {
      const std::vector<Matrix> before = factors;
      Matrix m_last, g_last;
      for (Index n = 0; n < n_modes; ++n) {
        const Matrix m = mttkrp(t, factors, n);
        const Matrix g = gram_hadamard_excluding(factors, n);
        factors[static_cast<std::size_t>(n)] = detail::solve_gram(g, m, &run.notes);
        detail::reinit_degenerate_columns(factors[static_cast<std::size_t>(n)], rng, &run.notes);
        if (n == n_modes - 1) {
          m_last = m;
          g_last = g;
        }
      }
      double cost = detail::residual_from_grams(t_sq, m_last, factors.back(), g_last);
      if (it >= 2) {
        cost = detail::extrapolate_step(factors, before, cost, beta, [&](const std::vector<Matrix>& f) {
          return detail::exact_cpd_cost(t, t_sq, f);
        });
      }
      if (!std::isfinite(cost)) throw numeric_error("cpd_fit: non-finite cost at iteration " + std::to_string(it));
      run.trace.push_back(cost);
      run.iters = it + 1;
      if (prev - cost <= opts.tol * std::max(prev, 1e-30) && it > 0) break;
      prev = cost;
    }
    if (opts.nls_refine) {
      detail::gauss_newton_refine(t, factors, cpd_residual_sq(t, factors), opts.nls_max_iters, &run.trace);
    }
    // The Gram-identity trace bottoms out at ~eps*||T||^2 near exact fits;
    // report the directly evaluated residual instead.
    run.cost = cpd_residual_sq(t, factors);

    if (run.cost < best.cost) {
      best = std::move(run);
      best.factors.factors = std::move(factors);
    }
  }

  if (opts.normalize) detail::canonicalize_scale(best.factors.factors);
  return best;
}

/// Direct evaluation of the PARAFAC2 cost sum_k ||T_k - P_k F D_k B^T||^2
/// (the independent checker used for final reported costs).
inline double parafac2_residual_sq(const std::vector<Matrix>& slices, const Parafac2Factors& fac) {
  double acc = 0.0;
  for (Index k = 0; k < static_cast<Index>(slices.size()); ++k) {
    const Matrix model = fac.p[static_cast<std::size_t>(k)] * fac.f * fac.c.row(k).asDiagonal() * fac.b.transpose();
    acc += (slices[static_cast<std::size_t>(k)] - model).squaredNorm();
  }
  return acc;
}

/// PARAFAC2 fit of irregular slices T_k (rows may differ, columns shared);
/// see file header. One (F, B, C) ALS sweep per P_k update.
inline Parafac2FitResult parafac2_fit(const std::vector<Matrix>& slices, Index rank, const FitOptions& opts = {}) {
  opts.validate();
  detail::require(!slices.empty(), "parafac2_fit: empty slice list");
  const Index k_slices = static_cast<Index>(slices.size());
  const Index j_cols = slices.front().cols();
  double total_sq = 0.0;
  for (const Matrix& s : slices) {
    detail::require(s.cols() == j_cols, "parafac2_fit: slice column mismatch");
    detail::require(rank <= s.rows(), "parafac2_fit: rank exceeds a slice's row count");
    total_sq += s.squaredNorm();
  }
  detail::require(rank >= 1, "parafac2_fit: rank must be >= 1");

  Parafac2FitResult best;
  best.cost = std::numeric_limits<double>::infinity();

  for (int start = 0; start < opts.n_starts; ++start) {
    Rng rng(seed_combine(opts.seed, static_cast<std::uint64_t>(start)));
    Parafac2Factors fac;
    fac.f = Matrix::Identity(rank, rank);
    fac.c = Matrix::Ones(k_slices, rank);
    if (opts.init == FitOptions::Init::svd && start == 0) {
      Matrix gram = Matrix::Zero(j_cols, j_cols);
      for (const Matrix& s : slices) gram += s.transpose() * s;
      Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
      fac.b.resize(j_cols, rank);
      const Index take = std::min(j_cols, rank);
      for (Index j = 0; j < take; ++j) fac.b.col(j) = es.eigenvectors().col(j_cols - 1 - j);
      for (Index j = take; j < rank; ++j) fac.b.col(j) = detail::random_factor(j_cols, 1, rng);
    } else {
      fac.b = detail::random_factor(j_cols, rank, rng);
      fac.f = detail::random_factor(rank, rank, rng);
    }
    fac.p.assign(static_cast<std::size_t>(k_slices), Matrix());

    Parafac2FitResult run;
    double prev = std::numeric_limits<double>::infinity();
    double beta = 1.0;
    // Projected stack Y: rank x j_cols x k_slices.
    DenseTensor y({rank, j_cols, k_slices});
    for (int it = 0; it < opts.max_iters; ++it) {
      // (i) exact orthogonal-Procrustes update of each P_k from the SVD of
      //     F D_k B^T T_k^T.
      double projected_sq = 0.0;
      for (Index k = 0; k < k_slices; ++k) {
        const Matrix& tk = slices[static_cast<std::size_t>(k)];
        const Matrix m = fac.f * fac.c.row(k).asDiagonal() * fac.b.transpose() * tk.transpose();
        const SvdResult dec = svd(m);
        fac.p[static_cast<std::size_t>(k)] = dec.v * dec.u.transpose();
        const Matrix yk = fac.p[static_cast<std::size_t>(k)].transpose() * tk;
        projected_sq += yk.squaredNorm();
        for (Index j = 0; j < j_cols; ++j) {
          for (Index rr = 0; rr < rank; ++rr) y(rr, j, k) = yk(rr, j);
        }
      }
      // (ii) one CPD ALS sweep of (F, B, C) on the projected stack.
      std::vector<Matrix> cf = {fac.f, fac.b, fac.c};
      const std::vector<Matrix> before = cf;
      Matrix m_last, g_last;
      for (Index n = 0; n < 3; ++n) {
        const Matrix m = mttkrp(y, cf, n);
        const Matrix g = gram_hadamard_excluding(cf, n);
        cf[static_cast<std::size_t>(n)] = detail::solve_gram(g, m, &run.notes);
        detail::reinit_degenerate_columns(cf[static_cast<std::size_t>(n)], rng, &run.notes);
        if (n == 2) {
          m_last = m;
          g_last = g;
        }
      }
      double y_resid = detail::residual_from_grams(projected_sq, m_last, cf[2], g_last);
      if (it >= 2) {
        // Monotone extrapolation of the triple with the P_k (hence Y) fixed.
        y_resid = detail::extrapolate_step(cf, before, y_resid, beta, [&](const std::vector<Matrix>& f) {
          return detail::exact_cpd_cost(y, projected_sq, f);
        });
      }
      fac.f = cf[0];
      fac.b = cf[1];
      fac.c = cf[2];
      // Total cost: sum_k ||T_k||^2 - ||Y_k||^2 + ||Y - model||^2 (exact for
      // column-orthonormal P_k).
      const double cost = total_sq - projected_sq + y_resid;
      if (!std::isfinite(cost)) throw numeric_error("parafac2_fit: non-finite cost at iteration " + std::to_string(it));
      run.trace.push_back(cost);
      run.iters = it + 1;
      if (prev - cost <= opts.tol * std::max(prev, 1e-30) && it > 0) break;
      prev = cost;
    }
    run.cost = parafac2_residual_sq(slices, fac);
    if (run.cost < best.cost) {
      best = std::move(run);
      best.factors = std::move(fac);
    }
  }
  return best;
}

/// Largest relative deviation of the PARAFAC2 cross-product constraint:
/// max_k ||A_k^T A_k - F^T F||_F / ||F^T F||_F.
inline double parafac2_crossprod_deviation(const Parafac2Factors& fac) {
  const Matrix ftf = fac.f.transpose() * fac.f;
  const double denom = std::max(ftf.norm(), 1e-300);
  double worst = 0.0;
  for (const Matrix& pk : fac.p) {
    const Matrix ak = pk * fac.f;
    worst = std::max(worst, (ak.transpose() * ak - ftf).norm() / denom);
  }
  return worst;
}

}  // namespace ctfuse
