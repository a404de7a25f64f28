#pragma once

// Collective matrix–tensor factorization of per-subject fMRI matrices
// X_k (voxels x volumes) and per-subject EEG tensors
// T_k (erp-samples x electrodes x trials), with a consensus spatial map.
//
// Soft flavor:
//   sum_k ( || T_k - [E_k, At_k, Bt_k] ||^2 + || X_k - A_k B_k^T ||^2
//           + l1 * || A_k - A ||^2 + l2 * || B_k - H Bt_k ||^2 )
// with a fixed canonical HRF map H.
//
// Flexible flavor:
//   sum_k ( || T_k - [E_k, At_k, Bt_k] ||^2
//           + || X_k - A_k (H_k(z_k) Bt_k)^T ||^2 + l1 * || A_k - A ||^2 )
// where each subject's HRF map H_k is parameterized by z_k and refined by a
// damped Gauss–Newton step per sweep (accepted steps never increase cost).
//
// The consensus update A := mean_k(A_k) is the exact minimizer of the l1
// penalty sum, so every block keeps the total cost non-increasing.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ctfuse/coupled.hpp"
#include "ctfuse/errors.hpp"
#include "ctfuse/hrf.hpp"
#include "ctfuse/linalg.hpp"
#include "ctfuse/models.hpp"
#include "ctfuse/rng.hpp"
#include "ctfuse/tensor.hpp"

namespace ctfuse {

/// Per-subject joint factorization instance. Every subject shares one rank;
/// penalties couple subjects through the consensus map (l1) and couple the
/// fMRI time courses to HRF-mapped trial amplitudes (l2, soft flavor only).
struct DcmtfProblem {
  std::vector<Matrix> fmri;      ///< K matrices, voxels x volumes
  std::vector<DenseTensor> eeg;  ///< K tensors, erp-samples x electrodes x trials
  Index rank = 0;
  double lambda_1 = 0.0;  ///< consensus-map weight
  double lambda_2 = 0.0;  ///< temporal-coupling weight (soft flavor)

  std::optional<HrfOperator> hrf_op;  ///< fixed map, volumes x trials (soft flavor)

  /// Flexible flavor: family for the per-subject HRF parameters and the
  /// sampling rates the per-subject operators are built from.
  HrfFamily hrf_family = HrfFamily::double_gamma;
  double trial_rate_hz = 1.0;
  double volume_rate_hz = 0.5;
  double hrf_support_s = 32.0;

  Index n_subjects() const { return static_cast<Index>(fmri.size()); }

  void validate() const {
    detail::require(!fmri.empty() && fmri.size() == eeg.size(),
                    "DcmtfProblem: need matching per-subject fMRI and EEG lists");
    detail::require(rank >= 1, "DcmtfProblem: rank must be >= 1");
    for (std::size_t k = 0; k < fmri.size(); ++k) {
      detail::require(fmri[k].rows() == fmri[0].rows() && fmri[k].cols() == fmri[0].cols(),
                      "DcmtfProblem: fMRI matrix shapes differ across subjects");
      detail::require(eeg[k].order() == 3, "DcmtfProblem: EEG entries must be 3-way tensors");
      for (Index m = 0; m < 3; ++m) {
        detail::require(eeg[k].dim(m) == eeg[0].dim(m),
                        "DcmtfProblem: EEG tensor shapes differ across subjects");
      }
    }
    detail::require(lambda_1 >= 0 && lambda_2 >= 0, "DcmtfProblem: penalty weights must be >= 0");
    if (lambda_2 > 0) {
      detail::require(hrf_op.has_value(), "DcmtfProblem: lambda_2 > 0 needs the fixed HRF operator");
      detail::require(hrf_op->rows() == fmri[0].cols() && hrf_op->cols() == eeg[0].dim(2),
                      "DcmtfProblem: HRF operator must be volumes x trials");
    }
  }
};

/// Solution of a per-subject collective factorization.
struct DcmtfSolution {
  std::vector<CpdFactors> eeg;        ///< per-subject {E_k, At_k, Bt_k}
  std::vector<Matrix> fmri_spatial;   ///< per-subject A_k
  std::vector<Matrix> fmri_time;      ///< per-subject B_k (flexible: realized H_k Bt_k)
  Matrix consensus;                   ///< A
  std::vector<HrfParams> hrf;         ///< flexible flavor only
  CostBreakdown cost;                 ///< independent re-evaluation on the returned factors
  std::vector<double> trace;
  CostBreakdown traced;
  int sweeps = 0;
  long nls_step_evals = 0;            ///< trial cost evaluations inside the HRF updates
  double fmri_scale = 1.0;
  double eeg_scale = 1.0;
  std::vector<std::string> notes;
};

/// Returns a copy with each modality scaled to unit Frobenius norm over the
/// concatenation of its per-subject pieces.
inline DcmtfProblem normalized(const DcmtfProblem& p, double* fmri_scale = nullptr,
                               double* eeg_scale = nullptr) {
  DcmtfProblem out = p;
  double nf = 0.0, ne = 0.0;
  for (const Matrix& x : out.fmri) nf += x.squaredNorm();
  for (const DenseTensor& t : out.eeg) ne += t.squared_norm();
  nf = std::sqrt(nf);
  ne = std::sqrt(ne);
  detail::require(nf > 0 && ne > 0, "normalized: zero-norm dataset");
  for (Matrix& x : out.fmri) x /= nf;
  for (DenseTensor& t : out.eeg) t.values() /= ne;
  if (fmri_scale) *fmri_scale = nf;
  if (eeg_scale) *eeg_scale = ne;
  return out;
}

/// Independent evaluation of the soft collective objective on given factors.
inline CostBreakdown dcmtf_soft_cost(const DcmtfProblem& p, const std::vector<CpdFactors>& eeg,
                                     const std::vector<Matrix>& fmri_spatial,
                                     const std::vector<Matrix>& fmri_time, const Matrix& consensus) {
  p.validate();
  const std::size_t n = static_cast<std::size_t>(p.n_subjects());
  detail::require(eeg.size() == n && fmri_spatial.size() == n && fmri_time.size() == n,
                  "dcmtf_soft_cost: per-subject factor count mismatch");
  CostBreakdown out;
  for (std::size_t k = 0; k < n; ++k) {
    out.eeg_resid += cpd_residual_sq(p.eeg[k], eeg[k].factors);
    out.fmri_resid += (p.fmri[k] - fmri_spatial[k] * fmri_time[k].transpose()).squaredNorm();
    if (p.lambda_1 > 0) out.pen_spatial += p.lambda_1 * (fmri_spatial[k] - consensus).squaredNorm();
    if (p.lambda_2 > 0) {
      out.pen_time +=
          p.lambda_2 * (fmri_time[k] - p.hrf_op->matrix() * eeg[k].factors[2]).squaredNorm();
    }
  }
  return out;
}

/// Independent evaluation of the flexible collective objective: the fMRI
/// model time courses are H_k(z_k) Bt_k, rebuilt from the given parameters.
inline CostBreakdown dcmtf_flexible_cost(const DcmtfProblem& p, const std::vector<CpdFactors>& eeg,
                                         const std::vector<Matrix>& fmri_spatial, const Matrix& consensus,
                                         const std::vector<HrfParams>& hrf) {
  p.validate();
  const std::size_t n = static_cast<std::size_t>(p.n_subjects());
  detail::require(eeg.size() == n && fmri_spatial.size() == n && hrf.size() == n,
                  "dcmtf_flexible_cost: per-subject factor count mismatch");
  CostBreakdown out;
  for (std::size_t k = 0; k < n; ++k) {
    out.eeg_resid += cpd_residual_sq(p.eeg[k], eeg[k].factors);
    const HrfOperator hk(hrf[k], p.trial_rate_hz, p.volume_rate_hz, p.eeg[k].dim(2), p.hrf_support_s);
    out.fmri_resid += (p.fmri[k] - fmri_spatial[k] * (hk.matrix() * eeg[k].factors[2]).transpose())
                          .squaredNorm();
    if (p.lambda_1 > 0) out.pen_spatial += p.lambda_1 * (fmri_spatial[k] - consensus).squaredNorm();
  }
  return out;
}

namespace detail {

/// Warm start shared by both collective solvers: per-subject EEG CPD fits,
/// columns aligned across subjects by trial-amplitude and electrode-map
/// similarity to subject 0, signs and scales canonicalized into the trial
/// factor, then least-squares spatial maps.
struct DcmtfWarm {
  std::vector<CpdFactors> eeg;
  std::vector<Matrix> a;  ///< per-subject spatial maps for given time courses
  Matrix consensus;
};

inline DcmtfWarm dcmtf_warm_start(const DcmtfProblem& p, const Matrix& hmat, std::uint64_t seed,
                                  int warm_max_iters, int warm_n_starts) {
  const Index n = p.n_subjects();
  DcmtfWarm w;
  w.eeg.resize(static_cast<std::size_t>(n));
  FitOptions fo;
  fo.max_iters = warm_max_iters;
  fo.n_starts = warm_n_starts;
  fo.init = FitOptions::Init::svd;
  fo.tol = 1e-9;
  fo.normalize = false;
  for (Index k = 0; k < n; ++k) {
    fo.seed = seed_combine(seed, seed_combine(static_cast<std::uint64_t>(k), "warm-eeg"));
    w.eeg[static_cast<std::size_t>(k)] = cpd_fit(p.eeg[k], p.rank, fo).factors;
    canonicalize_into(w.eeg[static_cast<std::size_t>(k)].factors, 2);
  }
  // Align columns of subjects k > 0 to subject 0 by greedy similarity over
  // the HRF-mapped trial courses and the electrode maps.
  for (Index k = 1; k < n; ++k) {
    auto& fk = w.eeg[static_cast<std::size_t>(k)].factors;
    const auto& f0 = w.eeg[0].factors;
    const Matrix hb0 = hmat * f0[2];
    const Matrix hbk = hmat * fk[2];
    Matrix score(p.rank, p.rank);
    for (Index i = 0; i < p.rank; ++i) {
      for (Index j = 0; j < p.rank; ++j) {
        score(i, j) = 0.5 * (std::abs(pearson(hb0.col(i), hbk.col(j))) +
                             std::abs(pearson(f0[1].col(i), fk[1].col(j))));
      }
    }
    std::vector<Index> order(static_cast<std::size_t>(p.rank), -1);
    std::vector<bool> used(static_cast<std::size_t>(p.rank), false);
    for (Index step = 0; step < p.rank; ++step) {
      Index bi = 0, bj = 0;
      double bv = -1.0;
      for (Index i = 0; i < p.rank; ++i) {
        if (order[static_cast<std::size_t>(i)] >= 0) continue;
        for (Index j = 0; j < p.rank; ++j) {
          if (used[static_cast<std::size_t>(j)]) continue;
          if (score(i, j) > bv) {
            bv = score(i, j);
            bi = i;
            bj = j;
          }
        }
      }
      order[static_cast<std::size_t>(bi)] = bj;
      used[static_cast<std::size_t>(bj)] = true;
    }
    std::vector<Index> perm(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) perm[i] = order[i];
    fk = reorder_columns(fk, perm);
    // Sign-align the mapped trial courses to subject 0 (flip into E_k).
    for (Index r = 0; r < p.rank; ++r) {
      if (pearson(hmat * fk[2].col(r), hb0.col(r)) < 0) {
        fk[2].col(r) *= -1.0;
        fk[0].col(r) *= -1.0;
      }
    }
  }
  // Spatial maps from least squares against the mapped trial courses.
  w.a.resize(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) {
    const Matrix bk = hmat * w.eeg[static_cast<std::size_t>(k)].factors[2];
    const Matrix g = bk.transpose() * bk;
    w.a[static_cast<std::size_t>(k)] = solve_gram(g, Matrix(p.fmri[static_cast<std::size_t>(k)] * bk), nullptr);
  }
  w.consensus = w.a[0];
  for (Index k = 1; k < n; ++k) w.consensus += w.a[static_cast<std::size_t>(k)];
  w.consensus /= static_cast<double>(n);
  return w;
}

}  // namespace detail

/// Options for the collective solvers.
struct DcmtfOptions {
  int max_sweeps = 120;
  double tol = 1e-8;
  std::uint64_t seed = 0;
  int warm_max_iters = 80;
  int warm_n_starts = 2;
  int nls_iters_per_sweep = 3;  ///< flexible flavor: LM iterations per subject per sweep
  double z_min = 1e-3;          ///< HRF parameter bounds (projected, logged)
  double z_max = 50.0;
};

/// Soft collective solver: all blocks are exact regularized least squares.
inline DcmtfSolution solve_dcmtf_soft(const DcmtfProblem& input, const DcmtfOptions& opts = {}) {
  input.validate();
  detail::require(input.hrf_op.has_value(), "solve_dcmtf_soft: needs the fixed HRF operator");
  DcmtfSolution sol;
  const DcmtfProblem p = normalized(input, &sol.fmri_scale, &sol.eeg_scale);
  const Index n = p.n_subjects();
  const Index r = p.rank;
  const Matrix& hmat = p.hrf_op->matrix();
  const Matrix hth = hmat.transpose() * hmat;

  detail::DcmtfWarm w = detail::dcmtf_warm_start(p, hmat, opts.seed, opts.warm_max_iters, opts.warm_n_starts);
  sol.eeg = std::move(w.eeg);
  sol.fmri_spatial = std::move(w.a);
  sol.consensus = std::move(w.consensus);
  sol.fmri_time.resize(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) {
    sol.fmri_time[static_cast<std::size_t>(k)] = hmat * sol.eeg[static_cast<std::size_t>(k)].factors[2];
  }

  std::vector<double> eeg_sq(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) eeg_sq[static_cast<std::size_t>(k)] = p.eeg[static_cast<std::size_t>(k)].squared_norm();

  double prev_total = std::numeric_limits<double>::infinity();
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    CostBreakdown cb;
    for (Index k = 0; k < n; ++k) {
      const std::size_t ku = static_cast<std::size_t>(k);
      auto& ef = sol.eeg[ku].factors;
      Matrix& ak = sol.fmri_spatial[ku];
      Matrix& bk = sol.fmri_time[ku];
      const Matrix& xk = p.fmri[ku];
      // EEG blocks.
      ef[0] = detail::solve_gram(gram_hadamard_excluding(ef, 0), mttkrp(p.eeg[ku], ef, 0), &sol.notes);
      ef[1] = detail::solve_gram(gram_hadamard_excluding(ef, 1), mttkrp(p.eeg[ku], ef, 1), &sol.notes);
      {
        Matrix m = mttkrp(p.eeg[ku], ef, 2);
        const Matrix g = gram_hadamard_excluding(ef, 2);
        if (p.lambda_2 > 0) {
          m += p.lambda_2 * hmat.transpose() * bk;
          ef[2] = detail::solve_right_gram_coupled(g, hth, p.lambda_2 * Matrix::Identity(r, r), r, m,
                                                   &sol.notes);
        } else {
          ef[2] = detail::solve_gram(g, m, &sol.notes);
        }
      }
      // fMRI time block: B_k (A_k^T A_k + l2 I) = X_k^T A_k + l2 H Bt_k.
      bk = detail::solve_identity_penalty(Matrix(ak.transpose() * ak), Matrix(xk.transpose() * ak),
                                          p.lambda_2, r, Matrix(hmat * ef[2]), &sol.notes);
      // fMRI spatial block: A_k (B_k^T B_k + l1 I) = X_k B_k + l1 A.
      ak = detail::solve_identity_penalty(Matrix(bk.transpose() * bk), Matrix(xk * bk), p.lambda_1, r,
                                          sol.consensus, &sol.notes);
    }
    // Consensus: exact minimizer of the l1 sum.
    sol.consensus.setZero();
    for (Index k = 0; k < n; ++k) sol.consensus += sol.fmri_spatial[static_cast<std::size_t>(k)];
    sol.consensus /= static_cast<double>(n);

    for (Index k = 0; k < n; ++k) {
      const std::size_t ku = static_cast<std::size_t>(k);
      cb.eeg_resid += cpd_residual_sq(p.eeg[ku], sol.eeg[ku].factors);
      cb.fmri_resid += (p.fmri[ku] - sol.fmri_spatial[ku] * sol.fmri_time[ku].transpose()).squaredNorm();
      if (p.lambda_1 > 0) cb.pen_spatial += p.lambda_1 * (sol.fmri_spatial[ku] - sol.consensus).squaredNorm();
      if (p.lambda_2 > 0) {
        cb.pen_time += p.lambda_2 * (sol.fmri_time[ku] - hmat * sol.eeg[ku].factors[2]).squaredNorm();
      }
    }
    const double total = cb.total();
    if (!std::isfinite(total)) throw numeric_error("solve_dcmtf_soft: non-finite cost at sweep " + std::to_string(sweep));
    sol.trace.push_back(total);
    sol.traced = cb;
    sol.sweeps = sweep + 1;
    if (sweep > 0 && prev_total - total <= opts.tol * std::max(prev_total, 1e-30)) break;
    prev_total = total;
  }

  sol.cost = dcmtf_soft_cost(p, sol.eeg, sol.fmri_spatial, sol.fmri_time, sol.consensus);
  return sol;
}

namespace detail {

/// One damped Gauss–Newton pass over a subject's HRF parameters. Returns the
/// updated fMRI residual term; counts every trial evaluation.
inline double dcmtf_hrf_update(const DcmtfProblem& p, const Matrix& xk, const Matrix& ak,
                               const Matrix& bt, HrfParams& z, double current, double& mu,
                               const DcmtfOptions& opts, long& evals, std::vector<std::string>* notes) {
  const Index trials = bt.rows();
  const Index np = z.n_params();
  const Matrix ga = ak.transpose() * ak;
  double cost = current;
  for (int it = 0; it < opts.nls_iters_per_sweep; ++it) {
    const HrfOperator hk(z, p.trial_rate_hz, p.volume_rate_hz, trials, p.hrf_support_s);
    const Matrix wk = hk.matrix() * bt;
    const Matrix res = xk - ak * wk.transpose();
    // Jacobian columns are -vec(A_k (dH_q Bt)^T); assemble J^T J and J^T r
    // without materializing them.
    std::vector<Matrix> u(static_cast<std::size_t>(np));
    for (Index q = 0; q < np; ++q) {
      const HrfOperator dh(sample_hrf_kernel_grad(z, q, p.trial_rate_hz, p.hrf_support_s),
                           p.trial_rate_hz, p.volume_rate_hz, trials);
      u[static_cast<std::size_t>(q)] = dh.matrix() * bt;  // volumes x rank
    }
    Matrix jtj(np, np);
    Vector jtr(np);
    const Matrix pk = ak.transpose() * res;  // rank x volumes
    for (Index q = 0; q < np; ++q) {
      for (Index s = q; s < np; ++s) {
        jtj(q, s) = jtj(s, q) =
            (u[static_cast<std::size_t>(q)] * ga).cwiseProduct(u[static_cast<std::size_t>(s)]).sum();
      }
      jtr(q) = -u[static_cast<std::size_t>(q)].cwiseProduct(pk.transpose()).sum();
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Matrix damped = jtj;
      damped.diagonal().array() += mu * (1.0 + jtj.diagonal().array());
      const Vector step = damped.ldlt().solve(-jtr);
      HrfParams trial = z;
      trial.z += step;
      bool projected = false;
      for (Index q = 0; q < np; ++q) {
        if (trial.z(q) < opts.z_min) {
          trial.z(q) = opts.z_min;
          projected = true;
        }
        if (trial.z(q) > opts.z_max) {
          trial.z(q) = opts.z_max;
          projected = true;
        }
      }
      const HrfOperator ht(trial, p.trial_rate_hz, p.volume_rate_hz, trials, p.hrf_support_s);
      const double trial_cost = (xk - ak * (ht.matrix() * bt).transpose()).squaredNorm();
      ++evals;
      if (trial_cost < cost) {
        if (projected && notes) notes->push_back("hrf parameter projected to bounds");
        z = trial;
        cost = trial_cost;
        mu = std::max(mu * 0.3, 1e-12);
        accepted = true;
        break;
      }
      mu *= 4.0;
    }
    if (!accepted) break;
  }
  return cost;
}

}  // namespace detail

/// Flexible collective solver: linear blocks plus a per-subject damped
/// Gauss–Newton refinement of the HRF parameters each sweep.
inline DcmtfSolution solve_dcmtf_flexible(const DcmtfProblem& input, const DcmtfOptions& opts = {}) {
  input.validate();
  detail::require(input.lambda_2 == 0.0,
                  "solve_dcmtf_flexible: the flexible flavor has no lambda_2 penalty");
  DcmtfSolution sol;
  const DcmtfProblem p = normalized(input, &sol.fmri_scale, &sol.eeg_scale);
  const Index n = p.n_subjects();
  const Index r = p.rank;
  const Index trials = p.eeg[0].dim(2);

  sol.hrf.assign(static_cast<std::size_t>(n),
                 p.hrf_family == HrfFamily::double_gamma ? HrfParams::canonical_double_gamma()
                                                         : HrfParams::default_lennard_jones());
  const HrfOperator h0(sol.hrf[0], p.trial_rate_hz, p.volume_rate_hz, trials, p.hrf_support_s);

  detail::DcmtfWarm w = detail::dcmtf_warm_start(p, h0.matrix(), opts.seed, opts.warm_max_iters,
                                                 opts.warm_n_starts);
  sol.eeg = std::move(w.eeg);
  sol.fmri_spatial = std::move(w.a);
  sol.consensus = std::move(w.consensus);
  sol.fmri_time.resize(static_cast<std::size_t>(n));

  std::vector<double> mu(static_cast<std::size_t>(n), 1e-4);
  std::vector<double> fmri_term(static_cast<std::size_t>(n), 0.0);

  double prev_total = std::numeric_limits<double>::infinity();
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    CostBreakdown cb;
    for (Index k = 0; k < n; ++k) {
      const std::size_t ku = static_cast<std::size_t>(k);
      auto& ef = sol.eeg[ku].factors;
      Matrix& ak = sol.fmri_spatial[ku];
      const Matrix& xk = p.fmri[ku];
      const HrfOperator hk(sol.hrf[ku], p.trial_rate_hz, p.volume_rate_hz, trials, p.hrf_support_s);
      const Matrix& hmat = hk.matrix();
      // EEG blocks.
      ef[0] = detail::solve_gram(gram_hadamard_excluding(ef, 0), mttkrp(p.eeg[ku], ef, 0), &sol.notes);
      ef[1] = detail::solve_gram(gram_hadamard_excluding(ef, 1), mttkrp(p.eeg[ku], ef, 1), &sol.notes);
      {
        // Joint trial-amplitude block: Bt appears in the EEG term and, via
        // H_k Bt, in the fMRI term.
        Matrix m = mttkrp(p.eeg[ku], ef, 2);
        const Matrix g = gram_hadamard_excluding(ef, 2);
        m += hmat.transpose() * xk.transpose() * ak;
        ef[2] = detail::solve_right_gram_coupled(g, Matrix(hmat.transpose() * hmat),
                                                 Matrix(ak.transpose() * ak), r, m, &sol.notes);
      }
      const Matrix wk = hmat * ef[2];
      // Spatial block: A_k (W_k^T W_k + l1 I) = X_k W_k + l1 A.
      ak = detail::solve_identity_penalty(Matrix(wk.transpose() * wk), Matrix(xk * wk), p.lambda_1, r,
                                          sol.consensus, &sol.notes);
      // HRF parameter refinement (damped Gauss–Newton, monotone).
      fmri_term[ku] = (xk - ak * wk.transpose()).squaredNorm();
      fmri_term[ku] = detail::dcmtf_hrf_update(p, xk, ak, ef[2], sol.hrf[ku], fmri_term[ku], mu[ku],
                                               opts, sol.nls_step_evals, &sol.notes);
      const HrfOperator hk2(sol.hrf[ku], p.trial_rate_hz, p.volume_rate_hz, trials, p.hrf_support_s);
      sol.fmri_time[ku] = hk2.matrix() * ef[2];
    }
    sol.consensus.setZero();
    for (Index k = 0; k < n; ++k) sol.consensus += sol.fmri_spatial[static_cast<std::size_t>(k)];
    sol.consensus /= static_cast<double>(n);

    for (Index k = 0; k < n; ++k) {
      const std::size_t ku = static_cast<std::size_t>(k);
      cb.eeg_resid += cpd_residual_sq(p.eeg[ku], sol.eeg[ku].factors);
      cb.fmri_resid += fmri_term[ku];
      if (p.lambda_1 > 0) cb.pen_spatial += p.lambda_1 * (sol.fmri_spatial[ku] - sol.consensus).squaredNorm();
    }
    const double total = cb.total();
    if (!std::isfinite(total)) throw numeric_error("solve_dcmtf_flexible: non-finite cost at sweep " + std::to_string(sweep));
    sol.trace.push_back(total);
    sol.traced = cb;
    sol.sweeps = sweep + 1;
    if (sweep > 0 && prev_total - total <= opts.tol * std::max(prev_total, 1e-30)) break;
    prev_total = total;
  }

  sol.cost = dcmtf_flexible_cost(p, sol.eeg, sol.fmri_spatial, sol.consensus, sol.hrf);
  return sol;
}

}  // namespace ctfuse
