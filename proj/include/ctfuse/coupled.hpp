#pragma once

// Soft- and hard-coupled joint decompositions of an fMRI tensor
// (voxels x volumes x subjects) and an EEG tensor
// (erp-samples x electrodes x trials x subjects).
//
// The soft objective is
//   || T - [A, B, C] ||^2 + || Y - [E, At, Bt, Ct] ||^2
//     + la * || L A_c - At_c ||^2     (spatial coupling, optional transform L)
//     + lb * || B_c - H Bt_c ||^2     (temporal coupling through the HRF map H)
//     + lc * || C_c - Ct_c ||^2       (subject-gain coupling)
// where the subscript c selects the first R_c (shared) columns. Hard temporal
// coupling replaces the lb-penalty with the equality B_c == H Bt_c, carried
// as a shared variable. The PARAFAC2 variant replaces the EEG mode-0 factor
// E by per-subject E_k = P_k F with column-orthonormal P_k.
//
// All block updates solve their regularized least-squares subproblems
// exactly, so every sweep is non-increasing in the total cost. Independent
// full-reconstruction cost evaluators (coupled_cpd_cost, pf2_cpd_cost) are
// provided for bookkeeping checks; solvers report their final cost through
// those evaluators.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctfuse/errors.hpp"
#include "ctfuse/hrf.hpp"
#include "ctfuse/linalg.hpp"
#include "ctfuse/metrics.hpp"
#include "ctfuse/models.hpp"
#include "ctfuse/rng.hpp"
#include "ctfuse/tensor.hpp"

namespace ctfuse {

/// Joint decomposition instance. Both tensors end with the subject mode and
/// must agree on its size. The coupled components are the first r_c columns
/// of each factor set by convention.
struct CouplingProblem {
  DenseTensor fmri;  ///< voxels x volumes x subjects
  DenseTensor eeg;   ///< erp-samples x electrodes x trials x subjects
  Index r_fmri = 0;
  Index r_eeg = 0;
  Index r_c = 0;

  double lambda_a = 0.0;  ///< spatial-coupling weight
  double lambda_b = 0.0;  ///< temporal-coupling weight
  double lambda_c = 0.0;  ///< subject-coupling weight
  bool hard_time = false;  ///< replace the lb penalty with B_c == H Bt_c

  std::optional<Matrix> lead_field;   ///< electrodes x voxels, needed if lambda_a > 0
  std::optional<HrfOperator> hrf_op;  ///< volumes x trials, needed if lambda_b > 0 or hard_time

  void validate() const {
    detail::require(fmri.order() == 3, "CouplingProblem: fmri tensor must be 3-way");
    detail::require(eeg.order() == 4, "CouplingProblem: eeg tensor must be 4-way");
    detail::require(fmri.dim(2) == eeg.dim(3), "CouplingProblem: subject mode sizes differ");
    detail::require(r_fmri >= 1 && r_eeg >= 1, "CouplingProblem: ranks must be >= 1");
    detail::require(r_c >= 0 && r_c <= std::min(r_fmri, r_eeg),
                    "CouplingProblem: r_c must not exceed min(r_fmri, r_eeg)");
    detail::require(lambda_a >= 0 && lambda_b >= 0 && lambda_c >= 0,
                    "CouplingProblem: penalty weights must be >= 0");
    detail::require(!(hard_time && lambda_b > 0),
                    "CouplingProblem: hard temporal coupling excludes a lambda_b penalty");
    if (r_c > 0 && lambda_a > 0) {
      detail::require(lead_field.has_value(), "CouplingProblem: lambda_a > 0 needs a lead field");
      detail::require(lead_field->rows() == eeg.dim(1) && lead_field->cols() == fmri.dim(0),
                      "CouplingProblem: lead field must be electrodes x voxels");
    }
    if (r_c > 0 && (lambda_b > 0 || hard_time)) {
      detail::require(hrf_op.has_value(), "CouplingProblem: temporal coupling needs an HRF operator");
      detail::require(hrf_op->rows() == fmri.dim(1) && hrf_op->cols() == eeg.dim(2),
                      "CouplingProblem: HRF operator must be volumes x trials");
    }
  }
};

/// Per-term cost values; total() is their exact sum.
struct CostBreakdown {
  double fmri_resid = 0.0;
  double eeg_resid = 0.0;
  double pen_spatial = 0.0;
  double pen_time = 0.0;
  double pen_subject = 0.0;

  double total() const { return fmri_resid + eeg_resid + pen_spatial + pen_time + pen_subject; }
};

/// Options shared by the coupled solvers.
struct CoupledOptions {
  int max_sweeps = 120;
  double tol = 1e-8;            ///< relative per-sweep total-cost decrease
  std::uint64_t seed = 0;
  int warm_max_iters = 80;      ///< iterations for internal warm-start fits
  int warm_n_starts = 2;
  double rc_threshold = 0.8;    ///< similarity threshold for estimate_rc
};

/// Warm-start factor pair with coupled columns already leading.
struct CoupledInit {
  CpdFactors fmri;  ///< {A, B, C}
  CpdFactors eeg;   ///< {E, At, Bt, Ct}
};

/// Solution of a coupled fit. For the PARAFAC2 variant, eeg.factors[0] is
/// the R x R cross-product factor F and p holds the per-subject orthonormal
/// maps, so subject k's realized mode-0 loading is p[k] * F.
struct CoupledSolution {
  CpdFactors fmri;
  CpdFactors eeg;
  std::vector<Matrix> p;       ///< PARAFAC2 only
  CostBreakdown cost;          ///< independent re-evaluation on the returned factors
  std::vector<double> trace;   ///< internally traced total cost per sweep
  CostBreakdown traced;        ///< per-term values behind trace.back()
  int sweeps = 0;
  double fmri_scale = 1.0;     ///< Frobenius norm divided out of the input
  double eeg_scale = 1.0;
  std::vector<std::string> notes;
};

/// Returns a copy of the problem with both tensors scaled to unit Frobenius
/// norm (the normalization the solvers apply internally).
inline CouplingProblem normalized(const CouplingProblem& p, double* fmri_scale = nullptr,
                                  double* eeg_scale = nullptr) {
  CouplingProblem out = p;
  const double nf = out.fmri.frobenius_norm();
  const double ne = out.eeg.frobenius_norm();
  detail::require(nf > 0 && ne > 0, "normalized: zero-norm dataset");
  out.fmri.values() /= nf;
  out.eeg.values() /= ne;
  if (fmri_scale) *fmri_scale = nf;
  if (eeg_scale) *eeg_scale = ne;
  return out;
}

namespace detail {

/// Solves X G + K X S = RHS for X (n x r), where G (r x r) and K (n x n) are
/// symmetric and S is symmetric and zero outside its leading rc x rc block.
/// Exact dense solve over vec(X); sized for small n*r (factor updates whose
/// columns the coupling ties together).
inline Matrix solve_right_gram_coupled(const Matrix& g, const Matrix& k, const Matrix& s_cc, Index rc,
                                       const Matrix& rhs, std::vector<std::string>* notes) {
  const Index r = g.rows();
  const Index n = rhs.rows();
  require(rc >= 1 && rc <= r, "solve_right_gram_coupled: bad coupled column count");
  require(s_cc.rows() == rc && s_cc.cols() == rc, "solve_right_gram_coupled: S block shape");
  require(k.rows() == n && k.cols() == n, "solve_right_gram_coupled: K shape");
  require(n * r <= 5000, "solve_right_gram_coupled: system too large for the dense vec solve");

  Matrix sys = Matrix::Zero(n * r, n * r);
  for (Index s = 0; s < r; ++s) {
    for (Index q = 0; q < r; ++q) {
      // (X G)(i, s) contributes G(q, s) to the coefficient of X(i, q).
      sys.block(s * n, q * n, n, n).diagonal().array() += g(q, s);
    }
  }
  for (Index s = 0; s < rc; ++s) {
    for (Index q = 0; q < rc; ++q) {
      // (K X S)(i, s) contributes K(i, j) * S(q, s) to the coefficient of X(j, q).
      sys.block(s * n, q * n, n, n) += s_cc(q, s) * k;
    }
  }
  const Eigen::Map<const Vector> b(rhs.data(), n * r);
  Vector x = sys.ldlt().solve(b);
  const double resid = (sys * x - b).norm();
  if (!x.allFinite() || resid > 1e-8 * std::max(1.0, b.norm())) {
    sys.diagonal().array() += 1e-10;
    x = sys.ldlt().solve(b);
    if (notes) notes->push_back("ridge 1e-10 applied to coupled-column system");
  }
  return Eigen::Map<const Matrix>(x.data(), n, r);
}

/// Solves X (G + lambda * Sel_rc) = RHS: the identity-transform penalty path.
inline Matrix solve_identity_penalty(const Matrix& g, Matrix rhs, double lambda, Index rc,
                                     const Matrix& target_c, std::vector<std::string>* notes) {
  Matrix gp = g;
  if (lambda > 0 && rc > 0) {
    gp.diagonal().head(rc).array() += lambda;
    rhs.leftCols(rc) += lambda * target_c;
  }
  return solve_gram(gp, rhs, notes);
}

inline Matrix coupled_block(const Matrix& m, Index rc) { return m.leftCols(rc); }

/// || M ||^2 of the spatial coupling residual L A_c - At_c (0 if inactive).
inline double spatial_penalty(const CouplingProblem& p, const Matrix& a, const Matrix& at) {
  if (p.lambda_a <= 0 || p.r_c == 0) return 0.0;
  return p.lambda_a * (*p.lead_field * a.leftCols(p.r_c) - at.leftCols(p.r_c)).squaredNorm();
}

inline double time_penalty(const CouplingProblem& p, const Matrix& b, const Matrix& bt) {
  if (p.lambda_b <= 0 || p.r_c == 0) return 0.0;
  return p.lambda_b * (b.leftCols(p.r_c) - p.hrf_op->matrix() * bt.leftCols(p.r_c)).squaredNorm();
}

inline double subject_penalty(const CouplingProblem& p, const Matrix& c, const Matrix& ct) {
  if (p.lambda_c <= 0 || p.r_c == 0) return 0.0;
  return p.lambda_c * (c.leftCols(p.r_c) - ct.leftCols(p.r_c)).squaredNorm();
}

}  // namespace detail

/// Independent evaluation of the soft/hard coupled-CPD objective on given
/// factors: data terms by full reconstruction, penalties elementwise.
inline CostBreakdown coupled_cpd_cost(const CouplingProblem& p, const CpdFactors& fmri,
                                      const CpdFactors& eeg) {
  p.validate();
  detail::require(fmri.order() == 3 && eeg.order() == 4, "coupled_cpd_cost: factor order mismatch");
  CostBreakdown out;
  out.fmri_resid = cpd_residual_sq(p.fmri, fmri.factors);
  out.eeg_resid = cpd_residual_sq(p.eeg, eeg.factors);
  out.pen_spatial = detail::spatial_penalty(p, fmri.factors[0], eeg.factors[1]);
  out.pen_time = detail::time_penalty(p, fmri.factors[1], eeg.factors[2]);
  out.pen_subject = detail::subject_penalty(p, fmri.factors[2], eeg.factors[3]);
  return out;
}

/// Independent evaluation of the PARAFAC2-coupled objective: the EEG data
/// term uses per-subject loadings p[k] * F, where F = eeg.factors[0].
inline CostBreakdown pf2_cpd_cost(const CouplingProblem& prob, const CpdFactors& fmri,
                                  const CpdFactors& eeg, const std::vector<Matrix>& p_maps) {
  prob.validate();
  detail::require(p_maps.size() == static_cast<std::size_t>(prob.eeg.dim(3)),
                  "pf2_cpd_cost: one orthonormal map per subject required");
  CostBreakdown out;
  out.fmri_resid = cpd_residual_sq(prob.fmri, fmri.factors);
  const Matrix& f = eeg.factors[0];
  const Matrix z = khatri_rao(eeg.factors[2], eeg.factors[1]);  // trials slow, electrodes fast
  const Index slice_cols = prob.eeg.dim(1) * prob.eeg.dim(2);
  const auto view = prob.eeg.mode0_view();
  double acc = 0.0;
  for (Index k = 0; k < prob.eeg.dim(3); ++k) {
    const Matrix model =
        p_maps[static_cast<std::size_t>(k)] * f * eeg.factors[3].row(k).asDiagonal() * z.transpose();
    acc += (view.middleCols(k * slice_cols, slice_cols) - model).squaredNorm();
  }
  out.eeg_resid = acc;
  out.pen_spatial = detail::spatial_penalty(prob, fmri.factors[0], eeg.factors[1]);
  out.pen_time = detail::time_penalty(prob, fmri.factors[1], eeg.factors[2]);
  out.pen_subject = detail::subject_penalty(prob, fmri.factors[2], eeg.factors[3]);
  return out;
}

/// Which factor pair a coupling acts on.
enum class CoupleAxis { spatial, time, subject };

/// Result of shared-component estimation.
struct RcEstimate {
  Index r_c = 0;                                ///< pairs with similarity >= threshold
  std::vector<std::pair<Index, Index>> pairs;   ///< (fmri column, eeg column), best first
  std::vector<double> corrs;                    ///< absolute correlations, parallel to pairs
};

/// Estimates the number of shared components by greedily pairing factor
/// columns across modalities on the coupled axis and counting pairs whose
/// absolute Pearson correlation reaches `threshold`. For the time axis the
/// EEG trial columns are passed through `hrf` before correlating; for the
/// spatial axis the fMRI voxel columns are passed through `lead_field`.
inline RcEstimate estimate_rc(const CpdFactors& fmri, const CpdFactors& eeg, CoupleAxis axis,
                              double threshold = 0.8, const Matrix* lead_field = nullptr,
                              const HrfOperator* hrf = nullptr) {
  detail::require(fmri.order() == 3 && eeg.order() == 4, "estimate_rc: expects 3-way and 4-way factor sets");
  detail::require(threshold > 0 && threshold < 1, "estimate_rc: threshold must lie in (0, 1)");
  Matrix left, right;
  switch (axis) {
    case CoupleAxis::spatial:
      left = lead_field ? Matrix(*lead_field * fmri.factors[0]) : fmri.factors[0];
      right = eeg.factors[1];
      break;
    case CoupleAxis::time:
      detail::require(hrf != nullptr, "estimate_rc: time axis requires the HRF operator");
      left = fmri.factors[1];
      right = hrf->matrix() * eeg.factors[2];
      break;
    case CoupleAxis::subject:
      left = fmri.factors[2];
      right = eeg.factors[3];
      break;
  }
  detail::require(left.rows() == right.rows(), "estimate_rc: coupled-axis lengths differ");

  RcEstimate out;
  Matrix s(left.cols(), right.cols());
  for (Index i = 0; i < left.cols(); ++i) {
    for (Index j = 0; j < right.cols(); ++j) s(i, j) = std::abs(pearson(left.col(i), right.col(j)));
  }
  const Index n_pairs = std::min(left.cols(), right.cols());
  std::vector<bool> row_used(static_cast<std::size_t>(left.cols()), false);
  std::vector<bool> col_used(static_cast<std::size_t>(right.cols()), false);
  for (Index p = 0; p < n_pairs; ++p) {
    Index bi = -1, bj = -1;
    double bv = -1.0;
    for (Index i = 0; i < left.cols(); ++i) {
      if (row_used[static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < right.cols(); ++j) {
        if (col_used[static_cast<std::size_t>(j)]) continue;
        if (s(i, j) > bv) {
          bv = s(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    row_used[static_cast<std::size_t>(bi)] = true;
    col_used[static_cast<std::size_t>(bj)] = true;
    out.pairs.emplace_back(bi, bj);
    out.corrs.push_back(bv);
    if (bv >= threshold) ++out.r_c;
  }
  return out;
}

namespace detail {

/// Unit-norm + sign canonicalization with all column scale pushed into the
/// factor at `carrier`: other factors get unit columns whose largest-
/// magnitude entry is positive, compensating flips/scales on the carrier.
inline void canonicalize_into(std::vector<Matrix>& factors, Index carrier) {
  for (Index m = 0; m < static_cast<Index>(factors.size()); ++m) {
    if (m == carrier) continue;
    Matrix& f = factors[static_cast<std::size_t>(m)];
    for (Index r = 0; r < f.cols(); ++r) {
      double s = f.col(r).norm();
      if (s > 0) {
        Index imax = 0;
        f.col(r).cwiseAbs().maxCoeff(&imax);
        if (f(imax, r) < 0) s = -s;
        f.col(r) /= s;
        factors[static_cast<std::size_t>(carrier)].col(r) *= s;
      }
    }
  }
}

inline std::vector<Matrix> reorder_columns(const std::vector<Matrix>& factors, const std::vector<Index>& order) {
  std::vector<Matrix> out(factors.size());
  for (std::size_t m = 0; m < factors.size(); ++m) {
    out[m].resize(factors[m].rows(), factors[m].cols());
    for (Index j = 0; j < static_cast<Index>(order.size()); ++j) {
      out[m].col(j) = factors[m].col(order[static_cast<std::size_t>(j)]);
    }
  }
  return out;
}

}  // namespace detail

/// Builds a warm start for the coupled solvers: independent CPD fits of both
/// tensors, column pairing on the time axis, reordering so the best r_c
/// pairs lead, sign alignment of each coupled pair, and scale
/// canonicalization into the temporal factors (B and Bt).
inline CoupledInit coupled_warm_start(const CouplingProblem& p, const CoupledOptions& o) {
  p.validate();
  FitOptions fo;
  fo.max_iters = o.warm_max_iters;
  fo.n_starts = o.warm_n_starts;
  fo.init = FitOptions::Init::svd;
  fo.tol = 1e-9;
  fo.normalize = false;
  fo.seed = seed_combine(o.seed, "warm-fmri");
  CpdFitResult ff = cpd_fit(p.fmri, p.r_fmri, fo);
  fo.seed = seed_combine(o.seed, "warm-eeg");
  CpdFitResult fe = cpd_fit(p.eeg, p.r_eeg, fo);

  CoupledInit init;
  init.fmri = std::move(ff.factors);
  init.eeg = std::move(fe.factors);
  detail::canonicalize_into(init.fmri.factors, 1);
  detail::canonicalize_into(init.eeg.factors, 2);

  if (p.r_c > 0) {
    const HrfOperator* h = p.hrf_op ? &*p.hrf_op : nullptr;
    const Matrix* l = p.lead_field ? &*p.lead_field : nullptr;
    RcEstimate est;
    if (h != nullptr) {
      est = estimate_rc(init.fmri, init.eeg, CoupleAxis::time, o.rc_threshold, l, h);
    } else if (l != nullptr) {
      est = estimate_rc(init.fmri, init.eeg, CoupleAxis::spatial, o.rc_threshold, l, h);
    } else {
      est = estimate_rc(init.fmri, init.eeg, CoupleAxis::subject, o.rc_threshold, l, h);
    }
    // Coupled block first (best pairs), remaining columns after, both sides.
    std::vector<Index> forder, eorder;
    std::vector<bool> fused(static_cast<std::size_t>(p.r_fmri), false);
    std::vector<bool> eused(static_cast<std::size_t>(p.r_eeg), false);
    for (Index q = 0; q < p.r_c && q < static_cast<Index>(est.pairs.size()); ++q) {
      forder.push_back(est.pairs[static_cast<std::size_t>(q)].first);
      eorder.push_back(est.pairs[static_cast<std::size_t>(q)].second);
      fused[static_cast<std::size_t>(est.pairs[static_cast<std::size_t>(q)].first)] = true;
      eused[static_cast<std::size_t>(est.pairs[static_cast<std::size_t>(q)].second)] = true;
    }
    for (Index j = 0; j < p.r_fmri; ++j) {
      if (!fused[static_cast<std::size_t>(j)]) forder.push_back(j);
    }
    for (Index j = 0; j < p.r_eeg; ++j) {
      if (!eused[static_cast<std::size_t>(j)]) eorder.push_back(j);
    }
    init.fmri.factors = detail::reorder_columns(init.fmri.factors, forder);
    init.eeg.factors = detail::reorder_columns(init.eeg.factors, eorder);
    // Sign-align each coupled pair on the temporal axis (flip absorbed into
    // the fMRI spatial factor so the model is unchanged).
    if (h != nullptr) {
      for (Index q = 0; q < p.r_c; ++q) {
        const Vector hb = h->matrix() * init.eeg.factors[2].col(q);
        if (pearson(init.fmri.factors[1].col(q), hb) < 0) {
          init.fmri.factors[1].col(q) *= -1.0;
          init.fmri.factors[0].col(q) *= -1.0;
        }
      }
    }
  }
  return init;
}

/// Block-coordinate solver for the soft (and hard) coupled-CPD objective.
/// Update order per sweep: A, B, C (fMRI), then E, At, Bt, Ct (EEG); in hard
/// mode B's coupled columns are the shared variable H Bt_c. Inputs are
/// normalized to unit Frobenius norm internally; `init` (optional) must then
/// be scaled accordingly — pass factors fitted on normalized data or let the
/// solver build its own warm start.
inline CoupledSolution solve_coupled_cpd(const CouplingProblem& input, const CoupledOptions& opts = {},
                                         const CoupledInit* init = nullptr) {
  input.validate();
  CoupledSolution sol;
  const CouplingProblem p = normalized(input, &sol.fmri_scale, &sol.eeg_scale);
  const Index rc = p.r_c;
  const double fmri_sq = p.fmri.squared_norm();
  const double eeg_sq = p.eeg.squared_norm();

  CoupledInit warm;
  if (init) {
    warm = *init;
  } else {
    warm = coupled_warm_start(p, opts);
  }
  std::vector<Matrix>& fm = warm.fmri.factors;
  std::vector<Matrix>& ee = warm.eeg.factors;
  detail::require(static_cast<Index>(fm.size()) == 3 && static_cast<Index>(ee.size()) == 4,
                  "solve_coupled_cpd: warm start factor count mismatch");

  const Matrix hmat = (p.hrf_op ? p.hrf_op->matrix() : Matrix());
  const Matrix hth = (p.hrf_op ? Matrix(hmat.transpose() * hmat) : Matrix());
  const Matrix ltl = (p.lead_field ? Matrix(p.lead_field->transpose() * *p.lead_field) : Matrix());

  if (p.hard_time && rc > 0) fm[1].leftCols(rc) = hmat * ee[2].leftCols(rc);

  double prev_total = std::numeric_limits<double>::infinity();
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    // --- fMRI blocks ---
    {  // A
      const Matrix m = mttkrp(p.fmri, fm, 0);
      const Matrix g = gram_hadamard_excluding(fm, 0);
      if (p.lambda_a > 0 && rc > 0) {
        Matrix rhs = m;
        rhs.leftCols(rc) += p.lambda_a * p.lead_field->transpose() * ee[1].leftCols(rc);
        fm[0] = detail::solve_right_gram_coupled(g, ltl, p.lambda_a * Matrix::Identity(rc, rc), rc, rhs,
                                                 &sol.notes);
      } else {
        fm[0] = detail::solve_gram(g, m, &sol.notes);
      }
    }
    {  // B
      const Matrix m = mttkrp(p.fmri, fm, 1);
      const Matrix g = gram_hadamard_excluding(fm, 1);
      if (p.hard_time && rc > 0) {
        const Index rd = p.r_fmri - rc;
        if (rd > 0) {
          // Coupled columns are fixed at H Bt_c here; solve the distinct block.
          const Matrix rhs = m.rightCols(rd) - fm[1].leftCols(rc) * g.topRightCorner(rc, rd);
          fm[1].rightCols(rd) = detail::solve_gram(g.bottomRightCorner(rd, rd), rhs, &sol.notes);
        }
      } else if (p.lambda_b > 0 && rc > 0) {
        fm[1] = detail::solve_identity_penalty(g, m, p.lambda_b, rc, Matrix(hmat * ee[2].leftCols(rc)),
                                               &sol.notes);
      } else {
        fm[1] = detail::solve_gram(g, m, &sol.notes);
      }
    }
    Matrix m_fmri_last, g_fmri_last;
    {  // C
      m_fmri_last = mttkrp(p.fmri, fm, 2);
      g_fmri_last = gram_hadamard_excluding(fm, 2);
      fm[2] = detail::solve_identity_penalty(g_fmri_last, m_fmri_last, p.lambda_c, rc,
                                             Matrix(ee[3].leftCols(rc)), &sol.notes);
    }
    // --- EEG blocks ---
    {  // E
      const Matrix m = mttkrp(p.eeg, ee, 0);
      const Matrix g = gram_hadamard_excluding(ee, 0);
      ee[0] = detail::solve_gram(g, m, &sol.notes);
    }
    {  // At
      const Matrix m = mttkrp(p.eeg, ee, 1);
      const Matrix g = gram_hadamard_excluding(ee, 1);
      Matrix target;
      if (p.lambda_a > 0 && rc > 0) target = *p.lead_field * fm[0].leftCols(rc);
      ee[1] = detail::solve_identity_penalty(g, m, p.lambda_a, rc, target, &sol.notes);
    }
    {  // Bt
      const Matrix m = mttkrp(p.eeg, ee, 2);
      const Matrix g = gram_hadamard_excluding(ee, 2);
      if (p.hard_time && rc > 0) {
        // Joint system: Bt appears in the EEG term and, through B_c = H Bt_c,
        // in the fMRI term. Fresh fMRI Gram pieces at the current A, C.
        const Matrix m_f = mttkrp(p.fmri, fm, 1);
        const Matrix g_f = gram_hadamard_excluding(fm, 1);
        Matrix rhs = m;
        const Index rd = p.r_fmri - rc;
        Matrix coupled_rhs = m_f.leftCols(rc);
        if (rd > 0) coupled_rhs -= fm[1].rightCols(rd) * g_f.bottomLeftCorner(rd, rc);
        rhs.leftCols(rc) += hmat.transpose() * coupled_rhs;
        ee[2] = detail::solve_right_gram_coupled(g, hth, Matrix(g_f.topLeftCorner(rc, rc)), rc, rhs,
                                                 &sol.notes);
        fm[1].leftCols(rc) = hmat * ee[2].leftCols(rc);
      } else if (p.lambda_b > 0 && rc > 0) {
        Matrix rhs = m;
        rhs.leftCols(rc) += p.lambda_b * hmat.transpose() * fm[1].leftCols(rc);
        ee[2] = detail::solve_right_gram_coupled(g, hth, p.lambda_b * Matrix::Identity(rc, rc), rc, rhs,
                                                 &sol.notes);
      } else {
        ee[2] = detail::solve_gram(g, m, &sol.notes);
      }
    }
    Matrix m_eeg_last, g_eeg_last;
    {  // Ct
      m_eeg_last = mttkrp(p.eeg, ee, 3);
      g_eeg_last = gram_hadamard_excluding(ee, 3);
      ee[3] = detail::solve_identity_penalty(g_eeg_last, m_eeg_last, p.lambda_c, rc,
                                             Matrix(fm[2].leftCols(rc)), &sol.notes);
    }

    // --- bookkeeping ---
    CostBreakdown cb;
    if (p.hard_time) {
      cb.fmri_resid = cpd_residual_sq(p.fmri, fm);  // B_c changed after the C update
    } else {
      cb.fmri_resid = detail::residual_from_grams(fmri_sq, m_fmri_last, fm[2], g_fmri_last);
    }
    cb.eeg_resid = detail::residual_from_grams(eeg_sq, m_eeg_last, ee[3], g_eeg_last);
    cb.pen_spatial = detail::spatial_penalty(p, fm[0], ee[1]);
    cb.pen_time = detail::time_penalty(p, fm[1], ee[2]);
    cb.pen_subject = detail::subject_penalty(p, fm[2], ee[3]);
    const double total = cb.total();
    if (!std::isfinite(total)) throw numeric_error("solve_coupled_cpd: non-finite cost at sweep " + std::to_string(sweep));
    sol.trace.push_back(total);
    sol.traced = cb;
    sol.sweeps = sweep + 1;
    if (sweep > 0 && prev_total - total <= opts.tol * std::max(prev_total, 1e-30)) break;
    prev_total = total;
  }

  sol.fmri = std::move(warm.fmri);
  sol.eeg = std::move(warm.eeg);
  sol.cost = coupled_cpd_cost(p, sol.fmri, sol.eeg);
  return sol;
}

/// Block-coordinate solver for the PARAFAC2-coupled objective: per-subject
/// orthonormal maps P_k absorb ERP latency differences; one Procrustes
/// update of every P_k per sweep, then the same penalized factor updates as
/// solve_coupled_cpd on the projected EEG stack.
inline CoupledSolution solve_pf2_cpd(const CouplingProblem& input, const CoupledOptions& opts = {},
                                     const CoupledInit* init = nullptr) {
  input.validate();
  detail::require(!input.hard_time, "solve_pf2_cpd: hard temporal coupling is not supported");
  CoupledSolution sol;
  const CouplingProblem p = normalized(input, &sol.fmri_scale, &sol.eeg_scale);
  const Index rc = p.r_c;
  const Index r = p.r_eeg;
  const Index n_sub = p.eeg.dim(3);
  const Index slice_cols = p.eeg.dim(1) * p.eeg.dim(2);
  const double fmri_sq = p.fmri.squared_norm();
  const double eeg_sq = p.eeg.squared_norm();

  CoupledInit warm;
  if (init) {
    warm = *init;
  } else {
    warm = coupled_warm_start(p, opts);
  }
  std::vector<Matrix>& fm = warm.fmri.factors;
  std::vector<Matrix>& ee = warm.eeg.factors;

  // Split the warm E into orthonormal P_k (equal across subjects at start)
  // times the R x R factor F.
  sol.p.assign(static_cast<std::size_t>(n_sub), Matrix());
  {
    Eigen::HouseholderQR<Matrix> qr(ee[0]);
    const Matrix q = qr.householderQ() * Matrix::Identity(p.eeg.dim(0), r);
    const Matrix f0 = q.transpose() * ee[0];
    for (Index k = 0; k < n_sub; ++k) sol.p[static_cast<std::size_t>(k)] = q;
    ee[0] = f0;  // now R x R
  }

  const Matrix hmat = (p.hrf_op ? p.hrf_op->matrix() : Matrix());
  const Matrix hth = (p.hrf_op ? Matrix(hmat.transpose() * hmat) : Matrix());
  const Matrix ltl = (p.lead_field ? Matrix(p.lead_field->transpose() * *p.lead_field) : Matrix());
  const auto view = p.eeg.mode0_view();

  DenseTensor y({r, p.eeg.dim(1), p.eeg.dim(2), n_sub});
  Eigen::Map<Matrix> y_view(y.values().data(), r, slice_cols * n_sub);

  double prev_total = std::numeric_limits<double>::infinity();
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    // --- P_k updates (orthogonal Procrustes against the current model) ---
    const Matrix z = khatri_rao(ee[2], ee[1]);  // slice_cols x r
    double projected_sq = 0.0;
    for (Index k = 0; k < n_sub; ++k) {
      const auto tk = view.middleCols(k * slice_cols, slice_cols);
      const Matrix tz = tk * z;  // erp-samples x r
      const Matrix w = ee[0] * ee[3].row(k).asDiagonal() * tz.transpose();
      const SvdResult dec = svd(w);
      sol.p[static_cast<std::size_t>(k)] = dec.v * dec.u.transpose();
      y_view.middleCols(k * slice_cols, slice_cols).noalias() =
          sol.p[static_cast<std::size_t>(k)].transpose() * tk;
    }
    projected_sq = y_view.squaredNorm();

    // --- fMRI blocks (same as the CPD-coupled solver) ---
    {
      const Matrix m = mttkrp(p.fmri, fm, 0);
      const Matrix g = gram_hadamard_excluding(fm, 0);
      if (p.lambda_a > 0 && rc > 0) {
        Matrix rhs = m;
        rhs.leftCols(rc) += p.lambda_a * p.lead_field->transpose() * ee[1].leftCols(rc);
        fm[0] = detail::solve_right_gram_coupled(g, ltl, p.lambda_a * Matrix::Identity(rc, rc), rc, rhs,
                                                 &sol.notes);
      } else {
        fm[0] = detail::solve_gram(g, m, &sol.notes);
      }
    }
    {
      const Matrix m = mttkrp(p.fmri, fm, 1);
      const Matrix g = gram_hadamard_excluding(fm, 1);
      if (p.lambda_b > 0 && rc > 0) {
        fm[1] = detail::solve_identity_penalty(g, m, p.lambda_b, rc, Matrix(hmat * ee[2].leftCols(rc)),
                                               &sol.notes);
      } else {
        fm[1] = detail::solve_gram(g, m, &sol.notes);
      }
    }
    Matrix m_fmri_last, g_fmri_last;
    {
      m_fmri_last = mttkrp(p.fmri, fm, 2);
      g_fmri_last = gram_hadamard_excluding(fm, 2);
      fm[2] = detail::solve_identity_penalty(g_fmri_last, m_fmri_last, p.lambda_c, rc,
                                             Matrix(ee[3].leftCols(rc)), &sol.notes);
    }
    // --- EEG blocks on the projected stack ---
    {
      const Matrix m = mttkrp(y, ee, 0);
      const Matrix g = gram_hadamard_excluding(ee, 0);
      ee[0] = detail::solve_gram(g, m, &sol.notes);
    }
    {
      const Matrix m = mttkrp(y, ee, 1);
      const Matrix g = gram_hadamard_excluding(ee, 1);
      Matrix target;
      if (p.lambda_a > 0 && rc > 0) target = *p.lead_field * fm[0].leftCols(rc);
      ee[1] = detail::solve_identity_penalty(g, m, p.lambda_a, rc, target, &sol.notes);
    }
    {
      const Matrix m = mttkrp(y, ee, 2);
      const Matrix g = gram_hadamard_excluding(ee, 2);
      if (p.lambda_b > 0 && rc > 0) {
        Matrix rhs = m;
        rhs.leftCols(rc) += p.lambda_b * hmat.transpose() * fm[1].leftCols(rc);
        ee[2] = detail::solve_right_gram_coupled(g, hth, p.lambda_b * Matrix::Identity(rc, rc), rc, rhs,
                                                 &sol.notes);
      } else {
        ee[2] = detail::solve_gram(g, m, &sol.notes);
      }
    }
    Matrix m_eeg_last, g_eeg_last;
    {
      m_eeg_last = mttkrp(y, ee, 3);
      g_eeg_last = gram_hadamard_excluding(ee, 3);
      ee[3] = detail::solve_identity_penalty(g_eeg_last, m_eeg_last, p.lambda_c, rc,
                                             Matrix(fm[2].leftCols(rc)), &sol.notes);
    }

    CostBreakdown cb;
    cb.fmri_resid = detail::residual_from_grams(fmri_sq, m_fmri_last, fm[2], g_fmri_last);
    // || T - P model ||^2 = sum_k (||T_k||^2 - ||Y_k||^2) + ||Y - model||^2
    // for column-orthonormal P_k.
    cb.eeg_resid = (eeg_sq - projected_sq) +
                   detail::residual_from_grams(projected_sq, m_eeg_last, ee[3], g_eeg_last);
    cb.pen_spatial = detail::spatial_penalty(p, fm[0], ee[1]);
    cb.pen_time = detail::time_penalty(p, fm[1], ee[2]);
    cb.pen_subject = detail::subject_penalty(p, fm[2], ee[3]);
    const double total = cb.total();
    if (!std::isfinite(total)) throw numeric_error("solve_pf2_cpd: non-finite cost at sweep " + std::to_string(sweep));
    sol.trace.push_back(total);
    sol.traced = cb;
    sol.sweeps = sweep + 1;
    if (sweep > 0 && prev_total - total <= opts.tol * std::max(prev_total, 1e-30)) break;
    prev_total = total;
  }

  sol.fmri = std::move(warm.fmri);
  sol.eeg = std::move(warm.eeg);
  sol.cost = pf2_cpd_cost(p, sol.fmri, sol.eeg, sol.p);
  return sol;
}

/// Largest deviation from column-orthonormality over the per-subject maps.
inline double pf2_orthonormality_deviation(const CoupledSolution& sol) {
  double worst = 0.0;
  for (const Matrix& pk : sol.p) {
    worst = std::max(worst, (pk.transpose() * pk - Matrix::Identity(pk.cols(), pk.cols())).norm());
  }
  return worst;
}

}  // namespace ctfuse
