#pragma once

// Scoring of estimated factor sets against ground truth: permutation- and
// sign-resolved mean absolute Pearson correlation, matched jointly across
// modes. The assignment is the exhaustive optimum for small component counts
// (<= 8) and greedy above that.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ctfuse/errors.hpp"
#include "ctfuse/linalg.hpp"
#include "ctfuse/tensor.hpp"

namespace ctfuse {

/// Result of matching estimated components to ground-truth components.
struct MatchReport {
  /// assignment[i] = estimate column matched to truth column i (-1 if the
  /// estimate ran out of columns).
  std::vector<Index> assignment;
  /// Per-truth-source score: absolute Pearson correlation averaged over the
  /// scored modes, for the assigned estimate column.
  std::vector<double> per_source_corr;
  double mean_corr = 0.0;           ///< mean of per_source_corr
  double std_src_corr = 0.0;        ///< std over sources within this report
  std::vector<Index> extra_estimates;  ///< estimate columns left unmatched
  std::vector<std::string> notes;   ///< zero-variance columns etc.
};

namespace detail {

/// Mean over modes of |pearson| between truth column i and estimate column j.
inline double column_pair_score(const std::vector<Matrix>& truth, const std::vector<Matrix>& estimate,
                                Index i, Index j, std::vector<std::string>* notes) {
  double acc = 0.0;
  for (std::size_t m = 0; m < truth.size(); ++m) {
    const Vector a = truth[m].col(i);
    const Vector b = estimate[m].col(j);
    const double c = pearson(a, b);
    if (c == 0.0 && notes) {
      const bool az = (a.array() - a.mean()).abs().maxCoeff() == 0.0;
      const bool bz = (b.array() - b.mean()).abs().maxCoeff() == 0.0;
      if (az || bz) {
        notes->push_back("zero-variance column in mode " + std::to_string(m) + " pair (" +
                         std::to_string(i) + "," + std::to_string(j) + "), scored 0");
      }
    }
    acc += std::abs(c);
  }
  return acc / static_cast<double>(truth.size());
}

inline void assign_exhaustive(const Matrix& s, std::vector<Index>& best, double& best_total,
                              std::vector<Index>& cur, std::vector<bool>& used, Index row, double total) {
  const Index n_truth = s.rows();
  const Index n_est = s.cols();
  if (row == n_truth) {
    if (total > best_total) {
      best_total = total;
      best = cur;
    }
    return;
  }
  // Remaining rows can contribute at most 1 each; prune hopeless branches.
  if (total + static_cast<double>(n_truth - row) <= best_total) return;
  for (Index j = 0; j < n_est; ++j) {
    if (used[static_cast<std::size_t>(j)]) continue;
    used[static_cast<std::size_t>(j)] = true;
    cur[static_cast<std::size_t>(row)] = j;
    assign_exhaustive(s, best, best_total, cur, used, row + 1, total + s(row, j));
    used[static_cast<std::size_t>(j)] = false;
  }
}

inline std::vector<Index> assign_greedy(const Matrix& s) {
  const Index n_truth = s.rows();
  const Index n_est = s.cols();
  std::vector<Index> out(static_cast<std::size_t>(n_truth), -1);
  std::vector<bool> row_done(static_cast<std::size_t>(n_truth), false);
  std::vector<bool> col_done(static_cast<std::size_t>(n_est), false);
  const Index n_pairs = std::min(n_truth, n_est);
  for (Index p = 0; p < n_pairs; ++p) {
    Index bi = -1, bj = -1;
    double bv = -1.0;
    for (Index i = 0; i < n_truth; ++i) {
      if (row_done[static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < n_est; ++j) {
        if (col_done[static_cast<std::size_t>(j)]) continue;
        if (s(i, j) > bv) {
          bv = s(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    out[static_cast<std::size_t>(bi)] = bj;
    row_done[static_cast<std::size_t>(bi)] = true;
    col_done[static_cast<std::size_t>(bj)] = true;
  }
  return out;
}

}  // namespace detail

/// Matches estimate columns to truth columns (one-to-one, jointly across all
/// modes) and reports per-source and mean absolute Pearson correlations.
/// `truth` and `estimate` are parallel lists of factor matrices — one per
/// scored mode — whose column counts are the component counts.
inline MatchReport match_and_score(const std::vector<Matrix>& truth, const std::vector<Matrix>& estimate) {
  detail::require(!truth.empty(), "match_and_score: empty truth factor list");
  detail::require(truth.size() == estimate.size(), "match_and_score: mode count mismatch");
  const Index n_truth = truth.front().cols();
  const Index n_est = estimate.front().cols();
  detail::require(n_truth >= 1 && n_est >= 1, "match_and_score: empty factor set");
  for (std::size_t m = 0; m < truth.size(); ++m) {
    detail::require(truth[m].cols() == n_truth, "match_and_score: truth column-count mismatch across modes");
    detail::require(estimate[m].cols() == n_est, "match_and_score: estimate column-count mismatch across modes");
    detail::require(truth[m].rows() == estimate[m].rows(),
                    "match_and_score: row-count mismatch in mode " + std::to_string(m));
  }

  MatchReport rep;
  Matrix s(n_truth, n_est);
  for (Index i = 0; i < n_truth; ++i) {
    for (Index j = 0; j < n_est; ++j) s(i, j) = detail::column_pair_score(truth, estimate, i, j, &rep.notes);
  }

  if (std::max(n_truth, n_est) <= 8) {
    rep.assignment.assign(static_cast<std::size_t>(n_truth), -1);
    std::vector<Index> cur(static_cast<std::size_t>(n_truth), -1);
    std::vector<bool> used(static_cast<std::size_t>(n_est), false);
    double best_total = -1.0;
    if (n_est >= n_truth) {
      detail::assign_exhaustive(s, rep.assignment, best_total, cur, used, 0, 0.0);
    } else {
      // Fewer estimate columns than truth: match the best n_est truth rows,
      // leave the rest unassigned (scored 0).
      rep.assignment = detail::assign_greedy(s);
    }
  } else {
    rep.assignment = detail::assign_greedy(s);
  }

  rep.per_source_corr.assign(static_cast<std::size_t>(n_truth), 0.0);
  std::vector<bool> est_used(static_cast<std::size_t>(n_est), false);
  for (Index i = 0; i < n_truth; ++i) {
    const Index j = rep.assignment[static_cast<std::size_t>(i)];
    if (j >= 0) {
      rep.per_source_corr[static_cast<std::size_t>(i)] = s(i, j);
      est_used[static_cast<std::size_t>(j)] = true;
    }
  }
  for (Index j = 0; j < n_est; ++j) {
    if (!est_used[static_cast<std::size_t>(j)]) rep.extra_estimates.push_back(j);
  }

  double mean = 0.0;
  for (double v : rep.per_source_corr) mean += v;
  mean /= static_cast<double>(n_truth);
  double var = 0.0;
  for (double v : rep.per_source_corr) var += (v - mean) * (v - mean);
  rep.mean_corr = mean;
  rep.std_src_corr = n_truth > 1 ? std::sqrt(var / static_cast<double>(n_truth - 1)) : 0.0;
  return rep;
}

/// Convenience overload scoring two CPD factor bundles over all modes.
inline MatchReport match_and_score(const std::vector<Matrix>& truth, const std::vector<Matrix>& estimate,
                                   const std::vector<Index>& modes) {
  std::vector<Matrix> t, e;
  for (Index m : modes) {
    t.push_back(truth[static_cast<std::size_t>(m)]);
    e.push_back(estimate[static_cast<std::size_t>(m)]);
  }
  return match_and_score(t, e);
}

}  // namespace ctfuse
