#pragma once

// Experiment orchestration: scenario x method x lambda grids over replicated
// synthetic datasets, scored against ground truth and emitted as CSV rows
// plus a mean-over-replications summary.
//
// Jobs are grouped by (scenario, replication): one group generates its
// dataset once, computes one shared warm start for the coupled tensor
// methods, and runs every (method, lambda) cell on that data. Groups are
// independent and execute on a bounded worker pool; rows are merged in
// config order regardless of completion order, and every seed is derived
// from (master seed, scenario, method, lambdas, replication), so a rerun
// with the same configuration is bit-identical.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ctfuse/config.hpp"
#include "ctfuse/coupled.hpp"
#include "ctfuse/dcmtf.hpp"
#include "ctfuse/errors.hpp"
#include "ctfuse/metrics.hpp"
#include "ctfuse/models.hpp"
#include "ctfuse/rng.hpp"
#include "ctfuse/simgen.hpp"
#include "ctfuse/tensor.hpp"

namespace ctfuse {

enum class Method {
  uncoupled,
  coupled_cpd_soft,
  coupled_cpd_hard,
  pf2_cpd,
  dcmtf_soft,
  dcmtf_flexible,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::uncoupled: return "uncoupled";
    case Method::coupled_cpd_soft: return "coupled_cpd_soft";
    case Method::coupled_cpd_hard: return "coupled_cpd_hard";
    case Method::pf2_cpd: return "pf2_cpd";
    case Method::dcmtf_soft: return "dcmtf_soft";
    case Method::dcmtf_flexible: return "dcmtf_flexible";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  for (Method m : {Method::uncoupled, Method::coupled_cpd_soft, Method::coupled_cpd_hard,
                   Method::pf2_cpd, Method::dcmtf_soft, Method::dcmtf_flexible}) {
    if (s == method_name(m)) return m;
  }
  throw config_error("unknown method: " + s);
}

struct ExperimentConfig {
  std::vector<Scenario> scenarios;
  std::vector<Method> methods;
  std::vector<double> lambda_b_grid = {1.0};
  std::vector<double> lambda_1_grid = {1.0};
  std::vector<double> lambda_2_grid = {10.0};
  double lambda_a = 0.0;
  double lambda_c = 0.0;
  int replications = 30;
  std::uint64_t master_seed = 1;
  Index rank = 0;          ///< 0: use the scenario's source count
  Index coupled_rank = 0;  ///< 0: all components coupled
  int max_sweeps = 60;
  double tol = 1e-6;
  int warm_max_iters = 40;
  int warm_n_starts = 1;
  HrfFamily flexible_family = HrfFamily::double_gamma;
  int jobs = 0;            ///< 0: CTFUSE_JOBS env var, then hardware threads
  bool timing = true;      ///< false: wall_ms written as 0 (reproducible bytes)
  std::string rows_out = "results.csv";
  std::string summary_out = "summary.csv";

  void validate() const {
    detail::require(!scenarios.empty(), "ExperimentConfig: no scenarios");
    detail::require(!methods.empty(), "ExperimentConfig: no methods");
    detail::require(replications >= 1, "ExperimentConfig: replications must be >= 1");
    detail::require(!lambda_b_grid.empty() && !lambda_1_grid.empty() && !lambda_2_grid.empty(),
                    "ExperimentConfig: empty lambda grid");
    for (double l : lambda_b_grid) detail::require(l >= 0, "ExperimentConfig: lambda_b < 0");
    for (double l : lambda_1_grid) detail::require(l >= 0, "ExperimentConfig: lambda_1 < 0");
    for (double l : lambda_2_grid) detail::require(l >= 0, "ExperimentConfig: lambda_2 < 0");
    detail::require(rank >= 0 && coupled_rank >= 0, "ExperimentConfig: negative rank");
    detail::require(max_sweeps >= 1 && tol > 0, "ExperimentConfig: bad solver budget");
    for (const Scenario& sc : scenarios) sc.validate();
  }
};

/// Parses an experiment configuration from the structured-text format.
/// Scenario names resolve against the registry; `[scenario <name>]` sections
/// override registry fields or define new scenarios from scratch.
inline ExperimentConfig parse_experiment_config(std::istream& in) {
  const std::vector<ConfigSection> sections = parse_config_text(in);
  std::vector<std::string> scenario_names;
  std::vector<std::pair<std::string, const ConfigSection*>> overrides;
  const ConfigSection* experiment = nullptr;
  for (const ConfigSection& sec : sections) {
    if (sec.name == "experiment") {
      if (experiment) detail::config_fail(sec.line, "duplicate [experiment] section");
      experiment = &sec;
    } else if (sec.name.rfind("scenario ", 0) == 0) {
      const std::string name = detail::config_trim(sec.name.substr(9));
      if (name.empty()) detail::config_fail(sec.line, "missing scenario name");
      overrides.emplace_back(name, &sec);
    } else {
      detail::config_fail(sec.line, "unknown section [" + sec.name + "]");
    }
  }
  if (!experiment) throw config_error("missing [experiment] section");

  ExperimentConfig cfg;
  for (const ConfigEntry& e : experiment->entries) {
    if (e.key == "scenarios") scenario_names = detail::config_list(e);
    else if (e.key == "methods") {
      cfg.methods.clear();
      for (const std::string& m : detail::config_list(e)) {
        try {
          cfg.methods.push_back(method_from_name(m));
        } catch (const config_error& err) {
          detail::config_fail(e.line, err.what());
        }
      }
    } else if (e.key == "lambda_b") cfg.lambda_b_grid = detail::config_double_list(e);
    else if (e.key == "lambda_1") cfg.lambda_1_grid = detail::config_double_list(e);
    else if (e.key == "lambda_2") cfg.lambda_2_grid = detail::config_double_list(e);
    else if (e.key == "lambda_a") cfg.lambda_a = detail::config_double(e);
    else if (e.key == "lambda_c") cfg.lambda_c = detail::config_double(e);
    else if (e.key == "replications") cfg.replications = static_cast<int>(detail::config_int(e));
    else if (e.key == "master_seed") cfg.master_seed = detail::config_uint64(e);
    else if (e.key == "rank") cfg.rank = static_cast<Index>(detail::config_int(e));
    else if (e.key == "coupled_rank") cfg.coupled_rank = static_cast<Index>(detail::config_int(e));
    else if (e.key == "max_sweeps") cfg.max_sweeps = static_cast<int>(detail::config_int(e));
    else if (e.key == "tol") cfg.tol = detail::config_double(e);
    else if (e.key == "warm_max_iters") cfg.warm_max_iters = static_cast<int>(detail::config_int(e));
    else if (e.key == "warm_n_starts") cfg.warm_n_starts = static_cast<int>(detail::config_int(e));
    else if (e.key == "flexible_family") {
      try {
        cfg.flexible_family = hrf_family_from_name(e.value);
      } catch (const config_error&) {
        detail::config_fail(e.line, "flexible_family must be double_gamma or lennard_jones");
      }
    } else if (e.key == "jobs") cfg.jobs = static_cast<int>(detail::config_int(e));
    else if (e.key == "timing") cfg.timing = detail::config_bool(e);
    else if (e.key == "rows_out") cfg.rows_out = e.value;
    else if (e.key == "summary_out") cfg.summary_out = e.value;
    else detail::config_fail(e.line, "unknown experiment key '" + e.key + "'");
  }
  if (scenario_names.empty()) detail::config_fail(experiment->line, "scenarios list is required");

  for (const std::string& name : scenario_names) {
    Scenario sc = detail::scenario_template(name);
    for (const auto& [oname, sec] : overrides) {
      if (oname != name) continue;
      for (const ConfigEntry& e : sec->entries) detail::apply_scenario_entry(sc, e);
    }
    cfg.scenarios.push_back(std::move(sc));
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Result rows and summaries
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string scenario;
  std::string method;
  double lambda_b = 0, lambda_1 = 0, lambda_2 = 0;
  int replication = 0;
  std::string modality;  ///< "fmri" or "eeg"
  double mean_corr = 0, std_src_corr = 0;
  CostBreakdown cost;    ///< joint objective; identical across a cell's rows
  double recheck_delta = 0;
  int iters = 0;
  double wall_ms = 0;
  int failed = 0;
};

struct SummaryRow {
  std::string scenario;
  std::string method;
  double lambda_b = 0, lambda_1 = 0, lambda_2 = 0;
  std::string modality;
  int n_reps = 0, n_failed = 0;
  double mean_corr_mean = 0, mean_corr_std = 0;
  double std_src_corr_mean = 0;
  double wall_ms_mean = 0;
};

inline const char* rows_csv_header() {
  return "scenario,method,lambda_b,lambda_1,lambda_2,replication,modality,mean_corr,"
         "std_src_corr,cost_total,cost_fmri_resid,cost_eeg_resid,cost_pen_spatial,"
         "cost_pen_time,cost_pen_subject,cost_recheck_delta,iters,wall_ms,failed";
}

inline void write_rows_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
  os << rows_csv_header() << "\n";
  for (const ResultRow& r : rows) {
    os << r.scenario << ',' << r.method << ',' << detail::fmt_g(r.lambda_b) << ','
       << detail::fmt_g(r.lambda_1) << ',' << detail::fmt_g(r.lambda_2) << ',' << r.replication
       << ',' << r.modality << ',' << detail::fmt_g(r.mean_corr) << ','
       << detail::fmt_g(r.std_src_corr) << ',' << detail::fmt_g(r.cost.total()) << ','
       << detail::fmt_g(r.cost.fmri_resid) << ',' << detail::fmt_g(r.cost.eeg_resid) << ','
       << detail::fmt_g(r.cost.pen_spatial) << ',' << detail::fmt_g(r.cost.pen_time) << ','
       << detail::fmt_g(r.cost.pen_subject) << ',' << detail::fmt_g(r.recheck_delta) << ','
       << r.iters << ',' << detail::fmt_g(r.wall_ms) << ',' << r.failed << "\n";
  }
}

inline const char* summary_csv_header() {
  return "scenario,method,lambda_b,lambda_1,lambda_2,modality,n_reps,n_failed,"
         "mean_corr_mean,mean_corr_std,std_src_corr_mean,wall_ms_mean";
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << summary_csv_header() << "\n";
  for (const SummaryRow& r : rows) {
    os << r.scenario << ',' << r.method << ',' << detail::fmt_g(r.lambda_b) << ','
       << detail::fmt_g(r.lambda_1) << ',' << detail::fmt_g(r.lambda_2) << ',' << r.modality << ','
       << r.n_reps << ',' << r.n_failed << ',' << detail::fmt_g(r.mean_corr_mean) << ','
       << detail::fmt_g(r.mean_corr_std) << ',' << detail::fmt_g(r.std_src_corr_mean) << ','
       << detail::fmt_g(r.wall_ms_mean) << "\n";
  }
}

/// Aggregates rows over replications per (scenario, method, lambdas,
/// modality), in first-appearance order. Failed rows are excluded from the
/// means but counted. The std is the sample standard deviation (n - 1).
inline std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
  std::vector<SummaryRow> out;
  std::vector<std::vector<const ResultRow*>> members;
  for (const ResultRow& r : rows) {
    std::size_t g = 0;
    for (; g < out.size(); ++g) {
      const SummaryRow& s = out[g];
      if (s.scenario == r.scenario && s.method == r.method && s.lambda_b == r.lambda_b &&
          s.lambda_1 == r.lambda_1 && s.lambda_2 == r.lambda_2 && s.modality == r.modality) {
        break;
      }
    }
    if (g == out.size()) {
      SummaryRow s;
      s.scenario = r.scenario;
      s.method = r.method;
      s.lambda_b = r.lambda_b;
      s.lambda_1 = r.lambda_1;
      s.lambda_2 = r.lambda_2;
      s.modality = r.modality;
      out.push_back(std::move(s));
      members.emplace_back();
    }
    members[g].push_back(&r);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    SummaryRow& s = out[g];
    double sum = 0, sum_std = 0, sum_wall = 0;
    std::vector<double> vals;
    for (const ResultRow* r : members[g]) {
      ++s.n_reps;
      if (r->failed) {
        ++s.n_failed;
        continue;
      }
      sum += r->mean_corr;
      sum_std += r->std_src_corr;
      sum_wall += r->wall_ms;
      vals.push_back(r->mean_corr);
    }
    const std::size_t n = vals.size();
    if (n > 0) {
      s.mean_corr_mean = sum / static_cast<double>(n);
      s.std_src_corr_mean = sum_std / static_cast<double>(n);
      s.wall_ms_mean = sum_wall / static_cast<double>(n);
    }
    if (n > 1) {
      double ss = 0;
      for (double v : vals) ss += (v - s.mean_corr_mean) * (v - s.mean_corr_mean);
      s.mean_corr_std = std::sqrt(ss / static_cast<double>(n - 1));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scoring: every method is scored per subject against that subject's ground
// truth and averaged, which treats shared-factor and per-subject methods
// uniformly. fMRI modes: spatial map + BOLD course; EEG modes: ERP waveform
// + electrode signature + trial amplitudes.
// ---------------------------------------------------------------------------

struct ModalityScore {
  double mean_corr = 0;
  double std_src_corr = 0;
};

namespace detail {

inline ModalityScore score_per_subject(const std::vector<std::vector<Matrix>>& truth,
                                       const std::vector<std::vector<Matrix>>& est) {
  require(truth.size() == est.size() && !truth.empty(), "score_per_subject: subject count mismatch");
  double sum = 0;
  std::vector<double> pooled;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const MatchReport rep = match_and_score(truth[k], est[k]);
    sum += rep.mean_corr;
    pooled.insert(pooled.end(), rep.per_source_corr.begin(), rep.per_source_corr.end());
  }
  ModalityScore out;
  out.mean_corr = sum / static_cast<double>(truth.size());
  if (pooled.size() > 1) {
    double m = 0;
    for (double v : pooled) m += v;
    m /= static_cast<double>(pooled.size());
    double ss = 0;
    for (double v : pooled) ss += (v - m) * (v - m);
    out.std_src_corr = std::sqrt(ss / static_cast<double>(pooled.size() - 1));
  }
  return out;
}

inline std::vector<std::vector<Matrix>> truth_fmri_modes(const GroundTruth& gt) {
  std::vector<std::vector<Matrix>> out;
  for (std::size_t k = 0; k < gt.maps.size(); ++k) out.push_back({gt.maps[k], gt.bolds[k]});
  return out;
}

inline std::vector<std::vector<Matrix>> truth_eeg_modes(const GroundTruth& gt) {
  std::vector<std::vector<Matrix>> out;
  for (std::size_t k = 0; k < gt.maps.size(); ++k) out.push_back({gt.erps[k], gt.sigs[k], gt.amps[k]});
  return out;
}

}  // namespace detail

/// Per-subject factor-mode estimates in the layout the scorer consumes.
struct SubjectEstimates {
  std::vector<std::vector<Matrix>> fmri;  ///< per subject {spatial, time}
  std::vector<std::vector<Matrix>> eeg;   ///< per subject {erp, signature, amplitude}
};

inline SubjectEstimates estimates_from_coupled(const CoupledSolution& sol, Index n_subjects,
                                               bool pf2) {
  SubjectEstimates est;
  for (Index k = 0; k < n_subjects; ++k) {
    est.fmri.push_back({sol.fmri.factors[0], sol.fmri.factors[1]});
    const Matrix erp = pf2 ? Matrix(sol.p[static_cast<std::size_t>(k)] * sol.eeg.factors[0])
                           : sol.eeg.factors[0];
    est.eeg.push_back({erp, sol.eeg.factors[1], sol.eeg.factors[2]});
  }
  return est;
}

inline SubjectEstimates estimates_from_dcmtf(const DcmtfSolution& sol) {
  SubjectEstimates est;
  for (std::size_t k = 0; k < sol.fmri_spatial.size(); ++k) {
    est.fmri.push_back({sol.fmri_spatial[k], sol.fmri_time[k]});
    est.eeg.push_back({sol.eeg[k].factors[0], sol.eeg[k].factors[1], sol.eeg[k].factors[2]});
  }
  return est;
}

inline SubjectEstimates estimates_from_cpd(const CpdFactors& fmri, const CpdFactors& eeg,
                                           Index n_subjects) {
  SubjectEstimates est;
  for (Index k = 0; k < n_subjects; ++k) {
    est.fmri.push_back({fmri.factors[0], fmri.factors[1]});
    est.eeg.push_back({eeg.factors[0], eeg.factors[1], eeg.factors[2]});
  }
  return est;
}

/// Scores per-subject estimates against the ground truth; returns
/// {fmri score, eeg score}.
inline std::pair<ModalityScore, ModalityScore> score_estimates(const GroundTruth& gt,
                                                               const SubjectEstimates& est) {
  return {detail::score_per_subject(detail::truth_fmri_modes(gt), est.fmri),
          detail::score_per_subject(detail::truth_eeg_modes(gt), est.eeg)};
}

// ---------------------------------------------------------------------------
// Cell execution
// ---------------------------------------------------------------------------

namespace detail {

struct CellSpec {
  Method method;
  double lambda_b = 0, lambda_1 = 0, lambda_2 = 0;
};

inline std::vector<CellSpec> cells_for(const ExperimentConfig& cfg) {
  std::vector<CellSpec> cells;
  for (Method m : cfg.methods) {
    switch (m) {
      case Method::uncoupled:
      case Method::coupled_cpd_hard:
        cells.push_back({m, 0, 0, 0});
        break;
      case Method::coupled_cpd_soft:
      case Method::pf2_cpd:
        for (double lb : cfg.lambda_b_grid) cells.push_back({m, lb, 0, 0});
        break;
      case Method::dcmtf_soft:
        for (double l1 : cfg.lambda_1_grid) {
          for (double l2 : cfg.lambda_2_grid) cells.push_back({m, 0, l1, l2});
        }
        break;
      case Method::dcmtf_flexible:
        for (double l1 : cfg.lambda_1_grid) cells.push_back({m, 0, l1, 0});
        break;
    }
  }
  return cells;
}

inline std::uint64_t cell_seed(std::uint64_t master, const std::string& scenario, int rep,
                               const CellSpec& cell) {
  std::uint64_t s = seed_combine(master, scenario);
  s = seed_combine(s, static_cast<std::uint64_t>(rep));
  s = seed_combine(s, method_name(cell.method));
  s = seed_combine(s, fmt_g(cell.lambda_b) + "/" + fmt_g(cell.lambda_1) + "/" + fmt_g(cell.lambda_2));
  return s;
}

/// Shared per-(scenario, replication) context for one group of cells.
struct GroupContext {
  const ExperimentConfig* cfg = nullptr;
  Scenario scenario;  ///< seed already mixed with the master seed
  int replication = 0;
  SyntheticDataset data;
  GroundTruth truth;
  Index rank = 0, r_c = 0;
  std::optional<CouplingProblem> coupled;  ///< lazily built (holds tensor copies)
  std::optional<CoupledInit> warm;         ///< shared across coupled tensor cells
  std::vector<Matrix> fmri_slices;
  std::vector<DenseTensor> eeg_slices;
};

inline const CouplingProblem& coupled_problem(GroupContext& g, const CellSpec& cell) {
  if (!g.coupled) {
    CouplingProblem p;
    p.fmri = g.data.fmri;
    p.eeg = g.data.eeg;
    p.r_fmri = g.rank;
    p.r_eeg = g.rank;
    p.r_c = g.r_c;
    p.lead_field = make_lead_field(g.scenario.n_electrodes);
    p.hrf_op = build_hrf_operator(HrfParams::canonical_double_gamma(), g.scenario.trial_rate_hz,
                                  g.scenario.volume_rate_hz, g.scenario.n_trials);
    g.coupled = std::move(p);
  }
  CouplingProblem& p = *g.coupled;
  p.lambda_a = g.cfg->lambda_a;
  p.lambda_c = g.cfg->lambda_c;
  p.lambda_b = cell.lambda_b;
  p.hard_time = (cell.method == Method::coupled_cpd_hard);
  return p;
}

inline CoupledOptions coupled_options(const GroupContext& g, std::uint64_t seed) {
  CoupledOptions o;
  o.max_sweeps = g.cfg->max_sweeps;
  o.tol = g.cfg->tol;
  o.seed = seed;
  o.warm_max_iters = g.cfg->warm_max_iters;
  o.warm_n_starts = g.cfg->warm_n_starts;
  return o;
}

inline const CoupledInit& shared_warm(GroupContext& g, const CellSpec& cell) {
  if (!g.warm) {
    const CouplingProblem& p = coupled_problem(g, cell);
    const std::uint64_t s =
        seed_combine(seed_combine(g.cfg->master_seed, "warm-" + g.scenario.name),
                     static_cast<std::uint64_t>(g.replication));
    g.warm = coupled_warm_start(normalized(p), coupled_options(g, s));
  }
  return *g.warm;
}

inline void subject_pieces(GroupContext& g) {
  if (!g.fmri_slices.empty()) return;
  for (Index k = 0; k < g.scenario.n_subjects; ++k) {
    g.fmri_slices.push_back(subject_fmri(g.data.fmri, k));
    g.eeg_slices.push_back(subject_eeg(g.data.eeg, k));
  }
}

/// What one cell's solver run produces, before scoring.
struct CellOutcome {
  SubjectEstimates est;
  CostBreakdown cost;
  double recheck = 0;
  int iters = 0;
  long long nls_step_evals = 0;
};

/// Runs one cell's solver; throws on failure.
inline CellOutcome run_cell_fit(GroupContext& g, const CellSpec& cell) {
  const std::uint64_t seed = cell_seed(g.cfg->master_seed, g.scenario.name, g.replication, cell);
  SubjectEstimates est;
  CostBreakdown cost;
  double recheck = 0;
  int iters = 0;
  long long nls_evals = 0;

  switch (cell.method) {
    case Method::uncoupled: {
      FitOptions fo;
      fo.max_iters = g.cfg->max_sweeps;
      fo.tol = g.cfg->tol;
      fo.n_starts = g.cfg->warm_n_starts;
      fo.init = FitOptions::Init::svd;
      fo.normalize = false;
      DenseTensor fmri = g.data.fmri;
      fmri.values() /= fmri.frobenius_norm();
      DenseTensor eeg = g.data.eeg;
      eeg.values() /= eeg.frobenius_norm();
      fo.seed = seed_combine(seed, "fmri");
      const CpdFitResult rf = cpd_fit(fmri, g.rank, fo);
      fo.seed = seed_combine(seed, "eeg");
      const CpdFitResult re = cpd_fit(eeg, g.rank, fo);
      est = estimates_from_cpd(rf.factors, re.factors, g.scenario.n_subjects);
      cost.fmri_resid = cpd_residual_sq(fmri, rf.factors.factors);
      cost.eeg_resid = cpd_residual_sq(eeg, re.factors.factors);
      recheck = std::abs(rf.trace.back() - cost.fmri_resid) +
                std::abs(re.trace.back() - cost.eeg_resid);
      iters = std::max(rf.iters, re.iters);
      break;
    }
    case Method::coupled_cpd_soft:
    case Method::coupled_cpd_hard:
    case Method::pf2_cpd: {
      const CouplingProblem& p = coupled_problem(g, cell);
      const CoupledInit& warm = shared_warm(g, cell);
      const CoupledOptions opts = coupled_options(g, seed);
      const CoupledSolution sol = (cell.method == Method::pf2_cpd)
                                      ? solve_pf2_cpd(p, opts, &warm)
                                      : solve_coupled_cpd(p, opts, &warm);
      est = estimates_from_coupled(sol, g.scenario.n_subjects, cell.method == Method::pf2_cpd);
      cost = sol.cost;
      recheck = std::abs(sol.trace.back() - sol.cost.total());
      iters = sol.sweeps;
      break;
    }
    case Method::dcmtf_soft:
    case Method::dcmtf_flexible: {
      subject_pieces(g);
      DcmtfProblem p;
      p.fmri = g.fmri_slices;
      p.eeg = g.eeg_slices;
      p.rank = g.rank;
      p.lambda_1 = cell.lambda_1;
      p.trial_rate_hz = g.scenario.trial_rate_hz;
      p.volume_rate_hz = g.scenario.volume_rate_hz;
      DcmtfOptions opts;
      opts.max_sweeps = g.cfg->max_sweeps;
      opts.tol = g.cfg->tol;
      opts.seed = seed;
      opts.warm_max_iters = g.cfg->warm_max_iters;
      opts.warm_n_starts = g.cfg->warm_n_starts;
      DcmtfSolution sol;
      if (cell.method == Method::dcmtf_soft) {
        p.lambda_2 = cell.lambda_2;
        p.hrf_op = build_hrf_operator(HrfParams::canonical_double_gamma(), g.scenario.trial_rate_hz,
                                      g.scenario.volume_rate_hz, g.scenario.n_trials);
        sol = solve_dcmtf_soft(p, opts);
      } else {
        p.hrf_family = g.cfg->flexible_family;
        sol = solve_dcmtf_flexible(p, opts);
      }
      est = estimates_from_dcmtf(sol);
      cost = sol.cost;
      recheck = std::abs(sol.trace.back() - sol.cost.total());
      iters = sol.sweeps;
      nls_evals = sol.nls_step_evals;
      break;
    }
  }
  return {std::move(est), cost, recheck, iters, nls_evals};
}

/// Runs one cell; fills scores, costs, iterations into the two rows
/// (fmri, eeg). Throws on solver failure; the caller records the flag.
inline void run_cell(GroupContext& g, const CellSpec& cell, ResultRow& row_f, ResultRow& row_e) {
  const CellOutcome out = run_cell_fit(g, cell);
  const auto [sf, se] = score_estimates(g.truth, out.est);
  row_f.mean_corr = sf.mean_corr;
  row_f.std_src_corr = sf.std_src_corr;
  row_e.mean_corr = se.mean_corr;
  row_e.std_src_corr = se.std_src_corr;
  for (ResultRow* r : {&row_f, &row_e}) {
    r->cost = out.cost;
    r->recheck_delta = out.recheck;
    r->iters = out.iters;
  }
}

}  // namespace detail

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<SummaryRow> summary;
};

/// Resolves the worker count: config value, else CTFUSE_JOBS, else hardware.
inline int resolve_jobs(const ExperimentConfig& cfg) {
  if (cfg.jobs > 0) return cfg.jobs;
  if (const char* env = std::getenv("CTFUSE_JOBS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

/// Runs the full scenario x method x lambda x replication grid. Rows arrive
/// in config order; a failing cell is flagged and the run continues.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::vector<detail::CellSpec> cells = detail::cells_for(cfg);
  const std::size_t n_groups = cfg.scenarios.size() * static_cast<std::size_t>(cfg.replications);
  const std::size_t rows_per_group = cells.size() * 2;

  ExperimentResult result;
  result.rows.assign(n_groups * rows_per_group, ResultRow{});

  // Pre-label every row so failures keep their identity.
  for (std::size_t s = 0; s < cfg.scenarios.size(); ++s) {
    for (int rep = 0; rep < cfg.replications; ++rep) {
      const std::size_t base =
          (s * static_cast<std::size_t>(cfg.replications) + static_cast<std::size_t>(rep)) *
          rows_per_group;
      for (std::size_t c = 0; c < cells.size(); ++c) {
        for (int mod = 0; mod < 2; ++mod) {
          ResultRow& r = result.rows[base + c * 2 + static_cast<std::size_t>(mod)];
          r.scenario = cfg.scenarios[s].name;
          r.method = method_name(cells[c].method);
          r.lambda_b = cells[c].lambda_b;
          r.lambda_1 = cells[c].lambda_1;
          r.lambda_2 = cells[c].lambda_2;
          r.replication = rep;
          r.modality = mod == 0 ? "fmri" : "eeg";
        }
      }
    }
  }

  std::atomic<std::size_t> next{0};
  const int jobs = std::max(1, std::min<int>(resolve_jobs(cfg), static_cast<int>(n_groups)));
  const auto worker = [&]() {
    for (;;) {
      const std::size_t gi = next.fetch_add(1);
      if (gi >= n_groups) return;
      const std::size_t s = gi / static_cast<std::size_t>(cfg.replications);
      const int rep = static_cast<int>(gi % static_cast<std::size_t>(cfg.replications));
      const std::size_t base = gi * rows_per_group;

      detail::GroupContext g;
      g.cfg = &cfg;
      g.scenario = cfg.scenarios[s];
      g.scenario.seed = seed_combine(cfg.master_seed, g.scenario.name);
      g.replication = rep;
      bool data_ok = true;
      try {
        auto [ds, gt] = generate(g.scenario, rep);
        g.data = std::move(ds);
        g.truth = std::move(gt);
        g.rank = cfg.rank > 0 ? cfg.rank : g.scenario.n_sources();
        g.r_c = cfg.coupled_rank > 0 ? cfg.coupled_rank : g.rank;
      } catch (const std::exception&) {
        data_ok = false;
      }

      for (std::size_t c = 0; c < cells.size(); ++c) {
        ResultRow& row_f = result.rows[base + c * 2];
        ResultRow& row_e = result.rows[base + c * 2 + 1];
        if (!data_ok) {
          row_f.failed = row_e.failed = 1;
          continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        try {
          detail::run_cell(g, cells[c], row_f, row_e);
        } catch (const std::exception&) {
          row_f.failed = row_e.failed = 1;
        }
        if (cfg.timing) {
          const auto t1 = std::chrono::steady_clock::now();
          const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
          row_f.wall_ms = row_e.wall_ms = ms;
        }
      }
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  result.summary = summarize(result.rows);
  return result;
}

}  // namespace ctfuse
