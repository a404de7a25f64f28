// ctfuse command-line interface: dataset generation, single fits, scoring,
// full experiment grids, and the lambda sweep. The heavy lifting lives in
// the headers; this file is argument plumbing and file placement.
//
// Exit codes: 0 success, 1 unknown error, 2 usage, 3 config, 4 io,
// 5 invalid argument, 6 numeric. Failures print one machine-readable line:
//   error: category=<cat> message="..."

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctfuse/errors.hpp"
#include "ctfuse/experiment.hpp"
#include "ctfuse/metrics.hpp"
#include "ctfuse/serialize.hpp"
#include "ctfuse/simgen.hpp"

namespace fs = std::filesystem;
using namespace ctfuse;

namespace {

std::vector<ConfigSection> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open for reading: " + path);
  return parse_config_text(in);
}

/// Resolves a scenario name against the registry and optional config-file
/// override sections; rejects names that match neither.
Scenario resolve_scenario(const std::string& name, const std::string& config_path) {
  bool in_registry = false;
  for (const Scenario& sc : scenario_registry()) in_registry |= (sc.name == name);
  Scenario sc = detail::scenario_template(name);
  bool overridden = false;
  if (!config_path.empty()) {
    for (const ConfigSection& sec : parse_config_file(config_path)) {
      if (sec.name == "scenario " + name) {
        for (const ConfigEntry& e : sec.entries) detail::apply_scenario_entry(sc, e);
        overridden = true;
      }
    }
  }
  if (!in_registry && !overridden) throw config_error("unknown scenario: " + name);
  return sc;
}

void write_result_csvs(const ExperimentResult& res, const fs::path& rows_path,
                       const fs::path& summary_path) {
  for (const fs::path& p : {rows_path, summary_path}) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  }
  std::ofstream rows(rows_path, std::ios::trunc);
  if (!rows) throw io_error("cannot open for writing: " + rows_path.string());
  write_rows_csv(rows, res.rows);
  std::ofstream summary(summary_path, std::ios::trunc);
  if (!summary) throw io_error("cannot open for writing: " + summary_path.string());
  write_summary_csv(summary, res.summary);
  std::cout << "rows: " << rows_path.string() << " (" << res.rows.size() << ")\n";
  std::cout << "summary: " << summary_path.string() << " (" << res.summary.size() << ")\n";
}

int cmd_generate(const std::string& scenario, int replication, std::optional<std::uint64_t> seed,
                 const std::string& config_path, const std::string& out) {
  Scenario sc = resolve_scenario(scenario, config_path);
  if (seed) sc.seed = *seed;
  const auto [data, truth] = generate(sc, replication);
  save_dataset(out, sc, replication, data, truth);
  std::cout << "wrote " << out << " (scenario " << sc.name << ", replication " << replication
            << ")\n";
  return 0;
}

int cmd_fit(const std::string& data_dir, const std::string& method_str, double lambda_b,
            double lambda_1, double lambda_2, Index rank, Index coupled_rank, int max_sweeps,
            double tol, std::uint64_t seed, const std::string& family, const std::string& out) {
  LoadedDataset ld = load_dataset(data_dir);

  ExperimentConfig cfg;
  cfg.scenarios = {ld.scenario};
  cfg.methods = {method_from_name(method_str)};
  cfg.master_seed = seed;
  cfg.max_sweeps = max_sweeps;
  cfg.tol = tol;
  cfg.flexible_family = hrf_family_from_name(family);

  detail::GroupContext g;
  g.cfg = &cfg;
  g.scenario = ld.scenario;
  g.replication = ld.replication;
  g.data = std::move(ld.data);
  g.truth = std::move(ld.truth);
  g.rank = rank > 0 ? rank : g.scenario.n_sources();
  g.r_c = coupled_rank > 0 ? coupled_rank : g.rank;

  const detail::CellSpec cell{cfg.methods.front(), lambda_b, lambda_1, lambda_2};
  detail::CellOutcome res = detail::run_cell_fit(g, cell);

  SolutionRecord sol;
  sol.method = method_str;
  sol.lambda_b = lambda_b;
  sol.lambda_1 = lambda_1;
  sol.lambda_2 = lambda_2;
  sol.cost = res.cost;
  sol.sweeps = res.iters;
  sol.nls_step_evals = res.nls_step_evals;
  sol.estimates = std::move(res.est);
  save_solution(out, sol);
  std::cout << "wrote " << out << " (method " << method_str << ", cost "
            << detail::fmt_g(res.cost.total()) << ", sweeps " << res.iters << ")\n";
  return 0;
}

int cmd_score(const std::string& solution_dir, const std::string& data_dir,
              const std::string& out) {
  const SolutionRecord sol = load_solution(solution_dir);
  const LoadedDataset ld = load_dataset(data_dir);

  if (out.find('/') != std::string::npos) fs::create_directories(fs::path(out).parent_path());
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw io_error("cannot open for writing: " + out);
  os << "modality,subject,source,assigned,corr,subject_mean,modality_mean\n";

  const auto [score_f, score_e] = score_estimates(ld.truth, sol.estimates);
  const auto emit = [&os](const std::string& modality,
                          const std::vector<std::vector<Matrix>>& truth,
                          const std::vector<std::vector<Matrix>>& est, double modality_mean) {
    for (std::size_t k = 0; k < truth.size(); ++k) {
      const MatchReport rep = match_and_score(truth[k], est[k]);
      for (std::size_t r = 0; r < rep.per_source_corr.size(); ++r) {
        os << modality << ',' << k << ',' << r << ',' << rep.assignment[r] << ','
           << detail::fmt_g(rep.per_source_corr[r]) << ',' << detail::fmt_g(rep.mean_corr) << ','
           << detail::fmt_g(modality_mean) << "\n";
      }
    }
  };
  emit("fmri", detail::truth_fmri_modes(ld.truth), sol.estimates.fmri, score_f.mean_corr);
  emit("eeg", detail::truth_eeg_modes(ld.truth), sol.estimates.eeg, score_e.mean_corr);
  if (!os) throw io_error("write failed: " + out);
  std::cout << "fmri mean_corr " << detail::fmt_g(score_f.mean_corr) << ", eeg mean_corr "
            << detail::fmt_g(score_e.mean_corr) << " -> " << out << "\n";
  return 0;
}

int cmd_experiment(const std::string& config_path, const std::string& out_dir, int jobs,
                   std::optional<std::uint64_t> seed) {
  std::ifstream in(config_path);
  if (!in) throw io_error("cannot open for reading: " + config_path);
  ExperimentConfig cfg = parse_experiment_config(in);
  if (jobs > 0) cfg.jobs = jobs;
  if (seed) cfg.master_seed = *seed;

  const ExperimentResult res = run_experiment(cfg);
  const fs::path base = out_dir.empty() ? fs::path(".") : fs::path(out_dir);
  write_result_csvs(res, base / cfg.rows_out, base / cfg.summary_out);
  return 0;
}

int cmd_sweep_lambda(const std::string& scenario, int replications, std::uint64_t seed, int jobs,
                     bool timing, int max_sweeps, const std::string& config_path,
                     const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.scenarios = {resolve_scenario(scenario, config_path)};
  cfg.methods = {Method::uncoupled, Method::coupled_cpd_hard, Method::coupled_cpd_soft,
                 Method::pf2_cpd};
  cfg.lambda_b_grid = {0.01, 0.1, 1.0, 10.0, 100.0, 1000.0};
  cfg.replications = replications;
  cfg.master_seed = seed;
  cfg.max_sweeps = max_sweeps;
  cfg.jobs = jobs;
  cfg.timing = timing;

  const ExperimentResult res = run_experiment(cfg);
  const fs::path base = out_dir.empty() ? fs::path(".") : fs::path(out_dir);
  write_result_csvs(res, base / "lambda_rows.csv", base / "lambda_summary.csv");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"soft- and flexible-coupled tensor decompositions for joint EEG/fMRI analysis"};
  app.require_subcommand(1);

  std::string scenario = "exact_hrf", config_path, out, data_dir, solution_dir;
  std::string method_str = "coupled_cpd_soft", family = "double_gamma";
  int replication = 0, replications = 30, jobs = 0, max_sweeps = 60;
  std::uint64_t seed_v = 1;
  bool seed_given = false, timing = true;
  double lambda_b = 1.0, lambda_1 = 1.0, lambda_2 = 10.0, tol = 1e-6;
  Index rank = 0, coupled_rank = 0;

  const auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed_v, "Random seed")->each([&](const std::string&) {
      seed_given = true;
    });
  };

  CLI::App* gen = app.add_subcommand("generate", "Generate a synthetic dataset directory");
  gen->add_option("--scenario", scenario, "Scenario name (registry or --config)")->required();
  gen->add_option("--replication", replication, "Replication index (redraws noise and gains)");
  gen->add_option("--config", config_path, "Config file with [scenario <name>] overrides");
  gen->add_option("--out", out, "Output dataset directory")->required();
  add_seed(gen);

  CLI::App* fit = app.add_subcommand("fit", "Fit one method to a dataset directory");
  fit->add_option("--data", data_dir, "Dataset directory (from generate)")->required();
  fit->add_option("--method", method_str,
                  "uncoupled | coupled_cpd_soft | coupled_cpd_hard | pf2_cpd | dcmtf_soft | "
                  "dcmtf_flexible")
      ->required();
  fit->add_option("--lambda-b", lambda_b, "Time-coupling weight (coupled/pf2)");
  fit->add_option("--lambda-1", lambda_1, "Spatial consensus weight (dcmtf)");
  fit->add_option("--lambda-2", lambda_2, "Time-coupling weight (dcmtf_soft)");
  fit->add_option("--rank", rank, "Decomposition rank (0: scenario source count)");
  fit->add_option("--coupled-rank", coupled_rank, "Coupled component count (0: rank)");
  fit->add_option("--max-sweeps", max_sweeps, "Sweep budget");
  fit->add_option("--tol", tol, "Relative cost-change stop tolerance");
  fit->add_option("--flexible-family", family, "double_gamma | lennard_jones");
  fit->add_option("--out", out, "Output solution directory")->required();
  add_seed(fit);

  CLI::App* score = app.add_subcommand("score", "Score a solution against dataset ground truth");
  score->add_option("--solution", solution_dir, "Solution directory (from fit)")->required();
  score->add_option("--data", data_dir, "Dataset directory holding the ground truth")->required();
  score->add_option("--out", out, "Output CSV path")->required();

  CLI::App* exp = app.add_subcommand("experiment", "Run a config-driven experiment grid");
  exp->add_option("--config", config_path, "Experiment config file")->required();
  exp->add_option("--out", out, "Directory for the result CSVs (default: cwd)");
  exp->add_option("--jobs", jobs, "Worker threads (0: config, CTFUSE_JOBS, hardware)");
  add_seed(exp);

  CLI::App* sweep = app.add_subcommand(
      "sweep-lambda", "Coupling-weight sweep: uncoupled/hard/soft/pf2 over a lambda_b grid");
  sweep->add_option("--scenario", scenario, "Scenario name (default exact_hrf)");
  sweep->add_option("--replications", replications, "Replications per cell");
  sweep->add_option("--jobs", jobs, "Worker threads");
  sweep->add_option("--max-sweeps", max_sweeps, "Sweep budget per solve");
  sweep->add_flag("--no-timing", [&timing](std::int64_t) { timing = false; },
                  "Write wall_ms as 0 for byte-reproducible output");
  sweep->add_option("--config", config_path, "Config file with [scenario <name>] overrides");
  sweep->add_option("--out", out, "Directory for the result CSVs (default: cwd)");
  add_seed(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "error: category=usage message=\"" << e.what() << "\"\n";
    return 2;
  }

  try {
    const std::optional<std::uint64_t> seed_opt =
        seed_given ? std::optional<std::uint64_t>(seed_v) : std::nullopt;
    if (*gen) return cmd_generate(scenario, replication, seed_opt, config_path, out);
    if (*fit) {
      return cmd_fit(data_dir, method_str, lambda_b, lambda_1, lambda_2, rank, coupled_rank,
                     max_sweeps, tol, seed_v, family, out);
    }
    if (*score) return cmd_score(solution_dir, data_dir, out);
    if (*exp) return cmd_experiment(config_path, out, jobs, seed_opt);
    if (*sweep) {
      return cmd_sweep_lambda(scenario, replications, seed_v, jobs, timing, max_sweeps,
                              config_path, out);
    }
    std::cerr << "error: category=usage message=\"no subcommand\"\n";
    return 2;
  } catch (const io_error& e) {
    std::cerr << "error: category=io message=\"" << e.what() << "\"\n";
    return 4;
  } catch (const config_error& e) {
    std::cerr << "error: category=config message=\"" << e.what() << "\"\n";
    return 3;
  } catch (const numeric_error& e) {
    std::cerr << "error: category=numeric message=\"" << e.what() << "\"\n";
    return 6;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: category=invalid_argument message=\"" << e.what() << "\"\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: category=unknown message=\"" << e.what() << "\"\n";
    return 1;
  }
}
