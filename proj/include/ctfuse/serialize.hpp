#pragma once

// Directory (de)serialization for datasets and fitted solutions.
//
// A dataset directory holds `manifest.cfg` (a [dataset] section with file
// references plus the full [scenario <name>] record) and TNSR1 payloads: the
// two data tensors and the ground truth as per-subject stacks (rows x R x
// subjects). A solution directory holds `manifest.cfg` (a [solution] section
// with method, lambdas, cost terms, and bookkeeping) plus the per-subject
// factor-mode estimates in the same stacked layout the scorer consumes.
// Manifest numbers are written with 17 significant digits and tensors store
// raw IEEE doubles, so a save/load round trip is exact.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctfuse/config.hpp"
#include "ctfuse/errors.hpp"
#include "ctfuse/experiment.hpp"
#include "ctfuse/io.hpp"
#include "ctfuse/simgen.hpp"

namespace ctfuse {

namespace detail {

/// Stacks equal-shaped per-subject matrices into a rows x cols x subjects tensor.
inline DenseTensor stack_subjects(const std::vector<Matrix>& ms) {
  require(!ms.empty(), "stack_subjects: no subjects");
  const Index rows = ms.front().rows(), cols = ms.front().cols();
  DenseTensor t({rows, cols, static_cast<Index>(ms.size())});
  for (std::size_t k = 0; k < ms.size(); ++k) {
    require(ms[k].rows() == rows && ms[k].cols() == cols, "stack_subjects: ragged subject shapes");
    Eigen::Map<Matrix>(t.data() + static_cast<Index>(k) * rows * cols, rows, cols) = ms[k];
  }
  return t;
}

inline std::vector<Matrix> unstack_subjects(const DenseTensor& t) {
  require(t.order() == 3, "unstack_subjects: expects a 3-way tensor");
  std::vector<Matrix> out;
  const Index rows = t.dim(0), cols = t.dim(1);
  for (Index k = 0; k < t.dim(2); ++k) {
    out.emplace_back(Eigen::Map<const Matrix>(t.values().data() + k * rows * cols, rows, cols));
  }
  return out;
}

/// Manifest values live on one line; collapse anything that would not reparse.
inline std::string manifest_safe(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r' || c == '#') c = ' ';
  }
  return config_trim(std::move(s));
}

inline const ConfigSection& manifest_section(const std::vector<ConfigSection>& sections,
                                             const std::string& want,
                                             const std::filesystem::path& path) {
  for (const ConfigSection& sec : sections) {
    if (sec.name == want || sec.name.rfind(want + " ", 0) == 0) return sec;
  }
  throw io_error("missing [" + want + "] section in " + path.string());
}

inline const std::string& manifest_value(const ConfigSection& sec, const std::string& key,
                                         const std::filesystem::path& path) {
  for (const ConfigEntry& e : sec.entries) {
    if (e.key == key) return e.value;
  }
  throw io_error("missing key '" + key + "' in " + path.string());
}

inline std::vector<ConfigSection> read_manifest(const std::filesystem::path& dir) {
  const std::filesystem::path path = dir / "manifest.cfg";
  std::ifstream in(path);
  if (!in) throw io_error("cannot open for reading: " + path.string());
  return parse_config_text(in);
}

}  // namespace detail

/// A dataset directory read back into memory.
struct LoadedDataset {
  Scenario scenario;
  int replication = 0;
  SyntheticDataset data;
  GroundTruth truth;
};

/// Writes `(data, truth)` for `(sc, replication)` under `dir` (created if
/// needed): manifest.cfg plus TNSR1 payload files.
inline void save_dataset(const std::filesystem::path& dir, const Scenario& sc, int replication,
                         const SyntheticDataset& data, const GroundTruth& truth) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_tensor(dir / "fmri.tnsr", data.fmri);
  write_tensor(dir / "eeg.tnsr", data.eeg);
  write_tensor(dir / "truth_maps.tnsr", detail::stack_subjects(truth.maps));
  write_tensor(dir / "truth_erps.tnsr", detail::stack_subjects(truth.erps));
  write_tensor(dir / "truth_amps.tnsr", detail::stack_subjects(truth.amps));
  write_tensor(dir / "truth_bolds.tnsr", detail::stack_subjects(truth.bolds));
  write_tensor(dir / "truth_sigs.tnsr", detail::stack_subjects(truth.sigs));
  write_matrix(dir / "gains_fmri.tnsr", truth.gains_fmri);
  write_matrix(dir / "gains_eeg.tnsr", truth.gains_eeg);

  detail::require(!truth.hrfs.empty(), "save_dataset: missing HRF parameters");
  Matrix hrfs(truth.hrfs.front().z.size(), static_cast<Index>(truth.hrfs.size()));
  for (std::size_t k = 0; k < truth.hrfs.size(); ++k) {
    detail::require(truth.hrfs[k].family == truth.hrfs.front().family &&
                        truth.hrfs[k].z.size() == hrfs.rows(),
                    "save_dataset: mixed HRF families");
    hrfs.col(static_cast<Index>(k)) = truth.hrfs[k].z;
  }
  write_matrix(dir / "hrfs.tnsr", hrfs);

  const std::filesystem::path path = dir / "manifest.cfg";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  out << "[dataset]\n";
  out << "format = 1\n";
  out << "replication = " << replication << "\n";
  out << "hrf_family = " << hrf_family_name(truth.hrfs.front().family) << "\n";
  out << "fmri = fmri.tnsr\n";
  out << "eeg = eeg.tnsr\n";
  out << "truth_maps = truth_maps.tnsr\n";
  out << "truth_erps = truth_erps.tnsr\n";
  out << "truth_amps = truth_amps.tnsr\n";
  out << "truth_bolds = truth_bolds.tnsr\n";
  out << "truth_sigs = truth_sigs.tnsr\n";
  out << "gains_fmri = gains_fmri.tnsr\n";
  out << "gains_eeg = gains_eeg.tnsr\n";
  out << "hrfs = hrfs.tnsr\n";
  out << "\n";
  write_scenario_section(out, sc);
  if (!out) throw io_error("write failed: " + path.string());
}

/// Reads a dataset directory written by save_dataset.
inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  const std::vector<ConfigSection> sections = detail::read_manifest(dir);
  const std::filesystem::path path = dir / "manifest.cfg";
  const ConfigSection& ds = detail::manifest_section(sections, "dataset", path);
  const ConfigSection& ssec = detail::manifest_section(sections, "scenario", path);

  LoadedDataset out;
  out.scenario.name = detail::config_trim(ssec.name.substr(std::string("scenario").size()));
  for (const ConfigEntry& e : ssec.entries) detail::apply_scenario_entry(out.scenario, e);
  out.scenario.validate();

  const auto file = [&](const std::string& key) {
    return dir / detail::manifest_value(ds, key, path);
  };
  for (const ConfigEntry& e : ds.entries) {
    if (e.key == "replication") out.replication = static_cast<int>(detail::config_int(e));
    else if (e.key == "format") {
      if (detail::config_int(e) != 1) throw io_error("unsupported dataset format in " + path.string());
    }
  }
  out.data.fmri = read_tensor(file("fmri"));
  out.data.eeg = read_tensor(file("eeg"));
  out.truth.maps = detail::unstack_subjects(read_tensor(file("truth_maps")));
  out.truth.erps = detail::unstack_subjects(read_tensor(file("truth_erps")));
  out.truth.amps = detail::unstack_subjects(read_tensor(file("truth_amps")));
  out.truth.bolds = detail::unstack_subjects(read_tensor(file("truth_bolds")));
  out.truth.sigs = detail::unstack_subjects(read_tensor(file("truth_sigs")));
  out.truth.gains_fmri = read_matrix(file("gains_fmri"));
  out.truth.gains_eeg = read_matrix(file("gains_eeg"));

  const HrfFamily family =
      hrf_family_from_name(detail::manifest_value(ds, "hrf_family", path));
  const Matrix hrfs = read_matrix(file("hrfs"));
  for (Index k = 0; k < hrfs.cols(); ++k) {
    HrfParams p;
    p.family = family;
    p.z = hrfs.col(k);
    out.truth.hrfs.push_back(std::move(p));
  }
  return out;
}

/// A fitted solution in scoring currency: per-subject factor-mode estimates
/// plus the bookkeeping a result row carries.
struct SolutionRecord {
  std::string method;
  double lambda_b = 0, lambda_1 = 0, lambda_2 = 0;
  CostBreakdown cost;
  int sweeps = 0;
  long long nls_step_evals = 0;
  std::string notes;
  SubjectEstimates estimates;
};

/// Writes a solution directory: manifest.cfg plus one stacked tensor per
/// factor mode (fMRI: spatial, time; EEG: erp, signature, amplitude).
inline void save_solution(const std::filesystem::path& dir, const SolutionRecord& sol) {
  namespace fs = std::filesystem;
  detail::require(!sol.estimates.fmri.empty() && !sol.estimates.eeg.empty(),
                  "save_solution: empty estimates");
  const std::size_t n_sub = sol.estimates.fmri.size();
  detail::require(sol.estimates.eeg.size() == n_sub, "save_solution: modality subject mismatch");
  fs::create_directories(dir);

  const auto save_modes = [&](const std::vector<std::vector<Matrix>>& per_subject,
                              const std::string& stem, std::size_t n_modes) {
    for (std::size_t m = 0; m < n_modes; ++m) {
      std::vector<Matrix> mode;
      for (const std::vector<Matrix>& subj : per_subject) {
        detail::require(subj.size() == n_modes, "save_solution: wrong mode count");
        mode.push_back(subj[m]);
      }
      write_tensor(dir / (stem + std::to_string(m) + ".tnsr"), detail::stack_subjects(mode));
    }
  };
  save_modes(sol.estimates.fmri, "est_fmri_", 2);
  save_modes(sol.estimates.eeg, "est_eeg_", 3);

  const std::filesystem::path path = dir / "manifest.cfg";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  out << "[solution]\n";
  out << "format = 1\n";
  out << "method = " << detail::manifest_safe(sol.method) << "\n";
  out << "lambda_b = " << detail::fmt_g(sol.lambda_b) << "\n";
  out << "lambda_1 = " << detail::fmt_g(sol.lambda_1) << "\n";
  out << "lambda_2 = " << detail::fmt_g(sol.lambda_2) << "\n";
  out << "cost_fmri_resid = " << detail::fmt_g(sol.cost.fmri_resid) << "\n";
  out << "cost_eeg_resid = " << detail::fmt_g(sol.cost.eeg_resid) << "\n";
  out << "cost_pen_spatial = " << detail::fmt_g(sol.cost.pen_spatial) << "\n";
  out << "cost_pen_time = " << detail::fmt_g(sol.cost.pen_time) << "\n";
  out << "cost_pen_subject = " << detail::fmt_g(sol.cost.pen_subject) << "\n";
  out << "sweeps = " << sol.sweeps << "\n";
  out << "nls_step_evals = " << sol.nls_step_evals << "\n";
  if (!sol.notes.empty()) out << "notes = " << detail::manifest_safe(sol.notes) << "\n";
  out << "n_subjects = " << n_sub << "\n";
  out << "est_fmri_0 = est_fmri_0.tnsr\n";
  out << "est_fmri_1 = est_fmri_1.tnsr\n";
  out << "est_eeg_0 = est_eeg_0.tnsr\n";
  out << "est_eeg_1 = est_eeg_1.tnsr\n";
  out << "est_eeg_2 = est_eeg_2.tnsr\n";
  if (!out) throw io_error("write failed: " + path.string());
}

/// Reads a solution directory written by save_solution.
inline SolutionRecord load_solution(const std::filesystem::path& dir) {
  const std::vector<ConfigSection> sections = detail::read_manifest(dir);
  const std::filesystem::path path = dir / "manifest.cfg";
  const ConfigSection& sec = detail::manifest_section(sections, "solution", path);

  SolutionRecord sol;
  for (const ConfigEntry& e : sec.entries) {
    if (e.key == "method") sol.method = e.value;
    else if (e.key == "lambda_b") sol.lambda_b = detail::config_double(e);
    else if (e.key == "lambda_1") sol.lambda_1 = detail::config_double(e);
    else if (e.key == "lambda_2") sol.lambda_2 = detail::config_double(e);
    else if (e.key == "cost_fmri_resid") sol.cost.fmri_resid = detail::config_double(e);
    else if (e.key == "cost_eeg_resid") sol.cost.eeg_resid = detail::config_double(e);
    else if (e.key == "cost_pen_spatial") sol.cost.pen_spatial = detail::config_double(e);
    else if (e.key == "cost_pen_time") sol.cost.pen_time = detail::config_double(e);
    else if (e.key == "cost_pen_subject") sol.cost.pen_subject = detail::config_double(e);
    else if (e.key == "sweeps") sol.sweeps = static_cast<int>(detail::config_int(e));
    else if (e.key == "nls_step_evals") sol.nls_step_evals = detail::config_int(e);
    else if (e.key == "notes") sol.notes = e.value;
  }
  const auto modes = [&](const std::string& stem, std::size_t n_modes) {
    std::vector<std::vector<Matrix>> per_subject;
    for (std::size_t m = 0; m < n_modes; ++m) {
      const std::filesystem::path f =
          dir / detail::manifest_value(sec, stem + std::to_string(m), path);
      const std::vector<Matrix> mats = detail::unstack_subjects(read_tensor(f));
      per_subject.resize(mats.size());
      for (std::size_t k = 0; k < mats.size(); ++k) per_subject[k].push_back(mats[k]);
    }
    return per_subject;
  };
  sol.estimates.fmri = modes("est_fmri_", 2);
  sol.estimates.eeg = modes("est_eeg_", 3);
  return sol;
}

}  // namespace ctfuse
