#pragma once

// Structured-text configuration shared by experiment configs and the
// dataset/solution manifests: [section] headers, key = value lines, lists
// in brackets, '#' comments. Parse errors carry 1-based line numbers.
//
// Also binds the text format to Scenario records (key application and a
// complete-section writer, so written scenarios reparse identically).

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctfuse/errors.hpp"
#include "ctfuse/hrf.hpp"
#include "ctfuse/simgen.hpp"

namespace ctfuse {

struct ConfigEntry {
  int line = 0;
  std::string key, value;
};

struct ConfigSection {
  int line = 0;
  std::string name;  ///< e.g. "experiment" or "scenario exact_hrf"
  std::vector<ConfigEntry> entries;
};

namespace detail {

inline std::string config_trim(std::string s) {
  const auto notspace = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
  s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
  return s;
}

[[noreturn]] inline void config_fail(int line, const std::string& msg) {
  throw config_error("line " + std::to_string(line) + ": " + msg);
}

inline double config_double(const ConfigEntry& e) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(e.value, &pos);
  } catch (const std::exception&) {
    config_fail(e.line, "expected a number for '" + e.key + "', got '" + e.value + "'");
  }
  if (pos != e.value.size()) config_fail(e.line, "trailing characters after number in '" + e.key + "'");
  return v;
}

inline long long config_int(const ConfigEntry& e) {
  const double v = config_double(e);
  const long long i = static_cast<long long>(v);
  if (static_cast<double>(i) != v) config_fail(e.line, "expected an integer for '" + e.key + "'");
  return i;
}

/// Full-range 64-bit parse; seeds routinely exceed the 2^53 range where
/// double-backed parsing stays exact.
inline std::uint64_t config_uint64(const ConfigEntry& e) {
  const std::string& v = e.value;
  const bool digits =
      !v.empty() && std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); });
  if (digits) {
    try {
      std::size_t pos = 0;
      const unsigned long long u = std::stoull(v, &pos);
      if (pos == v.size()) return static_cast<std::uint64_t>(u);
    } catch (const std::exception&) {
    }
  }
  config_fail(e.line, "expected an unsigned 64-bit integer for '" + e.key + "'");
}

inline bool config_bool(const ConfigEntry& e) {
  if (e.value == "true" || e.value == "on" || e.value == "1") return true;
  if (e.value == "false" || e.value == "off" || e.value == "0") return false;
  config_fail(e.line, "expected true/false for '" + e.key + "'");
}

inline std::vector<std::string> config_list(const ConfigEntry& e) {
  std::string v = config_trim(e.value);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
    config_fail(e.line, "expected a bracketed list for '" + e.key + "'");
  }
  v = v.substr(1, v.size() - 2);
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = config_trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<double> config_double_list(const ConfigEntry& e) {
  std::vector<double> out;
  for (const std::string& s : config_list(e)) {
    ConfigEntry sub{e.line, e.key, s};
    out.push_back(config_double(sub));
  }
  if (out.empty()) config_fail(e.line, "empty list for '" + e.key + "'");
  return out;
}

/// Shortest decimal form that round-trips an IEEE double.
inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// Parses the section/key-value text format shared by experiment configs and
/// dataset/solution manifests.
inline std::vector<ConfigSection> parse_config_text(std::istream& in) {
  std::vector<ConfigSection> sections;
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string s = detail::config_trim(raw);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') detail::config_fail(line, "unterminated section header");
      const std::string name = detail::config_trim(s.substr(1, s.size() - 2));
      if (name.empty()) detail::config_fail(line, "empty section name");
      sections.push_back({line, name, {}});
      continue;
    }
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) detail::config_fail(line, "expected 'key = value'");
    if (sections.empty()) detail::config_fail(line, "entry before any [section] header");
    ConfigEntry e;
    e.line = line;
    e.key = detail::config_trim(s.substr(0, eq));
    e.value = detail::config_trim(s.substr(eq + 1));
    if (e.key.empty()) detail::config_fail(line, "empty key");
    sections.back().entries.push_back(std::move(e));
  }
  return sections;
}

inline const char* hrf_mode_name(HrfMode m) {
  if (m == HrfMode::canonical) return "canonical";
  return m == HrfMode::per_subject_set ? "per_subject_set" : "per_source_set";
}

inline const char* spatial_mode_name(SpatialMode m) {
  return m == SpatialMode::none ? "none" : "rotate_shift";
}

inline const char* hrf_family_name(HrfFamily f) {
  return f == HrfFamily::double_gamma ? "double_gamma" : "lennard_jones";
}

inline HrfFamily hrf_family_from_name(const std::string& s) {
  if (s == "double_gamma") return HrfFamily::double_gamma;
  if (s == "lennard_jones") return HrfFamily::lennard_jones;
  throw config_error("unknown HRF family: " + s);
}

namespace detail {

inline void apply_scenario_entry(Scenario& sc, const ConfigEntry& e) {
  if (e.key == "n_subjects") sc.n_subjects = static_cast<Index>(config_int(e));
  else if (e.key == "sources") {
    sc.sources.clear();
    for (double v : config_double_list(e)) sc.sources.push_back(static_cast<int>(v));
  } else if (e.key == "snr_fmri") sc.snr_fmri = config_double(e);
  else if (e.key == "snr_eeg") sc.snr_eeg = config_double(e);
  else if (e.key == "erp_shift_ms") sc.erp_shift_ms = config_double(e);
  else if (e.key == "timecourse_shift_s") sc.timecourse_shift_s = config_double(e);
  else if (e.key == "hrf_mode") {
    if (e.value == "canonical") sc.hrf_mode = HrfMode::canonical;
    else if (e.value == "per_subject_set") sc.hrf_mode = HrfMode::per_subject_set;
    else if (e.value == "per_source_set") sc.hrf_mode = HrfMode::per_source_set;
    else config_fail(e.line, "hrf_mode must be canonical, per_subject_set, or per_source_set");
  } else if (e.key == "spatial") {
    if (e.value == "none") sc.spatial = SpatialMode::none;
    else if (e.value == "rotate_shift") sc.spatial = SpatialMode::rotate_shift;
    else config_fail(e.line, "spatial must be none or rotate_shift");
  } else if (e.key == "n_trials") sc.n_trials = static_cast<Index>(config_int(e));
  else if (e.key == "n_electrodes") sc.n_electrodes = static_cast<Index>(config_int(e));
  else if (e.key == "erp_samples") sc.erp_samples = static_cast<Index>(config_int(e));
  else if (e.key == "erp_rate_hz") sc.erp_rate_hz = config_double(e);
  else if (e.key == "trial_rate_hz") sc.trial_rate_hz = config_double(e);
  else if (e.key == "volume_rate_hz") sc.volume_rate_hz = config_double(e);
  else if (e.key == "seed") sc.seed = config_uint64(e);
  else config_fail(e.line, "unknown scenario key '" + e.key + "'");
}

/// Scenario template for `name`: the registry entry when the name is known,
/// otherwise a default record carrying a name-derived seed.
inline Scenario scenario_template(const std::string& name) {
  for (Scenario& sc : scenario_registry()) {
    if (sc.name == name) return sc;
  }
  Scenario sc;
  sc.name = name;
  sc.seed = hash_str(name);
  return sc;
}

}  // namespace detail

/// Writes `sc` as a complete `[scenario <name>]` section; applying the
/// written entries to a default record reproduces `sc` exactly.
inline void write_scenario_section(std::ostream& os, const Scenario& sc) {
  os << "[scenario " << sc.name << "]\n";
  os << "n_subjects = " << sc.n_subjects << "\n";
  os << "sources = [";
  for (std::size_t i = 0; i < sc.sources.size(); ++i) os << (i ? ", " : "") << sc.sources[i];
  os << "]\n";
  os << "snr_fmri = " << detail::fmt_g(sc.snr_fmri) << "\n";
  os << "snr_eeg = " << detail::fmt_g(sc.snr_eeg) << "\n";
  os << "erp_shift_ms = " << detail::fmt_g(sc.erp_shift_ms) << "\n";
  os << "timecourse_shift_s = " << detail::fmt_g(sc.timecourse_shift_s) << "\n";
  os << "hrf_mode = " << hrf_mode_name(sc.hrf_mode) << "\n";
  os << "spatial = " << spatial_mode_name(sc.spatial) << "\n";
  os << "n_trials = " << sc.n_trials << "\n";
  os << "n_electrodes = " << sc.n_electrodes << "\n";
  os << "erp_samples = " << sc.erp_samples << "\n";
  os << "erp_rate_hz = " << detail::fmt_g(sc.erp_rate_hz) << "\n";
  os << "trial_rate_hz = " << detail::fmt_g(sc.trial_rate_hz) << "\n";
  os << "volume_rate_hz = " << detail::fmt_g(sc.volume_rate_hz) << "\n";
  os << "seed = " << sc.seed << "\n";
}

}  // namespace ctfuse
