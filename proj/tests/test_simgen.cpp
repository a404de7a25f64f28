#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "ctfuse/linalg.hpp"
#include "ctfuse/simgen.hpp"
#include "ctfuse/tensor.hpp"

using namespace ctfuse;

namespace {

Scenario small_scenario() {
  Scenario sc;
  sc.name = "unit";
  sc.n_subjects = 3;
  sc.sources = {0, 3};
  sc.n_trials = 12;
  sc.n_electrodes = 16;
  sc.snr_fmri = 2.0;
  sc.snr_eeg = 2.0;
  sc.seed = 77;
  return sc;
}

Scenario noiseless(Scenario sc) {
  sc.snr_fmri = 0.0;
  sc.snr_eeg = 0.0;
  return sc;
}

}  // namespace

TEST_CASE("disc mask holds exactly 2452 cells") {
  const std::vector<char>& mask = disc_mask();
  REQUIRE(static_cast<Index>(mask.size()) == kGridVoxels);
  Index active = 0;
  double max_r2 = 0.0, min_out_r2 = std::numeric_limits<double>::infinity();
  for (Index x = 0; x < kGridSide; ++x) {
    for (Index y = 0; y < kGridSide; ++y) {
      const double dx = static_cast<double>(x) - kGridCenter;
      const double dy = static_cast<double>(y) - kGridCenter;
      const double r2 = dx * dx + dy * dy;
      if (mask[static_cast<std::size_t>(x * kGridSide + y)]) {
        ++active;
        max_r2 = std::max(max_r2, r2);
      } else {
        min_out_r2 = std::min(min_out_r2, r2);
      }
    }
  }
  REQUIRE(active == kDiscVoxels);
  // The mask is a true disc: every excluded cell is at least as far out as
  // the farthest included one.
  REQUIRE(max_r2 <= min_out_r2 + 1e-12);
}

TEST_CASE("source templates: norms, overlap topology, ERP separation") {
  const auto& lib = source_library();
  for (const SourceTemplate& s : lib) {
    REQUIRE(s.map.size() == kGridVoxels);
    REQUIRE(std::abs(s.map.norm() - 1.0) < 1e-12);
    REQUIRE(std::abs(s.erp.norm() - 1.0) < 1e-12);
    REQUIRE(s.map.minCoeff() >= 0.0);
    // Support confined to the disc.
    const std::vector<char>& mask = disc_mask();
    for (Index v = 0; v < kGridVoxels; ++v) {
      if (!mask[static_cast<std::size_t>(v)]) REQUIRE(s.map(v) == 0.0);
    }
  }

  Matrix overlap(6, 6);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      overlap(i, j) = lib[static_cast<std::size_t>(i)].map.dot(lib[static_cast<std::size_t>(j)].map);
    }
  }
  // The broad source (index 3) overlaps at least three others.
  int s4_overlaps = 0;
  for (int j = 0; j < 6; ++j) {
    if (j != 3 && overlap(3, j) > 0.0) ++s4_overlaps;
  }
  REQUIRE(s4_overlaps >= 3);
  // The designated low-overlap subset {1, 2, 3} is pairwise disjoint.
  REQUIRE(overlap(1, 2) == 0.0);
  REQUIRE(overlap(1, 3) == 0.0);
  REQUIRE(overlap(2, 3) == 0.0);

  for (int i = 0; i < 6; ++i) {
    for (int j = i + 1; j < 6; ++j) {
      REQUIRE(std::abs(pearson(lib[static_cast<std::size_t>(i)].erp,
                               lib[static_cast<std::size_t>(j)].erp)) < 0.6);
    }
  }
}

TEST_CASE("lead field: rank, normalization, decay, disjoint signatures") {
  const Matrix lead = make_lead_field();
  REQUIRE(lead.rows() == 128);
  REQUIRE(lead.cols() == kGridVoxels);
  for (Index e = 0; e < lead.rows(); ++e) {
    REQUIRE(std::abs(lead.row(e).norm() - 1.0) < 1e-12);
    REQUIRE(lead.row(e).minCoeff() > 0.0);
  }

  // Numerical rank via the electrode-space Gram spectrum.
  const Matrix gram = lead * lead.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
  const double tol = 1e-12 * es.eigenvalues().maxCoeff();
  Index rank = 0;
  for (Index i = 0; i < es.eigenvalues().size(); ++i) {
    if (es.eigenvalues()(i) > tol) ++rank;
  }
  REQUIRE(rank == 128);

  // Sensitivity of electrode 0 (on the +x rim) decays monotonically while
  // walking away from it along the x axis.
  double prev = std::numeric_limits<double>::infinity();
  for (Index x = 62; x >= 10; x -= 4) {
    const double v = lead(0, x * kGridSide + 34);
    REQUIRE(v < prev);
    prev = v;
  }

  // Exact linearity of the projection.
  Rng rng(11);
  Vector a(kGridVoxels), b(kGridVoxels);
  for (Index i = 0; i < kGridVoxels; ++i) {
    a(i) = rng.normal();
    b(i) = rng.normal();
  }
  const Vector lhs = lead * (2.5 * a - 0.75 * b);
  const Vector rhs = 2.5 * (lead * a) - 0.75 * (lead * b);
  REQUIRE((lhs - rhs).norm() <= 1e-12 * rhs.norm());

  // Well-separated sources produce dissimilar electrode signatures.
  const auto& lib = source_library();
  const Vector s2 = lead * lib[1].map;
  const Vector s3 = lead * lib[2].map;
  REQUIRE(std::abs(pearson(s2, s3)) < 0.5);
}

TEST_CASE("generative identity holds on noise-free data") {
  const Scenario sc = noiseless(small_scenario());
  const auto [ds, gt] = generate(sc, 0);
  const Index r = sc.n_sources();
  const Index volumes = sc.n_volumes();

  for (Index k = 0; k < sc.n_subjects; ++k) {
    Matrix fmri_model = Matrix::Zero(kGridVoxels, volumes);
    for (Index q = 0; q < r; ++q) {
      fmri_model.noalias() +=
          gt.gains_fmri(k, q) * gt.maps[static_cast<std::size_t>(k)].col(q) *
          gt.bolds[static_cast<std::size_t>(k)].col(q).transpose();
    }
    const Matrix slice = subject_fmri(ds.fmri, k);
    REQUIRE((slice - fmri_model).norm() <= 1e-10 * fmri_model.norm());

    const DenseTensor eeg_k = subject_eeg(ds.eeg, k);
    DenseTensor eeg_model({sc.erp_samples, sc.n_electrodes, sc.n_trials});
    for (Index q = 0; q < r; ++q) {
      const Vector& erp = gt.erps[static_cast<std::size_t>(k)].col(q);
      const Vector& sig = gt.sigs[static_cast<std::size_t>(k)].col(q);
      const Vector& amp = gt.amps[static_cast<std::size_t>(k)].col(q);
      for (Index t = 0; t < sc.n_trials; ++t) {
        for (Index e = 0; e < sc.n_electrodes; ++e) {
          for (Index s = 0; s < sc.erp_samples; ++s) {
            eeg_model(s, e, t) += gt.gains_eeg(k, q) * erp(s) * sig(e) * amp(t);
          }
        }
      }
    }
    REQUIRE((eeg_k.values() - eeg_model.values()).norm() <=
            1e-10 * eeg_model.values().norm());
  }
}

TEST_CASE("noise hits the target SNR exactly") {
  const Scenario sc = small_scenario();
  const auto [noisy, gt1] = generate(sc, 2);
  const auto [clean, gt2] = generate(noiseless(sc), 2);

  const double fmri_sig = clean.fmri.squared_norm();
  const double fmri_noise = (noisy.fmri.values() - clean.fmri.values()).squaredNorm();
  REQUIRE(std::abs(fmri_sig / fmri_noise - sc.snr_fmri) <= 1e-10 * sc.snr_fmri);

  const double eeg_sig = clean.eeg.squared_norm();
  const double eeg_noise = (noisy.eeg.values() - clean.eeg.values()).squaredNorm();
  REQUIRE(std::abs(eeg_sig / eeg_noise - sc.snr_eeg) <= 1e-10 * sc.snr_eeg);
}

TEST_CASE("BOLD course lags the amplitude sequence by 4-6 seconds") {
  // Pool the centered cross-covariance between trial amplitudes and BOLD
  // over sources and subjects; its lag profile traces the HRF kernel.
  Scenario sc;
  sc.name = "lag";
  sc.n_subjects = 2;
  sc.sources = {0, 3};
  sc.n_trials = 2000;
  sc.n_electrodes = 2;
  sc.snr_fmri = 0.0;
  sc.snr_eeg = 0.0;
  sc.seed = 77;
  const auto [ds, gt] = generate(sc, 0);
  const Index m = static_cast<Index>(sc.trial_rate_hz / sc.volume_rate_hz);

  double best = -1e30;
  Index best_lag = -1;
  for (Index lag = 0; lag <= 12; ++lag) {
    double c = 0.0;
    for (Index k = 0; k < sc.n_subjects; ++k) {
      for (Index q = 0; q < sc.n_sources(); ++q) {
        const Vector& amp = gt.amps[static_cast<std::size_t>(k)].col(q);
        const Vector& bold = gt.bolds[static_cast<std::size_t>(k)].col(q);
        const double am = amp.mean(), bm = bold.mean();
        for (Index j = 0; j < bold.size(); ++j) {
          const Index t = j * m - lag;
          if (t >= 0 && t < amp.size()) c += (bold(j) - bm) * (amp(t) - am);
        }
      }
    }
    if (c > best) {
      best = c;
      best_lag = lag;
    }
  }
  const double lag_s = static_cast<double>(best_lag) / sc.trial_rate_hz;
  REQUIRE(lag_s >= 4.0);
  REQUIRE(lag_s <= 6.0);
}

TEST_CASE("generation is bit-identical for identical inputs") {
  const Scenario sc = small_scenario();
  const auto [a, gta] = generate(sc, 5);
  const auto [b, gtb] = generate(sc, 5);
  REQUIRE(a.fmri.values() == b.fmri.values());
  REQUIRE(a.eeg.values() == b.eeg.values());
  REQUIRE(gta.gains_fmri == gtb.gains_fmri);
}

TEST_CASE("replications reuse courses and redraw amplitudes, gains, noise") {
  const Scenario sc = small_scenario();
  const auto [d0, g0] = generate(sc, 0);
  const auto [d1, g1] = generate(sc, 1);
  // Trial-amplitude sequences (time courses) are scenario-level.
  REQUIRE((g0.amps[0] - g1.amps[0]).norm() == 0.0);
  // Voxel levels, subject strengths, and noise are replication-level.
  REQUIRE((g0.maps[0] - g1.maps[0]).norm() > 1e-6);
  REQUIRE((g0.gains_fmri - g1.gains_fmri).norm() > 1e-6);
  REQUIRE((d0.fmri.values() - d1.fmri.values()).norm() > 1e-6);
}

TEST_CASE("per-subject variability: ERP shifts, spatial transforms, HRF sets") {
  // ERP shifts: subject k's waveform is the template delayed by k increments.
  Scenario sc = noiseless(small_scenario());
  sc.erp_shift_ms = 10.0;
  const auto [ds, gt] = generate(sc, 0);
  const Index shift = static_cast<Index>(std::lround(sc.erp_shift_ms * 1e-3 * sc.erp_rate_hz));
  const Vector& e0 = gt.erps[0].col(0);
  const Vector& e2 = gt.erps[2].col(0);
  double realigned = 0.0;
  for (Index i = 2 * shift; i < sc.erp_samples; ++i) realigned += e0(i - 2 * shift) * e2(i);
  REQUIRE(realigned > 0.99);  // unit vectors, so the inner product is the corr
  REQUIRE(std::abs(pearson(e0, e2)) < 0.9);

  // Without shifts all subjects share identical ERPs.
  const auto [ds0, gt0] = generate(noiseless(small_scenario()), 0);
  REQUIRE((gt0.erps[0] - gt0.erps[2]).norm() == 0.0);

  // rotate_shift moves only the designated sources and keeps every map
  // inside the disc: library source 3 slides per subject while untouched
  // sources stay bitwise identical across subjects.
  Scenario sv = noiseless(small_scenario());
  sv.spatial = SpatialMode::rotate_shift;
  const auto [dsv, gtv] = generate(sv, 0);
  REQUIRE((gtv.maps[0].col(0) - gtv.maps[2].col(0)).norm() == 0.0);
  REQUIRE((gtv.maps[0].col(1) - gtv.maps[2].col(1)).norm() > 1e-3);
  const std::vector<char>& mask = disc_mask();
  for (Index v = 0; v < kGridVoxels; ++v) {
    if (!mask[static_cast<std::size_t>(v)]) REQUIRE(gtv.maps[2].row(v).isZero(0.0));
  }

  // Library source 1 rotates about the grid center; its neighbor does not.
  Scenario sr = noiseless(small_scenario());
  sr.sources = {1, 2};
  sr.spatial = SpatialMode::rotate_shift;
  const auto [dsr, gtr] = generate(sr, 0);
  REQUIRE((gtr.maps[0].col(0) - gtr.maps[2].col(0)).norm() > 1e-3);
  REQUIRE((gtr.maps[0].col(1) - gtr.maps[2].col(1)).norm() == 0.0);

  // Per-subject HRF set: members differ from canonical but stay correlated.
  Scenario sh = noiseless(small_scenario());
  sh.hrf_mode = HrfMode::per_subject_set;
  const auto [dsh, gth] = generate(sh, 0);
  const HrfParams canon = HrfParams::canonical_double_gamma();
  bool any_different = false;
  for (const HrfParams& p : gth.hrfs) {
    const double c = hrf_kernel_correlation(p, canon);
    REQUIRE(c > 0.5);
    if (c < 1.0 - 1e-9) any_different = true;
  }
  REQUIRE(any_different);

  // Per-source HRF set: one response per source, shared by all subjects, and
  // the family mean correlation to canonical sits at the calibrated level.
  Scenario sq = noiseless(small_scenario());
  sq.hrf_mode = HrfMode::per_source_set;
  const auto [dsq, gtq] = generate(sq, 0);
  REQUIRE(gtq.hrfs.size() == sq.sources.size());
  double mean_c = 0.0;
  for (const HrfParams& p : gtq.hrfs) mean_c += hrf_kernel_correlation(p, canon);
  mean_c /= static_cast<double>(gtq.hrfs.size());
  REQUIRE_THAT(mean_c, Catch::Matchers::WithinAbs(0.8, 0.02));
  // Same BOLD course for a given source in every subject (no shifts here),
  // unlike the per-subject mode where each subject convolves its own kernel.
  REQUIRE((gtq.bolds[0] - gtq.bolds[1]).norm() == 0.0);
  REQUIRE((gth.bolds[0] - gth.bolds[1]).norm() > 1e-6);
}

TEST_CASE("subject slicing matches elementwise indexing") {
  const Scenario sc = small_scenario();
  const auto [ds, gt] = generate(sc, 3);
  const Index k = 1;
  const Matrix slice = subject_fmri(ds.fmri, k);
  for (Index j = 0; j < ds.fmri.dim(1); j += 3) {
    for (Index v = 0; v < ds.fmri.dim(0); v += 977) {
      REQUIRE(slice(v, j) == ds.fmri(v, j, k));
    }
  }
  const DenseTensor ek = subject_eeg(ds.eeg, k);
  REQUIRE(ek.dim(0) == ds.eeg.dim(0));
  for (Index t = 0; t < ds.eeg.dim(2); t += 5) {
    for (Index e = 0; e < ds.eeg.dim(1); e += 7) {
      REQUIRE(ek(10, e, t) == ds.eeg(10, e, t, k));
    }
  }
}

TEST_CASE("scenario registry and lookup") {
  const std::vector<Scenario> reg = scenario_registry();
  REQUIRE(reg.size() == 9);
  for (const Scenario& sc : reg) {
    REQUIRE_NOTHROW(sc.validate());
    REQUIRE(sc.n_subjects == 5);
  }
  // Low-overlap conditions use the disjoint triple; high overlap uses all six.
  REQUIRE(scenario_by_name("exact_hrf").sources == std::vector<int>{1, 2, 3});
  REQUIRE(scenario_by_name("same_time").sources == std::vector<int>{1, 2, 3});
  REQUIRE(scenario_by_name("same_time_high").sources.size() == 6);
  const Scenario dt = scenario_by_name("diff_time_low");
  REQUIRE(dt.hrf_mode == HrfMode::per_subject_set);
  REQUIRE(dt.timecourse_shift_s == 1.0);
  const Scenario low = scenario_by_name("spatial_var_low");
  REQUIRE(low.sources.size() == 3);
  REQUIRE(low.spatial == SpatialMode::rotate_shift);
  REQUIRE(scenario_by_name("spatial_var_high").sources.size() == 6);
  const Scenario sht = scenario_by_name("shifted_erp");
  REQUIRE(sht.erp_shift_ms == 10.0);
  REQUIRE_THROWS_AS(scenario_by_name("nope"), config_error);

  // Distinct scenarios draw from distinct streams.
  REQUIRE(scenario_by_name("exact_hrf").seed != scenario_by_name("varied_hrf").seed);
}

TEST_CASE("scenario validation rejects bad requests") {
  Scenario sc = small_scenario();
  sc.sources = {7};
  REQUIRE_THROWS_AS(generate(sc, 0), std::invalid_argument);
  Scenario sc2 = small_scenario();
  sc2.n_subjects = 9;
  sc2.hrf_mode = HrfMode::per_subject_set;
  REQUIRE_THROWS_AS(generate(sc2, 0), std::invalid_argument);
  Scenario sc3 = small_scenario();
  sc3.sources.clear();
  REQUIRE_THROWS_AS(generate(sc3, 0), std::invalid_argument);
}
