#include <catch2/catch_amalgamated.hpp>

#include <boost/math/special_functions/digamma.hpp>

#include <cmath>

#include "ctfuse/hrf.hpp"
#include "ctfuse/rng.hpp"

using namespace ctfuse;

namespace {

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3}); }

// Central finite difference of hrf_eval along one parameter.
double fd_param(const HrfParams& p, Index which, double t, double h = 1e-6) {
  HrfParams lo = p, hi = p;
  lo.z(which) -= h;
  hi.z(which) += h;
  return (hrf_eval(hi, t) - hrf_eval(lo, t)) / (2.0 * h);
}

double fd_time(const HrfParams& p, double t, double h = 1e-6) {
  return (hrf_eval(p, t + h) - hrf_eval(p, t - h)) / (2.0 * h);
}

}  // namespace

TEST_CASE("double Gamma: canonical kernel vanishes at onset") {
  REQUIRE(hrf_eval(HrfParams::canonical_double_gamma(), 0.0) == 0.0);
}

TEST_CASE("double Gamma: canonical peak lies in [4, 6] s") {
  const HrfParams p = HrfParams::canonical_double_gamma();
  double best_t = 0.0, best_v = -1e300;
  for (double t = 0.01; t <= 30.0; t += 0.01) {
    const double v = hrf_eval(p, t);
    if (v > best_v) {
      best_v = v;
      best_t = t;
    }
  }
  REQUIRE(best_t >= 4.0);
  REQUIRE(best_t <= 6.0);
}

TEST_CASE("Lennard-Jones: z2 = 0 at t = 1/z1 gives GammaInv3(1) = 1") {
  HrfParams p;
  p.family = HrfFamily::lennard_jones;
  p.z = Vector(3);
  p.z << 0.25, 0.0, 0.1;
  REQUIRE(hrf_eval(p, 1.0 / 0.25) == Catch::Approx(1.0).margin(1e-14));
}

TEST_CASE("Lennard-Jones gradient: dH/dz2 at z3*t = 1 equals -1") {
  HrfParams p;
  p.family = HrfFamily::lennard_jones;
  p.z = Vector(3);
  p.z << 0.3, 0.05, 0.2;
  const Vector g = hrf_grad_params(p, 1.0 / 0.2);
  REQUIRE(g(1) == Catch::Approx(-1.0).margin(1e-14));
}

TEST_CASE("Lennard-Jones gradient: dH/dz3 vanishes when z2 = 0") {
  HrfParams p;
  p.family = HrfFamily::lennard_jones;
  p.z = Vector(3);
  p.z << 0.3, 0.0, 0.2;
  for (double t : {0.5, 2.0, 7.0, 20.0}) REQUIRE(hrf_grad_params(p, t)(2) == 0.0);
}

TEST_CASE("Lennard-Jones time derivative: z2 = 0 term dropout is exact") {
  HrfParams p;
  p.family = HrfFamily::lennard_jones;
  p.z = Vector(3);
  p.z << 0.3, 0.0, 0.2;
  for (double t : {0.8, 3.0, 11.0}) {
    const double expect =
        -3.0 * std::exp(-3.0 * std::lgamma(0.3 * t)) * boost::math::digamma(0.3 * t) * 0.3;
    REQUIRE(hrf_grad_time(p, t) == Catch::Approx(expect).margin(1e-15));
  }
}

TEST_CASE("gradients match central finite differences on 50 random draws") {
  Rng rng(101);
  int checked = 0;
  for (int draw = 0; draw < 50; ++draw) {
    HrfParams p;
    double t;
    if (draw % 2 == 0) {
      p.family = HrfFamily::double_gamma;
      p.z = Vector(5);
      p.z << 2.0 + 6.0 * rng.uniform(), 0.5 + 1.5 * rng.uniform(), 0.05 + 0.45 * rng.uniform(),
          8.0 + 12.0 * rng.uniform(), 0.5 + 1.5 * rng.uniform();
      t = 0.5 + 19.5 * rng.uniform();
    } else {
      p.family = HrfFamily::lennard_jones;
      p.z = Vector(3);
      p.z << 0.1 + 0.4 * rng.uniform(), 0.02 + 0.18 * rng.uniform(), 0.05 + 0.25 * rng.uniform();
      t = 1.0 + 24.0 * rng.uniform();
    }
    const Vector g = hrf_grad_params(p, t);
    for (Index q = 0; q < p.z.size(); ++q) {
      INFO("draw " << draw << " param " << q << " t " << t);
      REQUIRE(rel_err(g(q), fd_param(p, q, t)) < 1e-5);
    }
    INFO("draw " << draw << " time derivative, t " << t);
    REQUIRE(rel_err(hrf_grad_time(p, t), fd_time(p, t)) < 1e-5);
    ++checked;
  }
  REQUIRE(checked == 50);
}

TEST_CASE("time derivative sign change brackets the grid-search argmax") {
  const HrfParams p = HrfParams::canonical_double_gamma();
  double best_t = 0.0, best_v = -1e300;
  for (double t = 0.1; t <= 30.0; t += 0.01) {
    const double v = hrf_eval(p, t);
    if (v > best_v) {
      best_v = v;
      best_t = t;
    }
  }
  REQUIRE(hrf_grad_time(p, best_t - 0.05) > 0.0);
  REQUIRE(hrf_grad_time(p, best_t + 0.05) < 0.0);
}

TEST_CASE("gradients reject t <= 0 and eval rejects t < 0") {
  const HrfParams p = HrfParams::canonical_double_gamma();
  REQUIRE_THROWS_AS(hrf_eval(p, -0.1), std::invalid_argument);
  REQUIRE_THROWS_AS(hrf_grad_params(p, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(hrf_grad_time(p, 0.0), std::invalid_argument);
}

TEST_CASE("invalid parameter vectors are rejected") {
  HrfParams p;
  p.family = HrfFamily::double_gamma;
  p.z = Vector(3);
  p.z << 1, 1, 1;
  REQUIRE_THROWS_AS(hrf_eval(p, 1.0), std::invalid_argument);
  p.z = Vector(5);
  p.z << 6, -1, 0.2, 16, 1;
  REQUIRE_THROWS_AS(hrf_eval(p, 1.0), std::invalid_argument);
}

TEST_CASE("canonical kernel sign pattern: positive lobe then undershoot") {
  const Vector k = sample_hrf_kernel(HrfParams::canonical_double_gamma(), 10.0, 32.0);
  REQUIRE(k(0) == 0.0);
  const double tol = 1e-9 * k.cwiseAbs().maxCoeff();
  Index i = 1;
  while (i < k.size() && k(i) > tol) ++i;    // positive main lobe
  REQUIRE(i > 10);                           // lobe spans multiple samples
  while (i < k.size() && k(i) < -tol) ++i;   // negative undershoot
  REQUIRE(i == k.size());                    // nothing after the undershoot
}

TEST_CASE("HrfOperator: unit-impulse kernel with equal rates is identity") {
  Vector kernel(1);
  kernel << 1.0;
  const HrfOperator h(kernel, 10.0, 10.0, 5);
  REQUIRE((h.matrix() - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("HrfOperator: constant input gives running kernel sums at sampled instants") {
  const HrfParams p = HrfParams::canonical_double_gamma();
  const HrfOperator h(p, 4.0, 2.0, 40, 8.0);
  const Vector y = h.apply(Vector::Ones(40));
  const Vector& kernel = h.kernel();
  for (Index i = 0; i < y.size(); ++i) {
    double acc = 0.0;  // direct convolution: sum of kernel lags reaching sample i*m
    for (Index lag = 0; lag <= i * h.decimation() && lag < kernel.size(); ++lag) acc += kernel(lag);
    REQUIRE(y(i) == Catch::Approx(acc).margin(1e-12));
  }
}

TEST_CASE("HrfOperator: matrix action equals convolution+decimation oracle") {
  Rng rng(55);
  const HrfParams p = HrfParams::canonical_double_gamma();
  const Index len_in = 120;
  const HrfOperator h(p, 8.0, 2.0, len_in, 16.0);
  Vector x(len_in);
  for (Index i = 0; i < len_in; ++i) x(i) = rng.normal();
  const Vector y = h.apply(x);
  const Vector& kernel = h.kernel();
  for (Index i = 0; i < y.size(); ++i) {
    double acc = 0.0;
    const Index pos = i * h.decimation();
    for (Index j = 0; j <= pos && j < len_in; ++j) {
      const Index lag = pos - j;
      if (lag < kernel.size()) acc += kernel(lag) * x(j);
    }
    REQUIRE(std::abs(y(i) - acc) < 1e-12);
  }
}

TEST_CASE("HrfOperator: linearity") {
  const HrfParams p = HrfParams::canonical_double_gamma();
  const HrfOperator h(p, 4.0, 2.0, 30, 8.0);
  Rng rng(56);
  Vector x(30), y(30);
  for (Index i = 0; i < 30; ++i) {
    x(i) = rng.normal();
    y(i) = rng.normal();
  }
  const Vector lhs = h.apply(2.0 * x + 0.5 * y);
  const Vector rhs = 2.0 * h.apply(x) + 0.5 * h.apply(y);
  REQUIRE((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("HrfOperator: canonical impulse response peaks 5 s +/- one output sample") {
  const HrfParams p = HrfParams::canonical_double_gamma();
  const HrfOperator h(p, 1000.0, 0.5, 32000);
  const Vector imp = h.impulse_response();
  Index best = 0;
  for (Index i = 1; i < imp.size(); ++i) {
    if (imp(i) > imp(best)) best = i;
  }
  const double lag_s = static_cast<double>(best) / 0.5;
  REQUIRE(std::abs(lag_s - 5.0) <= 2.0);  // one output sample = 2 s
}

TEST_CASE("HrfOperator: non-integer rate ratio rejected") {
  const HrfParams p = HrfParams::canonical_double_gamma();
  REQUIRE_THROWS_AS(HrfOperator(p, 3.0, 2.0, 10), std::invalid_argument);
}

TEST_CASE("Lennard-Jones defaults correlate with the canonical double Gamma") {
  const double c = hrf_kernel_correlation(HrfParams::default_lennard_jones(), HrfParams::canonical_double_gamma());
  REQUIRE(c >= 0.99);
}

TEST_CASE("calibrate_lennard_jones reaches correlation >= 0.97 from the neutral start") {
  const Vector target = sample_hrf_kernel(HrfParams::canonical_double_gamma(), 10.0, 32.0);
  int evals = 0;
  const HrfParams fit = calibrate_lennard_jones(target, 10.0, 32.0, Vector(), 200, &evals);
  const double c = hrf_kernel_correlation(fit, HrfParams::canonical_double_gamma());
  REQUIRE(c >= 0.97);
  REQUIRE(evals > 0);
}

TEST_CASE("varied_double_gamma_family hits the target mean correlation") {
  const auto fam = varied_double_gamma_family(5, 0.8, 0.02);
  REQUIRE(fam.size() == 5);
  const HrfParams canon = HrfParams::canonical_double_gamma();
  double mean = 0.0;
  for (const auto& p : fam) {
    REQUIRE((p.z.array() > 0.0).all());
    mean += std::abs(hrf_kernel_correlation(p, canon));
  }
  mean /= 5.0;
  REQUIRE(std::abs(mean - 0.8) <= 0.02);
}

TEST_CASE("sample_hrf_kernel_grad matches per-sample analytic gradient") {
  const HrfParams p = HrfParams::canonical_double_gamma();
  const Vector g0 = sample_hrf_kernel_grad(p, 0, 2.0, 16.0);
  REQUIRE(g0(0) == 0.0);
  for (Index j = 1; j < g0.size(); ++j) {
    REQUIRE(g0(j) == hrf_grad_params(p, static_cast<double>(j) / 2.0)(0));
  }
}
