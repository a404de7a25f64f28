#pragma once

// Haemodynamic response function (HRF) models and the linear operator that
// maps trial-amplitude sequences to sampled BOLD time courses.
//
// Two parametric kernel families:
//  * double Gamma, z = (z1..z5):
//      h(t) = g(t; z1, z2) - z3 * g(t; z4, z5),
//      g(t; a, b) = b^a t^(a-1) exp(-b t) / Gamma(a)
//    with the canonical parameterization z = (6, 1, 1/6, 16, 1);
//  * Lennard-Jones, z = (z1..z3):
//      h(t) = Gamma(z1 t)^-3 - z2 * Gamma(z3 t)^-6,
//    a 3-parameter surrogate whose defaults are calibrated against the
//    canonical double Gamma kernel (correlation 0.998 on [0, 32] s).
//
// The operator H = D * C is a causal lower-triangular Toeplitz convolution C
// with the kernel sampled at the input rate, followed by decimation D that
// keeps every (rate_in/rate_out)-th row. Applied to a length-I_b trial
// sequence it yields ceil(I_b / m) output samples, m = rate_in / rate_out.

#include <boost/math/special_functions/digamma.hpp>

#include <cmath>
#include <vector>

#include "ctfuse/errors.hpp"
#include "ctfuse/linalg.hpp"
#include "ctfuse/tensor.hpp"

namespace ctfuse {

enum class HrfFamily { double_gamma, lennard_jones };

/// Parametric HRF: a family tag plus its parameter vector (5 for the double
/// Gamma, 3 for Lennard-Jones). All parameters must be strictly positive.
struct HrfParams {
  HrfFamily family = HrfFamily::double_gamma;
  Vector z;

  Index n_params() const noexcept { return z.size(); }

  static HrfParams canonical_double_gamma() {
    HrfParams p;
    p.family = HrfFamily::double_gamma;
    p.z = Vector(5);
    p.z << 6.0, 1.0, 1.0 / 6.0, 16.0, 1.0;
    return p;
  }

  /// 3-parameter kernel calibrated offline against the canonical double
  /// Gamma on [0, 32] s (see calibrate_lennard_jones for the procedure).
  static HrfParams default_lennard_jones() {
    HrfParams p;
    p.family = HrfFamily::lennard_jones;
    p.z = Vector(3);
    p.z << 0.281386, 0.067270, 0.085928;
    return p;
  }
};

namespace detail {

inline void check_hrf(const HrfParams& p) {
  const Index expect = p.family == HrfFamily::double_gamma ? 5 : 3;
  require(p.z.size() == expect, "HrfParams: wrong parameter count for family");
  if (p.family == HrfFamily::double_gamma) {
    require((p.z.array() > 0.0).all(), "HrfParams: double-Gamma parameters must be strictly positive");
  } else {
    // The Lennard-Jones kernel is defined over the non-negative reals.
    require((p.z.array() >= 0.0).all(), "HrfParams: Lennard-Jones parameters must be non-negative");
  }
}

/// Normalized gamma density g(t; a, b) for t > 0, via logs for stability.
inline double gamma_density(double t, double a, double b) {
  return std::exp(a * std::log(b) + (a - 1.0) * std::log(t) - b * t - std::lgamma(a));
}

/// Gamma(x)^-n = exp(-n * lgamma(x)), finite for all x > 0.
inline double inv_gamma_pow(double x, int n) { return std::exp(-n * std::lgamma(x)); }

}  // namespace detail

/// Kernel value h(t), t >= 0. Returns 0 at t = 0 (both families vanish in
/// that limit).
inline double hrf_eval(const HrfParams& p, double t) {
  detail::check_hrf(p);
  detail::require(t >= 0.0, "hrf_eval: t must be >= 0");
  if (t == 0.0) return 0.0;
  if (p.family == HrfFamily::double_gamma) {
    return detail::gamma_density(t, p.z(0), p.z(1)) - p.z(2) * detail::gamma_density(t, p.z(3), p.z(4));
  }
  return detail::inv_gamma_pow(p.z(0) * t, 3) - p.z(1) * detail::inv_gamma_pow(p.z(2) * t, 6);
}

/// Analytic gradient of h(t) with respect to the parameter vector, t > 0
/// (the digamma factors pole as z*t -> 0, so t = 0 is rejected).
inline Vector hrf_grad_params(const HrfParams& p, double t) {
  detail::check_hrf(p);
  detail::require(t > 0.0, "hrf_grad_params: t must be > 0");
  Vector g = Vector::Zero(p.z.size());
  if (p.family == HrfFamily::double_gamma) {
    const double g1 = detail::gamma_density(t, p.z(0), p.z(1));
    const double g2 = detail::gamma_density(t, p.z(3), p.z(4));
    g(0) = g1 * (std::log(p.z(1)) + std::log(t) - boost::math::digamma(p.z(0)));
    g(1) = g1 * (p.z(0) / p.z(1) - t);
    g(2) = -g2;
    g(3) = -p.z(2) * g2 * (std::log(p.z(4)) + std::log(t) - boost::math::digamma(p.z(3)));
    g(4) = -p.z(2) * g2 * (p.z(3) / p.z(4) - t);
    return g;
  }
  // Gamma(0)^-n = 0, so terms with a vanishing factor are 0 by the limit —
  // guard them instead of evaluating digamma at its pole.
  const double a = p.z(0) > 0 ? detail::inv_gamma_pow(p.z(0) * t, 3) : 0.0;
  const double b = p.z(2) > 0 ? detail::inv_gamma_pow(p.z(2) * t, 6) : 0.0;
  g(0) = a != 0.0 ? -3.0 * a * boost::math::digamma(p.z(0) * t) * t : 0.0;
  g(1) = -b;
  g(2) = (p.z(1) != 0.0 && b != 0.0) ? 6.0 * p.z(1) * b * boost::math::digamma(p.z(2) * t) * t : 0.0;
  return g;
}

/// Analytic time derivative dh/dt, t > 0 (see hrf_grad_params).
inline double hrf_grad_time(const HrfParams& p, double t) {
  detail::check_hrf(p);
  detail::require(t > 0.0, "hrf_grad_time: t must be > 0");
  if (p.family == HrfFamily::double_gamma) {
    const double g1 = detail::gamma_density(t, p.z(0), p.z(1));
    const double g2 = detail::gamma_density(t, p.z(3), p.z(4));
    return g1 * ((p.z(0) - 1.0) / t - p.z(1)) - p.z(2) * g2 * ((p.z(3) - 1.0) / t - p.z(4));
  }
  const double a = p.z(0) > 0 ? detail::inv_gamma_pow(p.z(0) * t, 3) : 0.0;
  const double b = p.z(2) > 0 ? detail::inv_gamma_pow(p.z(2) * t, 6) : 0.0;
  const double first = a != 0.0 ? -3.0 * a * boost::math::digamma(p.z(0) * t) * p.z(0) : 0.0;
  const double second =
      (p.z(1) != 0.0 && b != 0.0) ? 6.0 * p.z(1) * b * boost::math::digamma(p.z(2) * t) * p.z(2) : 0.0;
  return first + second;
}

/// Kernel sampled at `rate_hz` on [0, support_s] inclusive:
/// kernel[j] = h(j / rate_hz), j = 0 .. floor(support_s * rate_hz).
inline Vector sample_hrf_kernel(const HrfParams& p, double rate_hz, double support_s = 32.0) {
  detail::require(rate_hz > 0.0 && support_s > 0.0, "sample_hrf_kernel: rate and support must be positive");
  const auto len = static_cast<Index>(std::floor(support_s * rate_hz)) + 1;
  Vector k(len);
  for (Index j = 0; j < len; ++j) k(j) = hrf_eval(p, static_cast<double>(j) / rate_hz);
  return k;
}

/// Derivative of the sampled kernel with respect to parameter `which`.
/// The t = 0 sample is 0, the limiting value of every component.
inline Vector sample_hrf_kernel_grad(const HrfParams& p, Index which, double rate_hz, double support_s = 32.0) {
  detail::require(which >= 0 && which < p.z.size(), "sample_hrf_kernel_grad: parameter index out of range");
  const auto len = static_cast<Index>(std::floor(support_s * rate_hz)) + 1;
  Vector k(len);
  k(0) = 0.0;
  for (Index j = 1; j < len; ++j) k(j) = hrf_grad_params(p, static_cast<double>(j) / rate_hz)(which);
  return k;
}

/// Decimated causal convolution operator (see file header).
class HrfOperator {
 public:
  /// Builds H for a length-`len_in` input sampled at `rate_in_hz`, producing
  /// output samples at `rate_out_hz`. rate_in/rate_out must be integral.
  HrfOperator(const HrfParams& p, double rate_in_hz, double rate_out_hz, Index len_in, double support_s = 32.0)
      : HrfOperator(sample_hrf_kernel(p, rate_in_hz, support_s), rate_in_hz, rate_out_hz, len_in) {}

  /// Same operator from an already-sampled kernel (at the input rate).
  HrfOperator(Vector kernel, double rate_in_hz, double rate_out_hz, Index len_in)
      : kernel_(std::move(kernel)), rate_in_(rate_in_hz), rate_out_(rate_out_hz) {
    detail::require(len_in >= 1, "HrfOperator: input length must be >= 1");
    detail::require(rate_in_hz > 0 && rate_out_hz > 0 && rate_out_hz <= rate_in_hz,
                    "HrfOperator: rates must be positive with rate_out <= rate_in");
    const double ratio = rate_in_hz / rate_out_hz;
    const auto m = static_cast<Index>(std::llround(ratio));
    detail::require(std::abs(ratio - static_cast<double>(m)) < 1e-9,
                    "HrfOperator: rate_in / rate_out must be an integer");
    decimation_ = m;
    const Index n_out = (len_in + m - 1) / m;  // ceil(len_in / m)
    h_ = Matrix::Zero(n_out, len_in);
    for (Index i = 0; i < n_out; ++i) {
      const Index row = i * m;  // position in input-rate samples
      for (Index j = 0; j <= row && j < len_in; ++j) {
        const Index lag = row - j;
        if (lag < kernel_.size()) h_(i, j) = kernel_(lag);
      }
    }
  }

  const Matrix& matrix() const noexcept { return h_; }
  const Vector& kernel() const noexcept { return kernel_; }
  Index rows() const noexcept { return h_.rows(); }
  Index cols() const noexcept { return h_.cols(); }
  Index decimation() const noexcept { return decimation_; }
  double rate_in() const noexcept { return rate_in_; }
  double rate_out() const noexcept { return rate_out_; }

  Vector apply(const Vector& x) const {
    detail::require(x.size() == h_.cols(), "HrfOperator::apply: input length mismatch");
    return h_ * x;
  }

  /// Response to a unit impulse at the first input sample: the kernel
  /// re-sampled at the output rate (truncated to the output length).
  Vector impulse_response() const { return h_.col(0); }

 private:
  Matrix h_;
  Vector kernel_;
  double rate_in_ = 1.0;
  double rate_out_ = 1.0;
  Index decimation_ = 1;
};

/// Convenience wrapper matching the operator shape contract.
inline HrfOperator build_hrf_operator(const HrfParams& p, double rate_in_hz, double rate_out_hz, Index len_in,
                                      double support_s = 32.0) {
  return HrfOperator(p, rate_in_hz, rate_out_hz, len_in, support_s);
}

/// Pearson correlation between the kernels of two HRFs sampled densely
/// (10 Hz) on [0, support_s].
inline double hrf_kernel_correlation(const HrfParams& a, const HrfParams& b, double support_s = 32.0) {
  const Vector ka = sample_hrf_kernel(a, 10.0, support_s);
  const Vector kb = sample_hrf_kernel(b, 10.0, support_s);
  return pearson(ka, kb);
}

/// Calibrates the 3-parameter Lennard-Jones kernel against a target kernel
/// sampled at `rate_hz` on [0, support_s]: damped Gauss-Newton in
/// log-parameter space on the scale-optimal residual || s*k(z) - target ||.
/// Returns the fitted parameters; `evals` (optional) receives the number of
/// trial-step cost evaluations consumed.
inline HrfParams calibrate_lennard_jones(const Vector& target, double rate_hz, double support_s = 32.0,
                                         Vector start = Vector(), int max_iters = 200, int* evals = nullptr) {
  detail::require(target.size() >= 8, "calibrate_lennard_jones: target kernel too short");
  HrfParams p;
  p.family = HrfFamily::lennard_jones;
  p.z = start.size() == 3 ? start : (Vector(3) << 0.3, 0.1, 0.1).finished();
  detail::require((p.z.array() > 0.0).all(), "calibrate_lennard_jones: start must be positive");

  const auto scaled_residual = [&](const HrfParams& q, double* scale_out) {
    Vector k = sample_hrf_kernel(q, rate_hz, support_s);
    if (k.size() != target.size()) k.conservativeResize(target.size());
    const double kk = k.squaredNorm();
    const double s = kk > 0 ? k.dot(target) / kk : 0.0;
    if (scale_out) *scale_out = s;
    return Vector(s * k - target);
  };

  int n_evals = 0;
  double scale = 1.0;
  Vector r = scaled_residual(p, &scale);
  double cost = r.squaredNorm();
  double mu = 1e-3;
  for (int it = 0; it < max_iters; ++it) {
    // Jacobian of s*k(z) - target w.r.t. log z (s held fixed per iteration).
    Matrix jac(target.size(), 3);
    for (Index q = 0; q < 3; ++q) {
      Vector dk = sample_hrf_kernel_grad(p, q, rate_hz, support_s);
      if (dk.size() != target.size()) dk.conservativeResize(target.size());
      jac.col(q) = scale * dk * p.z(q);  // chain rule for log-parameters
    }
    const Matrix jtj = jac.transpose() * jac;
    const Vector jtr = jac.transpose() * r;
    bool accepted = false;
    for (int tries = 0; tries < 12; ++tries) {
      Matrix damped = jtj;
      damped.diagonal() += mu * jtj.diagonal().cwiseMax(1e-12);
      const Vector step = damped.ldlt().solve(-jtr);
      HrfParams trial = p;
      trial.z = (p.z.array().log() + step.array()).exp().matrix();
      double trial_scale = 1.0;
      const Vector tr = scaled_residual(trial, &trial_scale);
      ++n_evals;
      if (tr.squaredNorm() < cost) {
        p = trial;
        r = tr;
        scale = trial_scale;
        cost = tr.squaredNorm();
        mu = std::max(mu * 0.3, 1e-12);
        accepted = true;
        break;
      }
      mu *= 4.0;
    }
    if (!accepted || cost < 1e-16) break;
  }
  if (evals) *evals = n_evals;
  return p;
}

/// A family of `n` double-Gamma HRFs obtained by perturbing (z1, z4) along a
/// fixed direction table scaled by a global factor; the factor is bisected
/// until the mean kernel correlation to the canonical HRF equals
/// `target_mean_corr` within `tol`. Used for per-source / per-subject
/// response variability at a controlled severity. Supports n <= 5.
inline std::vector<HrfParams> varied_double_gamma_family(int n, double target_mean_corr, double tol = 0.02,
                                                         double support_s = 32.0) {
  detail::require(n >= 1 && n <= 5, "varied_double_gamma_family: supports 1..5 members");
  detail::require(target_mean_corr > 0.3 && target_mean_corr < 1.0,
                  "varied_double_gamma_family: target correlation out of range");
  static constexpr double kDirs[5][2] = {
      {+1.0, +1.5}, {-0.7, +2.0}, {+1.8, -1.0}, {-1.2, -2.0}, {+0.6, +2.5}};
  const HrfParams canon = HrfParams::canonical_double_gamma();

  const auto family_at = [&](double alpha) {
    std::vector<HrfParams> fam;
    fam.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      HrfParams p = canon;
      p.z(0) = std::max(1.05, canon.z(0) + alpha * kDirs[i][0]);
      p.z(3) = std::max(1.05, canon.z(3) + alpha * kDirs[i][1]);
      fam.push_back(p);
    }
    return fam;
  };
  const auto mean_corr = [&](double alpha) {
    double acc = 0.0;
    for (const auto& p : family_at(alpha)) acc += std::abs(hrf_kernel_correlation(p, canon, support_s));
    return acc / n;
  };

  double lo = 0.0, hi = 4.0;  // corr(0) = 1 and corr(4) < 0.5: bracket holds
  if (mean_corr(hi) > target_mean_corr) throw numeric_error("varied_double_gamma_family: cannot bracket target");
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_corr(mid) > target_mean_corr ? lo : hi) = mid;
  }
  const double alpha = 0.5 * (lo + hi);
  detail::require(std::abs(mean_corr(alpha) - target_mean_corr) <= tol,
                  "varied_double_gamma_family: bisection failed to reach target");
  return family_at(alpha);
}

}  // namespace ctfuse
