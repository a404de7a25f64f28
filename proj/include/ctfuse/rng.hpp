#pragma once

// Deterministic random-number utilities.
//
// Seeds for experiment cells are derived by hashing structured keys
// (master seed, scenario name, method, lambda, replication) so that any
// cell's stream is reproducible in isolation, independent of execution
// order. Gaussian variates use an explicit Box-Muller transform on top of
// mt19937_64 so streams do not depend on the standard library's
// unspecified normal_distribution algorithm.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace ctfuse {

/// splitmix64 finalizer: a well-mixed 64-bit permutation.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a hash of a string (for scenario/method names in seed derivation).
inline std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Combines seed material associatively-insensitively: order matters,
/// collisions are negligible.
inline std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b) { return mix64(a ^ mix64(b)); }

inline std::uint64_t seed_combine(std::uint64_t a, std::string_view s) { return seed_combine(a, hash_str(s)); }

/// Deterministic RNG with the distributions this library needs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  std::uint64_t raw() { return engine_(); }

  /// Uniform on [lo, hi).
  double uniform(double lo = 0.0, double hi = 1.0) {
    // 53-bit mantissa-exact uniform in [0,1).
    const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
  }

  /// Standard normal via Box-Muller (deterministic across platforms).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    constexpr double two_pi = 6.283185307179586476925286766559;
    spare_ = radius * std::sin(two_pi * u2);
    have_spare_ = true;
    return radius * std::cos(two_pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ctfuse
