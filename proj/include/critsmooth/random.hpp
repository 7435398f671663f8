#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

namespace critsmooth {

/// Counter-based random stream: the n-th output is a pure function of
/// (key, n). Streams for replicates, tree nodes, etc. are derived by hashing
/// the root seed with structural coordinates, so results never depend on the
/// order in which work is scheduled.
class Stream {
 public:
  using result_type = std::uint64_t;

  explicit Stream(std::uint64_t key = 0) : key_(mix(key)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

  double normal() {
    // Box-Muller; one draw per call keeps the stream position a pure count.
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  Stream child(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    return Stream(combine(combine(combine(key_, a), b), c));
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t position() const { return counter_; }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    // splitmix64 finalizer
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t combine(std::uint64_t h, std::uint64_t v) {
    return mix(h ^ (mix(v) + 0x632BE59BD9B4E019ULL + (h << 6) + (h >> 2)));
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Binomial(n, p) for counts that may exceed 64-bit range (population
/// multiplicities are stored as doubles). Exact below 1e12 trials; above that
/// the normal approximation is used, whose relative error is far below the
/// resolution of a double-valued count.
inline double sample_binomial(double n, double p, Stream& rng) {
  if (n <= 0.0 || p <= 0.0) return 0.0;
  if (p >= 1.0) return n;
  if (n < 1e12) {
    std::binomial_distribution<long long> dist(static_cast<long long>(std::llround(n)), p);
    return static_cast<double>(dist(rng));
  }
  const double mean = n * p;
  const double sd = std::sqrt(n * p * (1.0 - p));
  const double draw = std::round(mean + sd * rng.normal());
  return std::clamp(draw, 0.0, n);
}

}  // namespace critsmooth
