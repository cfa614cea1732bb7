#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace albert {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or dimensions disagree.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid or inconsistent configuration values.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed corpus, vocabulary, or instance data.
struct DataError : Error {
  using Error::Error;
};

/// File or stream I/O failure.
struct IoError : Error {
  using Error::Error;
};

/// API misuse (e.g. backward twice on one graph).
struct UsageError : Error {
  using Error::Error;
};

/// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG used everywhere. All draws are hand-rolled on top of the
// raw 64-bit stream so sequences are identical across platforms and stdlibs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x5bf03635d1a2b3c4ull)) {}

  /// Independent stream derived from (seed, tag).
  static Rng stream(std::uint64_t seed, std::uint64_t tag) {
    return Rng(splitmix64(seed) ^ splitmix64(tag * 0x9e3779b97f4a7c15ull + 1));
  }

  std::uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw UsageError("uniform_int: empty range");
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit span
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t draw;
    do {
      draw = next_u64();
    } while (draw >= limit);
    return lo + static_cast<std::int64_t>(draw % range);
  }

  /// Standard normal via Box-Muller (cosine branch only, no cached state).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  /// Normal(0, stddev) resampled until within cutoff standard deviations.
  double truncated_normal(double stddev, double cutoff = 2.0) {
    double z = normal();
    while (std::abs(z) > cutoff) z = normal();
    return z * stddev;
  }

 private:
  std::uint64_t state_;
};

}  // namespace albert
