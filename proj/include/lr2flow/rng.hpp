#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "lr2flow/tensor.hpp"

namespace lr2flow {

/// Deterministic generator for a (seed, stream) pair: mt19937_64 seeded via
/// seed_seq over the four 32-bit halves. Both pieces are fully specified by
/// the C++ standard, so sequences match across conforming implementations.
class Rng {
 public:
  static constexpr const char* algorithm = "mt19937_64/seed_seq(seed_lo,seed_hi,stream_lo,stream_hi)/box-muller";

  Rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) from the top 53 bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Rng rng(std::uint64_t seed, std::uint64_t stream) { return Rng(seed, stream); }

inline Tensor randn(Shape shape, Rng& g, double stddev = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * g.normal();
  return t;
}

inline Tensor rand_uniform(Shape shape, Rng& g, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = g.uniform(lo, hi);
  return t;
}

}  // namespace lr2flow
