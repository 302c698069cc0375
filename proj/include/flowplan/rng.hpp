// Deterministic random number generation.
//
// std::mt19937 is portable but the standard <random> distributions are not
// (their algorithms are implementation-defined), so every draw here is spelled
// out explicitly. Bit-reproducibility of datasets, training and sampling
// across runs and worker counts hinges on this file.
#pragma once

#include <cmath>
#include <cstdint>

#include "flowplan/common.hpp"

namespace flowplan {

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t s = a;
  uint64_t h = splitmix64(s) ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  uint64_t t = h;
  return splitmix64(t);
}
}  // namespace detail

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // Warm up once so seed 0 and seed-near-0 streams decorrelate.
    detail::splitmix64(state_);
  }

  // Independent substream keyed by (seed, a, b). Used to give every problem,
  // batch sample and trajectory seed its own stream regardless of scheduling.
  static Rng stream(uint64_t seed, uint64_t a, uint64_t b = 0) {
    return Rng(detail::mix(detail::mix(seed, a), b));
  }

  uint64_t next_u64() { return detail::splitmix64(state_); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw InputError("uniform_int: empty range");
    const uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  // Standard normal via Box-Muller; the cached second value keeps the cost at
  // one transcendental pair per two draws while staying fully deterministic.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    cached_ = r * std::sin(2.0 * kPi * u2);
    have_cached_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  float normalf() { return static_cast<float>(normal()); }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace flowplan
