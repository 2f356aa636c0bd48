#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>

#include "sim/error.hpp"

namespace sim {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Mix a base seed with stream coordinates (epoch, sample index, purpose tag)
// so augmentation workers can draw from independent streams without sharing
// mutable state.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t s = splitmix64(base);
  s = splitmix64(s ^ (a * 0xd1342543de82ef95ULL));
  s = splitmix64(s ^ (b * 0xaf251af3b0f025b5ULL));
  s = splitmix64(s ^ (c * 0x9e6c63d0976a0c2dULL));
  return s;
}

// xoshiro-free counter-based generator: all draws are pure functions of the
// internal 64-bit state, so a serialized Rng resumes bit-exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0x853c49e6748fea9bULL) : state_(splitmix64(seed)) {}

  uint64_t next_u64() {
    state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
    return splitmix64(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  uint64_t bounded(uint64_t n) {
    SIM_CHECK(n > 0, "Rng::bounded requires n > 0");
    uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller without caching; two draws per sample keeps the state
  // trajectory independent of call parity.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::string serialize() const {
    std::ostringstream oss;
    oss << state_;
    return oss.str();
  }

  static Rng deserialize(const std::string& s) {
    Rng r;
    std::istringstream iss(s);
    SIM_CHECK(static_cast<bool>(iss >> r.state_), "invalid Rng state string '" << s << "'");
    return r;
  }

 private:
  uint64_t state_;
};

}  // namespace sim
