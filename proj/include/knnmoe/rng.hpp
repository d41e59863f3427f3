#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "knnmoe/common.hpp"

namespace knnmoe {

// Deterministic RNG. Raw mt19937_64 output is pinned by the standard; the
// distributions here are hand-rolled because std:: distribution algorithms
// are implementation-defined and would break cross-toolchain reproducibility.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double real01() { return double(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased via rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) fail("rng: below(0)");
    for (;;) {
      uint64_t x = next();
      uint64_t r = x % n;
      if (x - r <= uint64_t(0) - n) return r;
    }
  }

  int below_int(int n) { return int(below(uint64_t(n))); }

  // Standard normal via Box-Muller; consumes two uniforms per pair.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = real01();
    } while (u1 <= 0.0);
    double u2 = real01();
    double m = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = m * std::sin(a);
    has_spare_ = true;
    return m * std::cos(a);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace knnmoe
