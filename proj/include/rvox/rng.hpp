#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace rvox {

// Deterministic 64-bit generator (splitmix64). Every seeded operation in the
// project goes through this engine rather than <random> distributions, so
// outputs are identical across standard libraries and runs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Unbiased draw in [0, n) by rejection. n <= 1 consumes no randomness.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t rem = (max % n + 1) % n;  // 2^64 mod n
    std::uint64_t x = next_u64();
    while (rem != 0 && x >= max - rem + 1) x = next_u64();
    return x % n;
  }

  // [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal, Box-Muller without a cached spare: exactly two draws
  // per call, so the stream position is a pure function of the call count.
  double normal() {
    constexpr double two_pi = 6.283185307179586476925286766559;
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // Derives an independent stream seed from (seed, stream). Draw counts on
  // one stream never perturb another stream.
  static std::uint64_t split(std::uint64_t seed, std::uint64_t stream) {
    Rng r(seed + 0x9e3779b97f4a7c15ull * (stream + 1));
    return r.next_u64();
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace rvox
