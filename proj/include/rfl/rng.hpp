#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace rfl {

// Deterministic, platform-independent PRNG (splitmix64 core). The standard
// library distributions are not bit-stable across implementations, so all
// sampling used for initialization and data generation goes through this.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal, Box-Muller. Two draws per value, no cached half.
  double normal() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n). Multiply-shift mapping of a full 64-bit draw.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }
};

// Sub-seed derivation: every consumer of randomness names its role so adding
// or removing one consumer never shifts another's stream.
inline uint64_t derive_seed(uint64_t master, std::string_view role) {
  uint64_t h = 1469598103934665603ULL ^ master;
  for (unsigned char c : role) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  Rng mix(h);
  return mix.next_u64();
}

}  // namespace rfl
