#pragma once

#include <cstdint>
#include <string_view>

namespace contraseq {

// All randomness in the project flows from one user seed through named
// sub-streams, so that changing e.g. the dropout draw count never perturbs
// parameter initialization. Streams are derived by hashing the seed with a
// stream name and optional indices; the generator itself is splitmix64,
// which is tiny, fast to seed, and identical on every platform.

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t s = seed ^ (salt + 0x9E3779B97F4A7C15ull + (seed << 6) + (seed >> 2));
  return splitmix64(s);
}

class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(seed) {
    // Warm up so that small seeds do not produce correlated first draws.
    splitmix64(state_);
  }
  RngStream(uint64_t seed, std::string_view name) : RngStream(mix_seed(seed, fnv1a64(name))) {}
  RngStream(uint64_t seed, std::string_view name, uint64_t index)
      : RngStream(mix_seed(mix_seed(seed, fnv1a64(name)), index)) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n). Rejection sampling keeps the draw unbiased.
  uint64_t next_below(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = ~0ull - ~0ull % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Uniform in [lo, hi] inclusive.
  int64_t next_range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(next_below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Uniform in [-bound, bound).
  double next_symmetric(double bound) { return (2.0 * next_double() - 1.0) * bound; }

 private:
  uint64_t state_;
};

}  // namespace contraseq
