#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace lens {

// Deterministic RNG used everywhere. std::mt19937_64 for the raw stream, but
// all integer/real draws go through the helpers below so results do not
// depend on libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix(seed)) {}

  uint64_t next() {
    // xorshift*: small, fast, reproducible.
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, n). Rejection sampling to avoid modulo bias.
  uint64_t below(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next();
    while (v >= limit) v = next();
    return v % n;
  }

  int index(int n) { return static_cast<int>(below(static_cast<uint64_t>(n))); }

  // Uniform double in [0, 1).
  double real() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform double in [lo, hi).
  double real(double lo, double hi) { return lo + (hi - lo) * real(); }

  bool coin() { return (next() & 1u) != 0; }

  // Standard normal via Box-Muller (no cached spare; keeps state minimal).
  double normal() {
    double u1 = real();
    while (u1 <= 0.0) u1 = real();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586 * real());
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent child stream from (seed, tag). Used to give every
  // task its own stream so concurrency never reorders draws.
  static Rng derive(uint64_t seed, std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return Rng(splitmix(seed ^ h));
  }

 private:
  static uint64_t splitmix(uint64_t x) {
    x += 0x9E3779B97f4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return (x ^ (x >> 31)) | 1u;  // never zero
  }

  uint64_t state_;
};

}  // namespace lens
