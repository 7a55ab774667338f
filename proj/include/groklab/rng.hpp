#pragma once

// Seedable, cross-platform PRNG used by every builder in the project.
//
// The generator is PCG32 (XSH-RR output, 64-bit LCG state, O'Neill 2014).
// Integer draws use bounded rejection so the stream of values depends only on
// (seed, stream) and never on the standard library implementation. Named
// sub-streams are derived with SplitMix64 over an FNV-1a hash of the tag.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace groklab {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Derives an independent seed for a named purpose ("attr_kb", "split", ...).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                    std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ fnv1a64(tag)) + index);
}

class Pcg32 {
 public:
  explicit Pcg32(std::uint64_t seed = 0x853C49E6748FEA9BULL,
                 std::uint64_t stream = 0xDA3E39CB94B95BDBULL) {
    state_ = 0;
    inc_ = (stream << 1U) | 1U;
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18U) ^ old) >> 27U);
    const auto rot = static_cast<std::uint32_t>(old >> 59U);
    return (xorshifted >> rot) | (xorshifted << ((32U - rot) & 31U));
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32U) | next_u32();
  }

  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t uniform(std::uint64_t bound) {
    if (bound <= 0xFFFFFFFFULL) {
      const auto b = static_cast<std::uint32_t>(bound);
      const std::uint32_t threshold = (0U - b) % b;
      for (;;) {
        const std::uint32_t r = next_u32();
        if (r >= threshold) return r % b;
      }
    }
    const std::uint64_t threshold = (0ULL - bound) % bound;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

  /// Uniform integer in the closed interval [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(
                    uniform(static_cast<std::uint64_t>(hi - lo) + 1ULL));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11U) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (one draw per call, no cached pair).
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool coin() { return (next_u32() & 1U) != 0U; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
};

inline Pcg32 make_rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
  return Pcg32(derive_seed(seed, tag, index), derive_seed(seed, tag, index + 0x5BD1E995ULL));
}

}  // namespace groklab
