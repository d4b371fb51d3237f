#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace dia {

/// SplitMix64 finalizer (Steele, Lea, Flood 2014).
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Stable subsystem seed: mix64(seed ^ fnv1a64(name)).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return mix64(seed ^ fnv1a64(name));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(seed + (index + 1) * kGolden);
}

/// Counter-based generator. The n-th draw (n = 1, 2, ...) is
/// mix64(key + n * 0x9E3779B97F4A7C15), i.e. the SplitMix64 stream for `key`.
/// The full state is (key, counter), so any position is addressable.
///
/// uniform(): top 53 bits scaled by 2^-53, in [0, 1).
/// normal():  Box-Muller from two consecutive uniforms u1, u2:
///            sqrt(-2 ln(1 - u1)) * cos(2 pi u2). The sine branch is discarded.
class CounterRng {
 public:
  struct State {
    std::uint64_t key = 0;
    std::uint64_t counter = 0;
    bool operator==(const State&) const = default;
  };

  constexpr CounterRng() = default;
  constexpr explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0)
      : state_{key, counter} {}
  constexpr explicit CounterRng(State s) : state_(s) {}

  constexpr std::uint64_t next_u64() {
    ++state_.counter;
    return mix64(state_.key + state_.counter * kGolden);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by rejection on the top bits.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  constexpr State state() const { return state_; }
  constexpr void set_state(State s) { state_ = s; }

 private:
  State state_{};
};

}  // namespace dia
