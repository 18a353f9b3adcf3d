#pragma once

// Seeded, platform-stable randomness. The standard distributions are
// implementation-defined, so shuffles, uniforms and normals are derived here
// from a splitmix64 counter stream to keep splits and initializations
// identical across compilers and machines.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace domainshift {

constexpr std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ULL;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// FNV-1a, used to fold names into stream keys.
constexpr std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Combine key parts order-sensitively: derive_key(s, a, b) != derive_key(s, b, a).
constexpr std::uint64_t derive_key(std::uint64_t seed) { return mix64(seed); }

template <typename... Rest>
constexpr std::uint64_t derive_key(std::uint64_t seed, std::uint64_t part, Rest... rest) {
  return derive_key(mix64(seed + kGoldenGamma) ^ mix64(part ^ 0x632be59bd9b4e019ULL),
                    static_cast<std::uint64_t>(rest)...);
}

/// Counter-based generator: the i-th draw is mix64(key + (i + 1) * gamma), so a
/// stream is fully determined by its key and the number of draws taken.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t key) : key_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  constexpr result_type operator()() {
    ++counter_;
    return mix64(key_ + counter_ * kGoldenGamma);
  }

  constexpr std::uint64_t key() const { return key_; }
  constexpr std::uint64_t draws() const { return counter_; }

  /// Uniform integer in [0, bound) without modulo bias.
  constexpr std::uint64_t below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t threshold = (~bound + 1) % bound;  // 2^64 mod bound
    for (;;) {
      const std::uint64_t r = (*this)();
      if (r >= threshold) return r % bound;
    }
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (one value per two uniforms).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates shuffle driven by a CounterRng.
template <typename T>
void shuffle(std::span<T> items, CounterRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace domainshift
