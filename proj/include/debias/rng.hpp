#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace debias {

// splitmix64 finalizer. Good avalanche, cheap, stable across platforms.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a over a string literal, used to tag derived RNG streams.
inline constexpr std::uint64_t stream_tag(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (; *s; ++s) h = (h ^ static_cast<std::uint64_t>(*s)) * 0x100000001b3ULL;
  return h;
}

inline constexpr std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return mix64(h + 0x9e3779b97f4a7c15ULL + v);
}

// Deterministic PRNG (splitmix64 sequence). Independent streams are derived
// by hashing a seed with a stream tag and indices, so per-sample generation
// order never couples samples.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  template <typename... Parts>
  static Rng derive(std::uint64_t seed, Parts... parts) {
    std::uint64_t h = mix64(seed ^ 0x6a09e667f3bcc909ULL);
    ((h = hash_combine(h, static_cast<std::uint64_t>(parts))), ...);
    return Rng(h);
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

  // Uniform in [0,1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform index in [0,n). Lemire multiply-shift; bias is O(n/2^64).
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Standard normal via Box-Muller; one spare kept between calls.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform01();  // (0,1]
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace debias
