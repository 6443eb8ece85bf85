#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

namespace flipguard {

// =====================================================================
//  Deterministic PRNG used everywhere randomness is needed.
//
//  Generator: xoshiro256** (Blackman & Vigna), a 64-bit xorshift-family
//  generator with fixed constants, seeded through SplitMix64 so that any
//  64-bit seed yields a well-mixed state. All draws below are pure
//  functions of the seed; no global state.
// =====================================================================

struct SplitMix64 {
  std::uint64_t state;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
};

// Folds an ordered list of components (seed, sample index, restart, ...)
// into one stream seed. Order-sensitive on purpose.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t acc = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t p : parts) {
    SplitMix64 sm(acc ^ p);
    acc = sm.next();
  }
  return acc;
}

class Xoshiro256 {
 public:
  explicit Xoshiro256(std::uint64_t seed) {
    SplitMix64 sm(seed);
    for (auto& w : s_) w = sm.next();
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1) with full 53-bit resolution.
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t bound = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next();
    while (v >= bound) v = next();
    return v % n;
  }

  // Box-Muller; one fresh pair of uniforms per call, cos branch only.
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::uint64_t s_[4];
};

// In-place Fisher-Yates; identical permutation for identical seeds.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

inline std::vector<std::size_t> seeded_permutation(std::size_t n,
                                                   std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  seeded_shuffle(p, seed);
  return p;
}

// FNV-1a over raw bytes; identity hashing for datasets and checkpoints.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace flipguard
