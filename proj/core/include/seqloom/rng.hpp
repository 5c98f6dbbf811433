// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace seqloom {

// Counter-based random numbers. Every draw is a pure function of a 64-bit
// key, so streams can be replayed from (seed, name, step) without carrying
// generator state around. This is what makes dropout masks and shuffles
// identical across graph-schedule variants and across save/resume.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (splitmix64(b) + 0x9e3779b97f4a7c15ull));
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Uniform in [0, 1) with 53 random mantissa bits.
inline double u01(std::uint64_t key) {
  return static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53;
}

// Uniform in [-range, range).
inline double u_symmetric(std::uint64_t key, double range) {
  return (2.0 * u01(key) - 1.0) * range;
}

// Uniform integer in [0, n). n must be positive.
inline std::uint64_t u_below(std::uint64_t key, std::uint64_t n) {
  // 64x64 -> high 64 multiply avoids modulo bias for any n far below 2^64.
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(splitmix64(key)) * n) >> 64);
}

// A keyed stream: successive draws indexed by an internal counter.
// Copyable; replaying from the same key gives the same sequence.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : key_(key) {}
  RngStream(std::uint64_t seed, std::string_view name)
      : key_(mix64(seed, fnv1a(name))) {}

  std::uint64_t next_u64() { return splitmix64(mix64(key_, counter_++)); }
  double next_u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double next_symmetric(double range) { return (2.0 * next_u01() - 1.0) * range; }
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Seeded Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> random_permutation(std::uint64_t key, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  RngStream rng(key);
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace seqloom
