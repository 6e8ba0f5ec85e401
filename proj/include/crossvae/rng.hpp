#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

// Seeded randomness helpers. Everything here is a pure function of the engine
// state so that runs are bit-reproducible and checkpoints can resume exactly
// (std::shuffle and std::normal_distribution are implementation-defined, so we
// roll our own draws on top of the fully specified mt19937_64).

namespace crossvae::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream seed for a named purpose under one master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream_tag) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream_tag));
}

// Uniform double in [0, 1) with 53 random bits.
inline double next_unit(std::mt19937_64& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Unbiased uniform integer in [0, bound) via bitmask rejection.
inline std::uint64_t uniform_below(std::mt19937_64& eng, std::uint64_t bound) {
  if (bound <= 1) return 0;
  std::uint64_t mask = bound - 1;
  mask |= mask >> 1;
  mask |= mask >> 2;
  mask |= mask >> 4;
  mask |= mask >> 8;
  mask |= mask >> 16;
  mask |= mask >> 32;
  for (;;) {
    const std::uint64_t r = eng() & mask;
    if (r < bound) return r;
  }
}

// Standard normal draw, Box-Muller without caching: two engine draws per
// sample, no hidden state beyond the engine itself (keeps checkpoints exact).
inline double gaussian(std::mt19937_64& eng) {
  const double u1 = 1.0 - next_unit(eng);  // (0, 1]
  const double u2 = next_unit(eng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double normal(std::mt19937_64& eng, double mu, double sigma) {
  return mu + sigma * gaussian(eng);
}

inline void fill_normal(std::mt19937_64& eng, std::vector<double>& out, double mu, double sigma) {
  for (double& v : out) v = normal(eng, mu, sigma);
}

// Fisher-Yates permutation of 0..n-1.
inline std::vector<int> shuffled_indices(std::size_t n, std::mt19937_64& eng) {
  std::vector<int> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_below(eng, i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace crossvae::rng
