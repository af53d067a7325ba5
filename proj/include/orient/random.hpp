#pragma once

#include <cstdint>
#include <random>

namespace orient {

/// Derives an independent stream seed from (seed, salt) with a SplitMix64 mix.
/// Used wherever a stage needs per-item RNG streams that agree between serial
/// and parallel execution.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
  return std::mt19937_64(seed);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t salt) {
  return std::mt19937_64(mix_seed(seed, salt));
}

}  // namespace orient
