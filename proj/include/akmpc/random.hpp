#pragma once

#include <cstdint>
#include <random>

namespace akmpc {

/// Seeded random stream. Passed explicitly by reference, never shared between threads.
using Rng = std::mt19937_64;

/// splitmix64 finalizer, used to derive independent sub-seeds from a master seed.
constexpr std::uint64_t mix_seed(std::uint64_t x)
{
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stream derived from (seed, tag); distinct tags give statistically independent streams.
inline Rng substream(std::uint64_t seed, std::uint64_t tag)
{
  return Rng(mix_seed(seed ^ mix_seed(tag + 0x51ed270b27ULL)));
}

inline double uniform(Rng & rng, double lo, double hi)
{
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double gaussian(Rng & rng, double stddev = 1.0)
{
  return std::normal_distribution<double>(0.0, stddev)(rng);
}

}  // namespace akmpc
