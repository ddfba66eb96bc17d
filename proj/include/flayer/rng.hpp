#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace flayer {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed of a named substream ("partition", "init", "sampling", "batching", ...)
/// of a master seed, optionally keyed by (round, client). Parallel execution
/// order never influences the value.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(master ^ fnv1a64(stream));
  h = splitmix64(h ^ (a * 0x9e3779b97f4a7c15ULL));
  return splitmix64(h ^ (b * 0xc2b2ae3d27d4eb4fULL));
}

}  // namespace flayer
