#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace xdvae {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Named sub-seed. Every random stream in the toolkit (init, shuffle, eps,
/// negatives, splits) is derived from the run seed through this, so two
/// protocols asking for the same stream name see the same numbers.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  return splitmix64(seed ^ splitmix64(fnv1a64(stream)));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
  return splitmix64(derive_seed(seed, stream) + splitmix64(index + 1));
}

inline Rng make_rng(std::uint64_t seed, std::string_view stream) { return Rng(derive_seed(seed, stream)); }

inline Rng make_rng(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
  return Rng(derive_seed(seed, stream, index));
}

}  // namespace xdvae
