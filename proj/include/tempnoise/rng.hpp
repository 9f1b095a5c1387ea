#pragma once

#include <cstdint>
#include <algorithm>
#include <random>
#include <span>
#include <utility>

namespace tempnoise {

/// The single generator type threaded through every stochastic operation.
using Rng = std::mt19937_64;

inline constexpr std::uint64_t kDefaultSeed = 0;

/// splitmix64 finalizer; mixes a parent seed with a stream index so that
/// (seed, index) pairs give statistically independent generators.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(derive_seed(seed, stream)); }

/// Uniform double in [0, 1) from the top 53 bits; independent of the
/// standard library's distribution implementations.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Fisher-Yates shuffle driven by uniform01, so results do not depend on
/// the standard library's shuffle.
template <class T>
void shuffle_in_place(std::span<T> items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(items[i - 1], items[std::min(j, i - 1)]);
  }
}

}  // namespace tempnoise
