#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>

namespace jmvar {

using Engine = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a master seed and a path of
/// stream keys, e.g. (seed, replicate, chain). Distinct paths give
/// statistically independent mt19937_64 streams.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t s = mix64(master);
  for (auto k : keys) s = mix64(s ^ mix64(k + 0x632be59bd9b4e019ULL));
  return s;
}

inline Engine make_engine(std::uint64_t master, std::initializer_list<std::uint64_t> keys) {
  return Engine(derive_seed(master, keys));
}

inline double std_normal(Engine& eng) {
  boost::random::normal_distribution<double> dist(0.0, 1.0);
  return dist(eng);
}

/// Uniform draw on the open interval (0, 1).
inline double uniform_open(Engine& eng) {
  boost::random::uniform_01<double> dist;
  double u = 0.0;
  do {
    u = dist(eng);
  } while (u <= 0.0);
  return u;
}

}  // namespace jmvar
