// Seed derivation. Every random stream in the project is a pure function of
// the master seed and a tuple of integers naming the stream, so work can be
// split or resumed without carrying generator state around.
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace bridgepath {

enum class Stream : std::uint64_t {
  kDataOrder = 1,
  kPaths = 2,
  kDropout = 3,
  kTriplets = 4,
  kDecode = 5,
  kInit = 6,
  kSynth = 7,
  kSplit = 8,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// hash(master, stream, ids...) folded through splitmix64.
inline std::uint64_t derive_seed(std::uint64_t master, Stream stream,
                                 std::initializer_list<std::uint64_t> ids = {}) {
  std::uint64_t h = splitmix64(master ^ splitmix64(static_cast<std::uint64_t>(stream)));
  for (const auto id : ids) h = splitmix64(h ^ splitmix64(id + 0x632be59bd9b4e019ULL));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t master, Stream stream, std::initializer_list<std::uint64_t> ids = {}) {
  return Rng(derive_seed(master, stream, ids));
}

}  // namespace bridgepath
