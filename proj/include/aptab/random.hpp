#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace aptab {

using Rng = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Counter-based seed derivation: every random stream in a run is addressed by
// (base seed, purpose, indices...), so streams never depend on how many draws
// another component made.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t k : keys) h = mix64(h ^ mix64(k));
  return h;
}

// Purpose tags for derive_seed.
enum class Stream : std::uint64_t {
  kGenerator = 1,
  kData = 2,
  kSplit = 3,
  kGates = 4,
  kAgentSlot = 5,
  kAgentReset = 6,
  kModelInit = 7,
  kEvaluation = 8,
  kLength = 9,
};

constexpr std::uint64_t key(Stream s) { return static_cast<std::uint64_t>(s); }

}  // namespace aptab
