#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lfme {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent sub-seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic child seed for a named stream (e.g. "target", "batches").
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the stream name
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return mix64(mix64(seed ^ h) + index);
}

}  // namespace lfme
