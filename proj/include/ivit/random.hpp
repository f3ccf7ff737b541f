#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ivit {

using Rng = std::mt19937_64;

/// splitmix64 finalizer, used to decorrelate derived stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Independent stream for a named consumer. Two tensors with different names
/// never share draws, so adding or removing one tensor leaves the rest intact.
inline Rng stream(std::uint64_t seed, std::string_view tag) {
  return Rng(mix_seed(seed ^ mix_seed(fnv1a(tag))));
}

inline Rng stream(std::uint64_t seed, std::uint64_t index) {
  return Rng(mix_seed(seed ^ mix_seed(index + 0x51ed27ULL)));
}

}  // namespace ivit
