#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace stydesty {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer. Used to derive independent stream seeds from a run
/// seed and a sequence of indices (iteration, batch, sample, ...).
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = mix64(seed);
  for (auto id : ids) h = mix64(h ^ mix64(id + 0x632be59bd9b4e019ULL));
  return h;
}

// Stream tags so that different consumers of one run seed never collide.
enum class Stream : std::uint64_t {
  backbone_init = 1,
  stylizer_init,
  codecs,
  mix_weights,
  gumbel,
  batches,
  head_batches,
  perceptor_init,
  formal_backbone_init,
  kernel_features,
};

inline std::uint64_t stream_seed(std::uint64_t seed, Stream s, std::uint64_t index = 0) {
  return derive_seed(seed, {static_cast<std::uint64_t>(s), index});
}

}  // namespace stydesty
