#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "aat/tensor.hpp"

namespace aat {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; mixes a base seed with a stream tag so that
/// independent streams never share state.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : stream) h = (h ^ c) * 1099511628211ULL;
  return derive_seed(seed, h);
}

inline void fill_uniform(Tensor& t, Rng& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
}

inline void fill_normal(Tensor& t, Rng& rng, double sigma) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (double& v : t.data()) v = dist(rng);
}

/// Xavier-uniform bound for a fan_in x fan_out matrix.
inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace aat
