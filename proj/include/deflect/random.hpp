#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "deflect/tensor.hpp"

namespace deflect {

using Rng = std::mt19937_64;

/// Independent stream for (seed, stream id) pairs, e.g. (global seed, image id).
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

template <typename T>
std::vector<T> normal_values(std::size_t n, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
std::vector<T> uniform_values(std::size_t n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

/// Glorot/Xavier uniform initialisation for a fan_in × fan_out matrix.
template <typename T>
std::vector<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_values<T>(fan_in * fan_out, -bound, bound, rng);
}

}  // namespace deflect
