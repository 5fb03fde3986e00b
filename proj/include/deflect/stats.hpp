#pragma once

// Order statistics and moments used by the pixel-set encoder. These work on
// plain values (the encoder's raw features carry no gradient).

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deflect/errors.hpp"

namespace deflect {

enum class Statistic { mean, std_dev, min, max, q1, q3, q10, q40, q60, q90 };

inline const std::vector<Statistic>& all_statistics() {
  static const std::vector<Statistic> stats{Statistic::mean, Statistic::std_dev, Statistic::min, Statistic::max,
                                            Statistic::q1,   Statistic::q3,      Statistic::q10, Statistic::q40,
                                            Statistic::q60,  Statistic::q90};
  return stats;
}

inline std::string_view statistic_name(Statistic s) {
  switch (s) {
    case Statistic::mean: return "mean";
    case Statistic::std_dev: return "std";
    case Statistic::min: return "min";
    case Statistic::max: return "max";
    case Statistic::q1: return "q1";
    case Statistic::q3: return "q3";
    case Statistic::q10: return "q0.1";
    case Statistic::q40: return "q0.4";
    case Statistic::q60: return "q0.6";
    case Statistic::q90: return "q0.9";
  }
  return "?";
}

inline Statistic parse_statistic(std::string_view name) {
  for (auto s : all_statistics())
    if (statistic_name(s) == name) return s;
  throw ConfigError("unknown statistic '" + std::string(name) + "'");
}

/// Quantile of already-sorted values, linear interpolation between order statistics.
template <typename T>
T quantile_sorted(std::span<const T> sorted, double q) {
  if (sorted.empty()) throw PreconditionError("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const T frac = static_cast<T>(pos - static_cast<double>(lo));
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

template <typename T>
T quantile(std::vector<T> values, double q) {
  std::sort(values.begin(), values.end());
  return quantile_sorted<T>(values, q);
}

/// One statistic of a sample; std uses the population convention (divide by k).
template <typename T>
T statistic(std::span<const T> sorted, Statistic s) {
  const auto k = sorted.size();
  if (sorted.front() == sorted.back()) return s == Statistic::std_dev ? T(0) : sorted.front();
  auto mean_of = [&] {
    T acc = 0;
    for (auto v : sorted) acc += v;
    return acc / T(k);
  };
  switch (s) {
    case Statistic::mean: return mean_of();
    case Statistic::std_dev: {
      const T m = mean_of();
      T acc = 0;
      for (auto v : sorted) acc += (v - m) * (v - m);
      return std::sqrt(acc / T(k));
    }
    case Statistic::min: return sorted.front();
    case Statistic::max: return sorted.back();
    case Statistic::q1: return quantile_sorted(sorted, 0.25);
    case Statistic::q3: return quantile_sorted(sorted, 0.75);
    case Statistic::q10: return quantile_sorted(sorted, 0.1);
    case Statistic::q40: return quantile_sorted(sorted, 0.4);
    case Statistic::q60: return quantile_sorted(sorted, 0.6);
    case Statistic::q90: return quantile_sorted(sorted, 0.9);
  }
  return T(0);
}

/**
 * Column statistics of a row-major k×q matrix, concatenated index-major:
 * out[j * |stats| + s] is statistic s of column j. The output length does
 * not depend on k.
 */
template <typename T>
std::vector<T> compute_statistics(std::span<const T> values, std::size_t k, std::size_t q,
                                  const std::vector<Statistic>& stats) {
  if (k == 0) throw PreconditionError("compute_statistics: need at least one sample");
  if (values.size() != k * q) throw DimensionError("compute_statistics: value count does not match k x q");
  std::vector<T> out;
  out.reserve(q * stats.size());
  std::vector<T> column(k);
  for (std::size_t j = 0; j < q; ++j) {
    for (std::size_t i = 0; i < k; ++i) column[i] = values[i * q + j];
    std::sort(column.begin(), column.end());
    for (auto s : stats) out.push_back(statistic<T>(column, s));
  }
  return out;
}

}  // namespace deflect
