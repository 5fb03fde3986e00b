#pragma once

// Untangled patch embedding: x_P from the frozen RGB stem, x_A from
// order statistics of spectral indices over a random pixel subset of each
// patch, followed by a shared linear -> layer norm -> GELU projection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/image.hpp"
#include "deflect/ops.hpp"
#include "deflect/params.hpp"
#include "deflect/random.hpp"
#include "deflect/stats.hpp"
#include "deflect/vit.hpp"

namespace deflect {

inline constexpr double kIndexEpsilon = 1e-8;

/// (sum_i a_i band_i) / (sum_j b_j band_j), with the denominator kept at least eps away from zero.
struct SpectralIndexDef {
  std::string name;
  std::vector<std::pair<std::string, double>> numerator;
  std::vector<std::pair<std::string, double>> denominator;

  static SpectralIndexDef normalized_difference(std::string name, const std::string& a, const std::string& b) {
    return {std::move(name), {{a, 1.0}, {b, -1.0}}, {{a, 1.0}, {b, 1.0}}};
  }

  std::vector<std::string> bands() const {
    std::vector<std::string> out;
    for (const auto& [b, w] : numerator) out.push_back(b);
    for (const auto& [b, w] : denominator) out.push_back(b);
    return out;
  }

  bool operator==(const SpectralIndexDef&) const = default;
};

inline SpectralIndexDef ndvi() { return SpectralIndexDef::normalized_difference("NDVI", "nir", "red"); }
inline SpectralIndexDef ndti() { return SpectralIndexDef::normalized_difference("NDTI", "red", "green"); }

/// NDVI, NDTI, then one normalised difference against red per band beyond RGB + NIR.
inline std::vector<SpectralIndexDef> default_index_list(const std::vector<std::string>& band_names) {
  std::vector<SpectralIndexDef> out{ndvi(), ndti()};
  for (const auto& b : band_names) {
    if (b == "red" || b == "green" || b == "blue" || b == "nir") continue;
    out.push_back(SpectralIndexDef::normalized_difference("ND_" + b, b, "red"));
  }
  return out;
}

struct UpeConfig {
  double sample_fraction = 0.10;
  std::vector<SpectralIndexDef> indices;
  std::vector<Statistic> statistics = all_statistics();
  bool use_projection = true;
  std::uint64_t seed = 0;

  std::size_t raw_dim() const { return indices.size() * statistics.size(); }

  void validate() const {
    if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
      throw ConfigError("sample_fraction must lie in (0, 1], got " + std::to_string(sample_fraction));
    }
    if (indices.empty()) throw ConfigError("spectral index list is empty");
    if (statistics.empty()) throw ConfigError("statistics list is empty");
  }
};

/// ceil(fraction * pixels), at least one.
inline std::size_t sample_count(std::size_t pixels, double fraction) {
  const double raw = fraction * static_cast<double>(pixels);
  // 1e-9 absorbs representation error such as 0.1 * 640 = 64.00000000000001
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(k, 1, pixels);
}

/// Pixel positions (row-major within the patch) drawn uniformly without replacement.
inline std::vector<std::size_t> sample_pixel_indices(std::size_t pixels, double fraction, Rng& rng) {
  if (pixels == 0) throw PreconditionError("sample_pixel_set: patch has no pixels");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw PreconditionError("sample_pixel_set: fraction outside (0, 1]");
  std::vector<std::size_t> all(pixels);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> out;
  out.reserve(sample_count(pixels, fraction));
  std::sample(all.begin(), all.end(), std::back_inserter(out), sample_count(pixels, fraction), rng);
  return out;
}

/// Spectra (one C-vector per sampled pixel) of the p×p patch at (y0, x0).
inline std::vector<std::vector<float>> sample_pixel_set(const MultispectralImage& img, std::size_t y0, std::size_t x0,
                                                        std::size_t patch, double fraction, Rng& rng) {
  std::vector<std::vector<float>> out;
  for (auto idx : sample_pixel_indices(patch * patch, fraction, rng)) {
    const std::size_t y = y0 + idx / patch, x = x0 + idx % patch;
    std::vector<float> spectrum(img.channels);
    for (std::size_t c = 0; c < img.channels; ++c) spectrum[c] = img.at(c, y, x);
    out.push_back(std::move(spectrum));
  }
  return out;
}

namespace detail {

struct ResolvedIndex {
  std::vector<std::pair<std::size_t, double>> num, den;
};

inline std::vector<ResolvedIndex> resolve_indices(const std::vector<SpectralIndexDef>& defs,
                                                  const std::vector<std::string>& band_names) {
  auto find = [&](const std::string& band, const std::string& index) {
    for (std::size_t c = 0; c < band_names.size(); ++c)
      if (band_names[c] == band) return c;
    throw ConfigError("spectral index " + index + " references band '" + band + "' missing from the band map");
  };
  std::vector<ResolvedIndex> out;
  for (const auto& d : defs) {
    ResolvedIndex r;
    for (const auto& [b, w] : d.numerator) r.num.emplace_back(find(b, d.name), w);
    for (const auto& [b, w] : d.denominator) r.den.emplace_back(find(b, d.name), w);
    out.push_back(std::move(r));
  }
  return out;
}

inline double guarded_ratio(double num, double den) {
  if (den >= 0.0) return num / std::max(den, kIndexEpsilon);
  return num / std::min(den, -kIndexEpsilon);
}

}  // namespace detail

/// Per-pixel index values as a row-major |pixels| × |defs| matrix.
inline std::vector<double> compute_indices(const std::vector<std::vector<float>>& pixels,
                                           const std::vector<SpectralIndexDef>& defs,
                                           const std::vector<std::string>& band_names) {
  const auto resolved = detail::resolve_indices(defs, band_names);
  std::vector<double> out;
  out.reserve(pixels.size() * defs.size());
  for (const auto& px : pixels) {
    for (const auto& r : resolved) {
      double num = 0, den = 0;
      for (const auto& [c, w] : r.num) num += w * px.at(c);
      for (const auto& [c, w] : r.den) den += w * px.at(c);
      out.push_back(detail::guarded_ratio(num, den));
    }
  }
  return out;
}

/**
 * Raw spectral features of every patch, n × (|indices| |statistics|).
 * The pixel subsets are drawn from a stream derived from (cfg.seed, image_id),
 * so the result is fixed per image.
 */
inline std::vector<double> spectral_features(const MultispectralImage& img, const UpeConfig& cfg, std::size_t patch,
                                             std::uint64_t image_id) {
  cfg.validate();
  if (patch == 0 || img.height % patch || img.width % patch) {
    throw ConfigError("image is not divisible into " + std::to_string(patch) + "-pixel patches");
  }
  auto rng = derive_rng(cfg.seed, image_id);
  const std::size_t gh = img.height / patch, gw = img.width / patch;
  std::vector<double> out;
  out.reserve(gh * gw * cfg.raw_dim());
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      auto pixels = sample_pixel_set(img, gy * patch, gx * patch, patch, cfg.sample_fraction, rng);
      auto values = compute_indices(pixels, cfg.indices, img.band_names);
      auto stats = compute_statistics<double>(values, pixels.size(), cfg.indices.size(), cfg.statistics);
      out.insert(out.end(), stats.begin(), stats.end());
    }
  return out;
}

/// Shared linear -> layer norm -> GELU map from raw statistics to the embedding width.
template <typename T>
struct SpectralProjection {
  bool enabled = true;
  Linear<T> proj;
  Norm<T> norm;
};

inline std::vector<ParamSpec> projection_layout(std::size_t raw_dim, std::size_t embed_dim, bool use_projection,
                                                ParamGroup group = ParamGroup::adapter) {
  if (!use_projection) {
    if (raw_dim != embed_dim) {
      throw ConfigError("without a projection the raw spectral dimension (" + std::to_string(raw_dim) +
                        ") must equal embed_dim (" + std::to_string(embed_dim) + ")");
    }
    return {};
  }
  return {{"upe.proj.weight", {raw_dim, embed_dim}, ParamKind::weight, group},
          {"upe.proj.bias", {embed_dim}, ParamKind::bias, group},
          {"upe.norm.gain", {embed_dim}, ParamKind::norm_gain, group},
          {"upe.norm.bias", {embed_dim}, ParamKind::norm_bias, group}};
}

/// Xavier-initialised projection weight, zero bias, identity layer norm.
template <typename T>
SpectralProjection<T> make_projection(ParameterSet<T>& ps, std::size_t raw_dim, std::size_t embed_dim,
                                      bool use_projection, Rng& rng) {
  SpectralProjection<T> p;
  p.enabled = use_projection;
  for (auto& spec : projection_layout(raw_dim, embed_dim, use_projection)) {
    std::vector<T> values;
    if (spec.kind == ParamKind::weight) {
      values = xavier_uniform<T>(spec.shape[0], spec.shape[1], rng);
    } else {
      values.assign(spec.count(), spec.kind == ParamKind::norm_gain ? T(1) : T(0));
    }
    ps.add(std::move(spec), std::move(values));
  }
  if (use_projection) {
    p.proj = bind_linear(ps, "upe.proj");
    p.norm = bind_norm(ps, "upe.norm");
  }
  return p;
}

template <typename T>
Tensor<T> project_spectral(const Tensor<T>& raw, const SpectralProjection<T>& p) {
  if (!p.enabled) return raw;
  return gelu(apply_norm(linear(raw, p.proj), p.norm));
}

template <typename T>
struct EmbeddingPair {
  Tensor<T> x_p;  // n × d, RGB stem
  Tensor<T> x_a;  // n × d, spectral
};

template <typename T>
Tensor<T> raw_spectral_tensor(const MultispectralImage& img, const UpeConfig& cfg, std::size_t patch,
                              std::uint64_t image_id) {
  auto raw = spectral_features(img, cfg, patch, image_id);
  const std::size_t n = raw.size() / cfg.raw_dim();
  return Tensor<T>({n, cfg.raw_dim()}, std::vector<T>(raw.begin(), raw.end()));
}

template <typename T>
EmbeddingPair<T> untangled_patch_embed(const MultispectralImage& img, const Encoder<T>& rgb_stem, const UpeConfig& cfg,
                                       const SpectralProjection<T>& projection, std::uint64_t image_id) {
  auto x_p = patch_embed_rgb(img, rgb_stem);
  auto x_a = project_spectral(raw_spectral_tensor<T>(img, cfg, rgb_stem.cfg.patch_size, image_id), projection);
  if (x_a.shape() != x_p.shape()) {
    throw DimensionError("spectral embedding " + shape_str(x_a.shape()) + " does not align with RGB embedding " +
                         shape_str(x_p.shape()));
  }
  return {x_p, x_a};
}

}  // namespace deflect
