#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "deflect/errors.hpp"

namespace deflect {

/// C×H×W reflectance cube, channel-major, with named bands.
struct MultispectralImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;
  std::vector<std::string> band_names;  // band_names[c] names channel c

  MultispectralImage() = default;
  MultispectralImage(std::size_t c, std::size_t h, std::size_t w, std::vector<std::string> bands)
      : channels(c), height(h), width(w), data(c * h * w, 0.0f), band_names(std::move(bands)) {
    validate();
  }

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }

  /// Channel index of a named band.
  std::size_t band(const std::string& name) const {
    for (std::size_t c = 0; c < band_names.size(); ++c)
      if (band_names[c] == name) return c;
    throw ConfigError("band '" + name + "' is not present in the band map");
  }

  bool has_band(const std::string& name) const {
    for (const auto& b : band_names)
      if (b == name) return true;
    return false;
  }

  void validate() const {
    if (band_names.size() != channels) {
      throw ConfigError("band map has " + std::to_string(band_names.size()) + " names for " +
                        std::to_string(channels) + " channels");
    }
    std::unordered_map<std::string, int> seen;
    for (const auto& b : band_names)
      if (seen[b]++) throw ConfigError("band '" + b + "' appears twice in the band map");
    if (data.size() != channels * height * width) throw ConfigError("image data does not match C x H x W");
    for (float v : data)
      if (!std::isfinite(v)) throw ConfigError("image contains a non-finite reflectance");
  }

  bool operator==(const MultispectralImage&) const = default;
};

/// Canonical names for the red, green and blue bands.
inline const std::vector<std::string>& rgb_band_names() {
  static const std::vector<std::string> names{"red", "green", "blue"};
  return names;
}

}  // namespace deflect
