#pragma once

// MSI1 image files and LBL1 label maps.
//
// MSI1: "MSI1", u32 C, u32 H, u32 W, C × (u16 length + UTF-8 band name),
// then C H W little-endian f32 reflectances, channel-major.
// LBL1: "LBL1", u32 H, u32 W, then H W u8 class ids (255 = unlabelled).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/image.hpp"
#include "deflect/io.hpp"

namespace deflect {

inline std::vector<std::uint8_t> encode_msi(const MultispectralImage& img) {
  img.validate();
  ByteWriter w;
  w.str("MSI1");
  w.u32(static_cast<std::uint32_t>(img.channels));
  w.u32(static_cast<std::uint32_t>(img.height));
  w.u32(static_cast<std::uint32_t>(img.width));
  for (const auto& name : img.band_names) {
    if (name.size() > 0xffff) throw ConfigError("band name longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
  }
  for (float v : img.data) w.f32(v);
  return w.buffer();
}

inline MultispectralImage decode_msi(const std::vector<std::uint8_t>& bytes, const std::string& what = "MSI") {
  ByteReader r(bytes, what);
  const auto magic = r.str(4, "magic");
  if (magic.substr(0, 3) != "MSI") r.fail("bad magic '" + magic + "'", 0);
  if (magic[3] != '1') r.fail("unsupported MSI version '" + std::string(1, magic[3]) + "'", 3);
  MultispectralImage img;
  img.channels = r.u32("channel count");
  img.height = r.u32("height");
  img.width = r.u32("width");
  if (img.channels == 0) r.fail("zero channels", 4);
  for (std::size_t c = 0; c < img.channels; ++c) {
    const auto len = r.u16("band name length");
    img.band_names.push_back(r.str(len, "band name"));
  }
  const std::size_t count = img.channels * img.height * img.width;
  r.need(count * 4, "reflectance payload");
  img.data.resize(count);
  for (auto& v : img.data) v = r.f32("reflectance");
  if (r.remaining()) r.fail(std::to_string(r.remaining()) + " trailing bytes", r.offset());
  try {
    img.validate();
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  return img;
}

inline void write_msi(const std::filesystem::path& path, const MultispectralImage& img) {
  write_file_atomic(path, encode_msi(img));
}

inline MultispectralImage read_msi(const std::filesystem::path& path) { return decode_msi(read_file(path), path.string()); }

struct LabelMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> labels;  // row-major

  bool operator==(const LabelMap&) const = default;
};

inline std::vector<std::uint8_t> encode_labels(const LabelMap& m) {
  if (m.labels.size() != m.height * m.width) throw ConfigError("label map size does not match H x W");
  ByteWriter w;
  w.str("LBL1");
  w.u32(static_cast<std::uint32_t>(m.height));
  w.u32(static_cast<std::uint32_t>(m.width));
  w.bytes(m.labels.data(), m.labels.size());
  return w.buffer();
}

inline LabelMap decode_labels(const std::vector<std::uint8_t>& bytes, const std::string& what = "LBL") {
  ByteReader r(bytes, what);
  const auto magic = r.str(4, "magic");
  if (magic != "LBL1") r.fail("bad magic '" + magic + "'", 0);
  LabelMap m;
  m.height = r.u32("height");
  m.width = r.u32("width");
  r.need(m.height * m.width, "label payload");
  m.labels.resize(m.height * m.width);
  for (auto& v : m.labels) v = r.u8("label");
  if (r.remaining()) r.fail(std::to_string(r.remaining()) + " trailing bytes", r.offset());
  return m;
}

inline void write_labels(const std::filesystem::path& path, const LabelMap& m) {
  write_file_atomic(path, encode_labels(m));
}

inline LabelMap read_labels(const std::filesystem::path& path) { return decode_labels(read_file(path), path.string()); }

}  // namespace deflect
