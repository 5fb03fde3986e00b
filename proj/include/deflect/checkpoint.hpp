#pragma once

// DFLT checkpoints.
//
// "DFLT", u32 version, u32 config length + config text, u8 scope
// (0 full, 1 adapter), u32 tensor count, then per tensor: u16 name length +
// name, u8 group, u8 kind, u8 bytes per value (4 or 8), u8 rank, u32 dims,
// raw little-endian values. A trailing u64 FNV-1a checksum covers every
// preceding byte.

#include <cstdint>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/io.hpp"
#include "deflect/params.hpp"

namespace deflect {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointScope : std::uint8_t { full = 0, adapter = 1 };

struct CheckpointTensor {
  ParamSpec spec;
  std::uint8_t precision = 4;
  std::vector<double> values;  // widened; the on-disk precision is preserved on rewrite
};

struct Checkpoint {
  std::string config;
  CheckpointScope scope = CheckpointScope::full;
  std::vector<CheckpointTensor> tensors;

  bool operator==(const Checkpoint& o) const {
    if (config != o.config || scope != o.scope || tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto &a = tensors[i], &b = o.tensors[i];
      if (a.spec.name != b.spec.name || a.spec.shape != b.spec.shape || a.spec.group != b.spec.group ||
          a.spec.kind != b.spec.kind || a.precision != b.precision || a.values != b.values) {
        return false;
      }
    }
    return true;
  }
};

/// Snapshot of a parameter set; the adapter scope keeps theta_A and phi only.
template <typename T>
Checkpoint make_checkpoint(const ParameterSet<T>& ps, CheckpointScope scope, std::string config) {
  Checkpoint ck;
  ck.config = std::move(config);
  ck.scope = scope;
  for (const auto& e : ps.entries()) {
    if (scope == CheckpointScope::adapter && e.spec.group == ParamGroup::pretrained) continue;
    ck.tensors.push_back({e.spec, sizeof(T), {e.tensor.data().begin(), e.tensor.data().end()}});
  }
  return ck;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.str("DFLT");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.config.size()));
  w.str(ck.config);
  w.u8(static_cast<std::uint8_t>(ck.scope));
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (t.precision != 4 && t.precision != 8) throw ConfigError("checkpoint precision must be 4 or 8 bytes");
    if (t.values.size() != t.spec.count()) throw IntegrityError("tensor '" + t.spec.name + "' size mismatch");
    w.u16(static_cast<std::uint16_t>(t.spec.name.size()));
    w.str(t.spec.name);
    w.u8(static_cast<std::uint8_t>(t.spec.group));
    w.u8(static_cast<std::uint8_t>(t.spec.kind));
    w.u8(t.precision);
    w.u8(static_cast<std::uint8_t>(t.spec.shape.size()));
    for (auto d : t.spec.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values) {
      if (t.precision == 4) w.f32(static_cast<float>(v));
      else w.f64(v);
    }
  }
  const auto& buf = w.buffer();
  w.u64(fnv1a(buf.data(), buf.size()));
  return w.buffer();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "DFLT") {
  if (bytes.size() < 12) throw FormatError(what + ": truncated at byte offset 0: file holds " +
                                           std::to_string(bytes.size()) + " bytes");
  if (std::string(bytes.begin(), bytes.begin() + 4) != "DFLT") throw FormatError(what + ": bad magic at byte offset 0");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (std::size_t i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (fnv1a(bytes.data(), body) != stored) throw IntegrityError(what + ": checksum mismatch");

  const std::vector<std::uint8_t> payload(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(body));
  ByteReader r(payload, what);
  r.str(4, "magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version), 4);
  Checkpoint ck;
  ck.config = r.str(r.u32("config length"), "config");
  const auto scope_at = r.offset();
  const auto scope = r.u8("scope");
  if (scope > 1) r.fail("unknown scope " + std::to_string(scope), scope_at);
  ck.scope = static_cast<CheckpointScope>(scope);
  const auto count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.spec.name = r.str(r.u16("name length"), "name");
    const auto at = r.offset();
    const auto group = r.u8("group"), kind = r.u8("kind");
    t.precision = r.u8("precision");
    if (group > 2 || kind > 4 || (t.precision != 4 && t.precision != 8)) r.fail("bad tensor header", at);
    t.spec.group = static_cast<ParamGroup>(group);
    t.spec.kind = static_cast<ParamKind>(kind);
    const auto rank = r.u8("rank");
    for (std::uint8_t d = 0; d < rank; ++d) t.spec.shape.push_back(r.u32("dimension"));
    const std::size_t n = t.spec.count();
    r.need(n * t.precision, "tensor '" + t.spec.name + "' values");
    t.values.resize(n);
    for (auto& v : t.values) v = t.precision == 4 ? static_cast<double>(r.f32("value")) : r.f64("value");
    ck.tensors.push_back(std::move(t));
  }
  if (r.remaining()) r.fail(std::to_string(r.remaining()) + " trailing bytes", r.offset());
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

/**
 * Copies checkpoint values into `ps`. Every checkpoint tensor must exist with
 * the same shape and group, and every parameter the scope covers must be present.
 */
template <typename T>
void restore_checkpoint(const Checkpoint& ck, ParameterSet<T>& ps) {
  std::size_t expected = 0;
  for (const auto& e : ps.entries())
    if (ck.scope == CheckpointScope::full || e.spec.group != ParamGroup::pretrained) ++expected;
  if (expected != ck.tensors.size()) {
    throw IntegrityError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, the model expects " +
                         std::to_string(expected));
  }
  for (const auto& t : ck.tensors) {
    if (!ps.contains(t.spec.name)) throw IntegrityError("checkpoint tensor '" + t.spec.name + "' is unknown to the model");
    const auto& e = ps.entry(t.spec.name);
    if (e.spec.shape != t.spec.shape || e.spec.group != t.spec.group) {
      throw IntegrityError("checkpoint tensor '" + t.spec.name + "' has shape " + shape_str(t.spec.shape) +
                           " but the model expects " + shape_str(e.spec.shape));
    }
    auto dst = e.tensor;
    for (std::size_t i = 0; i < t.values.size(); ++i) dst.data()[i] = static_cast<T>(t.values[i]);
  }
}

}  // namespace deflect
