#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/tensor.hpp"

namespace deflect {

enum class ParamKind { weight, bias, norm_gain, norm_bias, embedding };

/// theta_P (frozen pretrained), theta_A (trainable encoder additions/updates), phi (task head).
enum class ParamGroup { pretrained, adapter, head };

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::pretrained: return "theta_P";
    case ParamGroup::adapter: return "theta_A";
    case ParamGroup::head: return "phi";
  }
  return "?";
}

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind = ParamKind::weight;
  ParamGroup group = ParamGroup::pretrained;

  std::size_t count() const { return numel(shape); }
};

struct ParameterCount {
  std::size_t theta_p = 0;
  std::size_t theta_a = 0;
  std::size_t phi = 0;

  /// Trainable share of the encoder; the task head is excluded.
  double tuned_fraction() const {
    const auto encoder = theta_p + theta_a;
    return encoder ? static_cast<double>(theta_a) / static_cast<double>(encoder) : 0.0;
  }
};

/// Counts a layout without allocating it. Duplicate names mean an overlapping partition.
inline ParameterCount count_parameters(const std::vector<ParamSpec>& layout) {
  ParameterCount c;
  std::unordered_map<std::string, ParamGroup> seen;
  for (const auto& s : layout) {
    if (!seen.emplace(s.name, s.group).second) {
      throw IntegrityError("parameter '" + s.name + "' assigned more than once in the partition");
    }
    switch (s.group) {
      case ParamGroup::pretrained: c.theta_p += s.count(); break;
      case ParamGroup::adapter: c.theta_a += s.count(); break;
      case ParamGroup::head: c.phi += s.count(); break;
    }
  }
  return c;
}

/// Ordered, named collection of parameter tensors with their partition group.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    ParamSpec spec;
    Tensor<T> tensor;
  };

  Tensor<T> add(ParamSpec spec, std::vector<T> values) {
    if (index_.contains(spec.name)) throw IntegrityError("duplicate parameter '" + spec.name + "'");
    Tensor<T> t(spec.shape, std::move(values), spec.group != ParamGroup::pretrained);
    index_.emplace(spec.name, entries_.size());
    entries_.push_back({std::move(spec), t});
    return t;
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  const Tensor<T>& at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
    return entries_[it->second].tensor;
  }

  const Entry& entry(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
    return entries_[it->second];
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<ParamSpec> layout() const {
    std::vector<ParamSpec> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.spec);
    return out;
  }

  std::vector<Tensor<T>> group(ParamGroup g) const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_)
      if (e.spec.group == g) out.push_back(e.tensor);
    return out;
  }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_)
      if (e.spec.group != ParamGroup::pretrained) out.push_back(e.tensor);
    return out;
  }

  ParameterCount count() const { return count_parameters(layout()); }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// FNV-1a over names and raw bytes of every parameter in group g.
  std::uint64_t checksum(ParamGroup g) const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& e : entries_) {
      if (e.spec.group != g) continue;
      mix(e.spec.name.data(), e.spec.name.size());
      mix(e.tensor.data().data(), e.tensor.size() * sizeof(T));
    }
    return h;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace deflect
