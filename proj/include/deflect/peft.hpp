#pragma once

// Baseline adaptation methods and the low-rank entanglement diagnostic.

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/ops.hpp"
#include "deflect/params.hpp"
#include "deflect/random.hpp"
#include "deflect/vit.hpp"

namespace deflect {

enum class MethodKind { frozen, full, lora, bitfit, normtune, deflect };
enum class StemInput { rgb, all };
enum class StemInit { repeat, rgb_plus_random };

inline std::string_view method_name(MethodKind k) {
  switch (k) {
    case MethodKind::frozen: return "frozen";
    case MethodKind::full: return "full";
    case MethodKind::lora: return "lora";
    case MethodKind::bitfit: return "bitfit";
    case MethodKind::normtune: return "normtune";
    case MethodKind::deflect: return "deflect";
  }
  return "?";
}

inline MethodKind parse_method(std::string_view name) {
  for (auto k : {MethodKind::frozen, MethodKind::full, MethodKind::lora, MethodKind::bitfit, MethodKind::normtune,
                 MethodKind::deflect})
    if (method_name(k) == name) return k;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

inline std::string_view stem_init_name(StemInit s) { return s == StemInit::repeat ? "repeat" : "rgb_plus_random"; }

inline StemInit parse_stem_init(std::string_view name) {
  if (name == "repeat") return StemInit::repeat;
  if (name == "rgb_plus_random") return StemInit::rgb_plus_random;
  throw ConfigError("unknown stem initialisation '" + std::string(name) + "'");
}

inline const std::vector<std::string>& lora_target_names() {
  static const std::vector<std::string> names{"q", "k", "v", "o", "fc1", "fc2"};
  return names;
}

struct PeftMethod {
  MethodKind kind = MethodKind::deflect;
  std::size_t lora_rank = 16;
  std::vector<std::string> lora_targets{"q", "k", "v"};
  StemInput input = StemInput::rgb;
  StemInit stem_init = StemInit::repeat;

  /// Baselines other than `frozen` see every channel through a tiled stem; DEFLECT keeps the RGB stem.
  static PeftMethod defaults(MethodKind kind) {
    PeftMethod m;
    m.kind = kind;
    m.input = (kind == MethodKind::frozen || kind == MethodKind::deflect) ? StemInput::rgb : StemInput::all;
    return m;
  }

  void validate() const {
    if (kind == MethodKind::deflect && input != StemInput::rgb) {
      throw ConfigError("deflect keeps the pretrained RGB stem; stem input must be 'rgb'");
    }
    if (kind == MethodKind::lora) {
      if (lora_rank == 0) throw ConfigError("lora rank must be positive");
      if (lora_targets.empty()) throw ConfigError("lora needs at least one target matrix");
      for (const auto& t : lora_targets)
        if (std::find(lora_target_names().begin(), lora_target_names().end(), t) == lora_target_names().end()) {
          throw ConfigError("unknown lora target '" + t + "'");
        }
    }
  }
};

/// Assigns every encoder parameter to theta_P or theta_A for the given method.
inline void assign_encoder_groups(std::vector<ParamSpec>& encoder, MethodKind kind) {
  for (auto& s : encoder) {
    bool tuned = false;
    switch (kind) {
      case MethodKind::full: tuned = true; break;
      case MethodKind::bitfit: tuned = s.kind == ParamKind::bias || s.kind == ParamKind::norm_bias; break;
      case MethodKind::normtune: tuned = s.kind == ParamKind::norm_gain || s.kind == ParamKind::norm_bias; break;
      default: tuned = false;
    }
    s.group = tuned ? ParamGroup::adapter : ParamGroup::pretrained;
  }
}

inline std::string lora_param_prefix(std::size_t layer, const std::string& target) {
  const bool mlp = target == "fc1" || target == "fc2";
  return block_prefix(layer) + (mlp ? "mlp." : "attn.") + target;
}

inline std::vector<ParamSpec> lora_layout(const VitConfig& cfg, std::size_t rank,
                                          const std::vector<std::string>& targets) {
  std::vector<ParamSpec> out;
  const std::size_t d = cfg.embed_dim, h = cfg.mlp_hidden();
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    for (const auto& t : targets) {
      const std::size_t in = t == "fc2" ? h : d;
      const std::size_t outd = t == "fc1" ? h : d;
      const auto p = lora_param_prefix(l, t);
      out.push_back({p + ".lora_a", {in, rank}, ParamKind::weight, ParamGroup::adapter});
      out.push_back({p + ".lora_b", {rank, outd}, ParamKind::weight, ParamGroup::adapter});
    }
  }
  return out;
}

/// Allocates LoRA factors (A Xavier, B zero) and attaches them to the encoder's linear maps.
template <typename T>
void apply_lora(ParameterSet<T>& ps, Encoder<T>& enc, std::size_t rank, const std::vector<std::string>& targets,
                Rng& rng) {
  if (rank == 0) throw ConfigError("lora rank must be positive");
  for (auto& spec : lora_layout(enc.cfg, rank, targets)) {
    const bool is_a = spec.name.ends_with(".lora_a");
    auto values = is_a ? xavier_uniform<T>(spec.shape[0], spec.shape[1], rng) : std::vector<T>(spec.count(), T(0));
    ps.add(std::move(spec), std::move(values));
  }
  for (std::size_t l = 1; l <= enc.cfg.depth; ++l) {
    auto& b = enc.blocks[l - 1];
    for (const auto& t : targets) {
      Linear<T>* lin = t == "q" ? &b.q : t == "k" ? &b.k : t == "v" ? &b.v : t == "o" ? &b.o : t == "fc1" ? &b.fc1 : &b.fc2;
      const auto p = lora_param_prefix(l, t);
      lin->lora_a = ps.at(p + ".lora_a");
      lin->lora_b = ps.at(p + ".lora_b");
    }
  }
}

/// W_P + A B as a fresh tensor.
template <typename T>
Tensor<T> merged_weight(const Linear<T>& l) {
  if (!l.lora_a || !l.lora_b) return l.weight.detach();
  return add(l.weight.detach(), matmul(l.lora_a->detach(), l.lora_b->detach()));
}

/**
 * Patch-embedding weights for a C-channel input built from the RGB stem
 * (rows grouped by channel). `repeat` tiles the RGB rows cyclically over all
 * channels; `rgb_plus_random` copies them to channels 0..2 and draws the
 * rest from a Xavier distribution. Channels 0..2 are red, green, blue.
 */
template <typename T>
std::vector<T> multispectral_stem_init(const Tensor<T>& rgb_weight, std::size_t channels, StemInit strategy,
                                       Rng& rng) {
  if (channels < 3) throw ConfigError("a multispectral stem needs at least 3 channels, got " + std::to_string(channels));
  if (rgb_weight.rows() % 3) throw DimensionError("RGB stem rows are not a multiple of 3");
  const std::size_t per_channel = rgb_weight.rows() / 3, d = rgb_weight.cols();
  const std::size_t block = per_channel * d;
  std::vector<T> out(channels * block);
  const auto random = xavier_uniform<T>(channels * per_channel, d, rng);
  for (std::size_t c = 0; c < channels; ++c) {
    const bool copy = strategy == StemInit::repeat || c < 3;
    for (std::size_t i = 0; i < block; ++i)
      out[c * block + i] = copy ? rgb_weight.data()[(c % 3) * block + i] : random[c * block + i];
  }
  return out;
}

/// Red, green, blue, then the remaining bands in image order.
inline std::vector<std::size_t> stem_channel_order(const MultispectralImage& img) {
  std::vector<std::size_t> order;
  for (const auto& n : rgb_band_names()) order.push_back(img.band(n));
  for (std::size_t c = 0; c < img.channels; ++c)
    if (std::find(order.begin(), order.end(), c) == order.end()) order.push_back(c);
  return order;
}

/// Single-head score matrices of the LoRA-adapted first layer for x = x_P + x_A.
struct EntanglementReport {
  double eq7_max_abs_error = 0;  // direct vs four-term expansion
  double eq8_max_abs_error = 0;  // direct vs expansion of the first and last terms
  std::vector<std::pair<std::string, double>> term_norms;  // Frobenius norm of every term
};

/**
 * Checks that scores computed on (x_P + x_A) with W~ = W_P + dW equal the
 * four-term split over (x_P, x_A) and the further split of the P-P and A-A
 * terms over (W_P, dW), and reports the magnitude of every term.
 */
template <typename T>
EntanglementReport entanglement_diagnostic(const Tensor<T>& x_p, const Tensor<T>& x_a, const Tensor<T>& wq_p,
                                           const Tensor<T>& wk_p, const Tensor<T>& dwq, const Tensor<T>& dwk) {
  const T s = T(1) / std::sqrt(static_cast<T>(x_p.cols()));
  auto score = [&](const Tensor<T>& xi, const Tensor<T>& wq, const Tensor<T>& xj, const Tensor<T>& wk) {
    return scale(matmul(matmul(xi, wq), transpose(matmul(xj, wk))), s);
  };
  const auto wq = add(wq_p, dwq), wk = add(wk_p, dwk);
  const auto direct = score(add(x_p, x_a), wq, add(x_p, x_a), wk);

  EntanglementReport r;
  auto frob = [](const Tensor<T>& t) {
    double acc = 0;
    for (auto v : t.data()) acc += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(acc);
  };
  auto max_abs_diff = [](const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
      m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    return m;
  };

  const auto pp = score(x_p, wq, x_p, wk), pa = score(x_p, wq, x_a, wk);
  const auto ap = score(x_a, wq, x_p, wk), aa = score(x_a, wq, x_a, wk);
  r.eq7_max_abs_error = max_abs_diff(direct, add(add(add(pp, pa), ap), aa));

  std::vector<std::pair<std::string, Tensor<T>>> terms{
      {"xP.WP | xP.WP", score(x_p, wq_p, x_p, wk_p)}, {"xP.WP | xP.dW", score(x_p, wq_p, x_p, dwk)},
      {"xP.dW | xP.WP", score(x_p, dwq, x_p, wk_p)},  {"xP.dW | xP.dW", score(x_p, dwq, x_p, dwk)},
      {"xP.W~ | xA.W~", pa},                          {"xA.W~ | xP.W~", ap},
      {"xA.WP | xA.WP", score(x_a, wq_p, x_a, wk_p)}, {"xA.WP | xA.dW", score(x_a, wq_p, x_a, dwk)},
      {"xA.dW | xA.WP", score(x_a, dwq, x_a, wk_p)},  {"xA.dW | xA.dW", score(x_a, dwq, x_a, dwk)}};
  auto total = terms.front().second;
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i].second);
  r.eq8_max_abs_error = max_abs_diff(direct, total);
  for (const auto& [name, t] : terms) r.term_norms.emplace_back(name, frob(t));
  return r;
}

}  // namespace deflect
