#pragma once

// Untangled attention and embedding deflection.
//
// At an adapted layer the pretrained query/key/value maps act on the latent
// state z while new maps W_A act on the fixed spectral embedding x_A:
//
//   q_i = z_i W_P^Q + x_iA W_A^Q     (likewise k, v)
//
// The resulting displacement D is rescaled token by token so that its norm
// equals the norm of the displacement the pretrained attention computes on
// the same input.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/ops.hpp"
#include "deflect/params.hpp"
#include "deflect/random.hpp"
#include "deflect/vit.hpp"

namespace deflect {

struct AdapterConfig {
  std::vector<std::size_t> layers{3, 5, 7, 11};
  std::optional<std::size_t> rank = 16;  // nullopt: dense d×d maps
  double epsilon = 1e-8;
  bool detach_reference_norm = false;
  bool reference_from_frozen_trajectory = false;

  /// Layers tapped by a UPerNet decoder: {3,5,7,11} at depth 12, {7,11,15,23} at depth 24.
  static std::vector<std::size_t> default_layers(std::size_t depth) {
    if (depth == 12) return {3, 5, 7, 11};
    if (depth == 24) return {7, 11, 15, 23};
    throw ConfigError("no default adapted layers for depth " + std::to_string(depth) + "; list them explicitly");
  }

  void validate(std::size_t depth) const {
    std::set<std::size_t> unique(layers.begin(), layers.end());
    if (unique.size() != layers.size()) throw ConfigError("adapted layers contain duplicates");
    for (auto l : layers)
      if (l < 1 || l > depth) {
        throw ConfigError("adapted layer " + std::to_string(l) + " outside 1.." + std::to_string(depth));
      }
    if (rank && *rank == 0) throw ConfigError("adapter rank must be positive");
    if (!(epsilon > 0.0)) throw ConfigError("deflection epsilon must be positive");
  }
};

/// One new projection W_A, dense or factored as A·B.
template <typename T>
struct UattProjection {
  std::optional<Tensor<T>> dense;  // d × d
  std::optional<Tensor<T>> a;      // d × r
  std::optional<Tensor<T>> b;      // r × d

  Tensor<T> apply(const Tensor<T>& x) const {
    if (dense) return matmul(x, *dense);
    return matmul(matmul(x, *a), *b);
  }

  /// Materialised d×d map.
  Tensor<T> weight() const {
    if (dense) return dense->detach();
    return matmul(a->detach(), b->detach());
  }
};

template <typename T>
struct UattParams {
  UattProjection<T> q, k, v;
};

inline std::string uatt_prefix(std::size_t layer) { return block_prefix(layer) + "uatt."; }

inline std::vector<ParamSpec> adapter_layout(const AdapterConfig& cfg, std::size_t embed_dim,
                                             ParamGroup group = ParamGroup::adapter) {
  std::vector<ParamSpec> out;
  for (auto l : cfg.layers) {
    for (const char* m : {"q", "k", "v"}) {
      const auto p = uatt_prefix(l) + m;
      if (cfg.rank) {
        out.push_back({p + ".a", {embed_dim, *cfg.rank}, ParamKind::weight, group});
        out.push_back({p + ".b", {*cfg.rank, embed_dim}, ParamKind::weight, group});
      } else {
        out.push_back({p + ".weight", {embed_dim, embed_dim}, ParamKind::weight, group});
      }
    }
  }
  return out;
}

template <typename T>
std::map<std::size_t, UattParams<T>> bind_adapter(const ParameterSet<T>& ps, const AdapterConfig& cfg) {
  std::map<std::size_t, UattParams<T>> out;
  for (auto l : cfg.layers) {
    auto bind = [&](const char* m) {
      UattProjection<T> p;
      const auto prefix = uatt_prefix(l) + m;
      if (cfg.rank) {
        p.a = ps.at(prefix + ".a");
        p.b = ps.at(prefix + ".b");
      } else {
        p.dense = ps.at(prefix + ".weight");
      }
      return p;
    };
    out[l] = UattParams<T>{bind("q"), bind("k"), bind("v")};
  }
  return out;
}

/// A ~ Xavier, B = 0 (dense maps start at 0), so the adapted model starts at the frozen one.
template <typename T>
std::map<std::size_t, UattParams<T>> make_adapter(ParameterSet<T>& ps, const AdapterConfig& cfg,
                                                  std::size_t embed_dim, Rng& rng) {
  for (auto& spec : adapter_layout(cfg, embed_dim)) {
    const bool is_a = spec.name.ends_with(".a");
    auto values = is_a ? xavier_uniform<T>(spec.shape[0], spec.shape[1], rng) : std::vector<T>(spec.count(), T(0));
    ps.add(std::move(spec), std::move(values));
  }
  return bind_adapter(ps, cfg);
}

template <typename T>
struct UattInputs {
  Tensor<T> q_p, k_p, v_p;  // pretrained maps on z (biases included)
  Tensor<T> q_a, k_a, v_a;  // new maps on x_A
};

template <typename T>
UattInputs<T> uatt_inputs(const Tensor<T>& normed, const Tensor<T>& x_a, const AttentionBlockParams<T>& block,
                          const UattParams<T>& added) {
  if (normed.shape() != x_a.shape()) {
    throw DimensionError("uAtt: latent state " + shape_str(normed.shape()) + " and spectral embedding " +
                         shape_str(x_a.shape()) + " are not row-aligned");
  }
  return {linear(normed, block.q), linear(normed, block.k), linear(normed, block.v),
          added.q.apply(x_a),      added.k.apply(x_a),      added.v.apply(x_a)};
}

/// Combined scores ((q_P + q_A)(k_P + k_A)^T) / sqrt(d/h), h × n × n.
template <typename T>
Tensor<T> uatt_scores(const Tensor<T>& normed, const Tensor<T>& x_a, const AttentionBlockParams<T>& block,
                      const UattParams<T>& added, std::size_t num_heads) {
  auto in = uatt_inputs(normed, x_a, block, added);
  const auto q = add(in.q_p, in.q_a), k = add(in.k_p, in.k_a);
  std::vector<Tensor<T>> scores;
  for (std::size_t h = 0; h < num_heads; ++h) scores.push_back(head_scores(q, k, h, q.cols() / num_heads).detach());
  return stack_scores(scores);
}

template <typename T>
struct UattScoreTerms {
  Tensor<T> rgb_rgb, rgb_spectral, spectral_rgb, spectral_spectral;  // each h × n × n

  Tensor<T> total() const { return add(add(add(rgb_rgb, rgb_spectral), spectral_rgb), spectral_spectral); }
};

/// The four attention products, each scaled by 1/sqrt(d/h).
template <typename T>
UattScoreTerms<T> uatt_score_terms(const Tensor<T>& normed, const Tensor<T>& x_a,
                                   const AttentionBlockParams<T>& block, const UattParams<T>& added,
                                   std::size_t num_heads) {
  auto in = uatt_inputs(normed, x_a, block, added);
  const std::size_t hd = in.q_p.cols() / num_heads;
  std::vector<Tensor<T>> pp, pa, ap, aa;
  for (std::size_t h = 0; h < num_heads; ++h) {
    pp.push_back(head_scores(in.q_p, in.k_p, h, hd).detach());
    pa.push_back(head_scores(in.q_p, in.k_a, h, hd).detach());
    ap.push_back(head_scores(in.q_a, in.k_p, h, hd).detach());
    aa.push_back(head_scores(in.q_a, in.k_a, h, hd).detach());
  }
  return {stack_scores(pp), stack_scores(pa), stack_scores(ap), stack_scores(aa)};
}

/// Raw (pre-deflection) uAtt displacement D, through the pretrained W^O.
template <typename T>
Tensor<T> uatt_displacement(const Tensor<T>& normed, const Tensor<T>& x_a, const AttentionBlockParams<T>& block,
                            const UattParams<T>& added, std::size_t num_heads) {
  auto in = uatt_inputs(normed, x_a, block, added);
  return attend(add(in.q_p, in.q_a), add(in.k_p, in.k_a), add(in.v_p, in.v_a), block.o, num_heads);
}

/**
 * Rescales each row of D to the norm of the matching reference row:
 * D_i * ||ref_i|| / max(||D_i||, eps). Rows with ||D_i|| <= eps are scaled by
 * ||ref_i|| / eps.
 */
template <typename T>
Tensor<T> deflect(const Tensor<T>& d, const Tensor<T>& reference, T eps, bool detach_reference = false) {
  if (d.shape() != reference.shape()) {
    throw DimensionError("deflect: displacement " + shape_str(d.shape()) + " vs reference " +
                         shape_str(reference.shape()));
  }
  auto ref_norm = l2_norm_rows(detach_reference ? reference.detach() : reference);
  auto d_norm = clamp_min(l2_norm_rows(d), eps);
  return mul_rows(d, div(ref_norm, d_norm));
}

template <typename T>
struct DeflectedAttention {
  Tensor<T> output;     // deflected displacement added to the residual
  Tensor<T> raw;        // D
  Tensor<T> reference;  // pretrained Delta_1 z
};

/// Untangled attention followed by deflection against the pretrained displacement of `reference_input`.
template <typename T>
DeflectedAttention<T> adapted_attention_sublayer(const Tensor<T>& normed, const Tensor<T>& x_a,
                                                 const AttentionBlockParams<T>& block, const UattParams<T>& added,
                                                 const AdapterConfig& cfg, std::size_t num_heads,
                                                 const Tensor<T>* reference_input = nullptr) {
  auto reference = self_attention(reference_input ? *reference_input : normed, block, num_heads).displacement;
  auto raw = uatt_displacement(normed, x_a, block, added, num_heads);
  auto out = deflect(raw, reference, static_cast<T>(cfg.epsilon), cfg.detach_reference_norm);
  return {out, raw, reference};
}

/// Per-token norms observed at each adapted layer during one forward pass.
struct DeflectionTrace {
  std::map<std::size_t, std::vector<double>> reference_norms;
  std::map<std::size_t, std::vector<double>> output_norms;
};

/**
 * Hooks that swap the attention sublayer of every adapted layer for uAtt +
 * deflection. With `frozen_normed` the reference displacement is computed on
 * the frozen trajectory's normalised state at that layer instead of the
 * current one.
 */
template <typename T>
HookMap<T> make_deflect_hooks(const std::map<std::size_t, UattParams<T>>& adapter, const AdapterConfig& cfg,
                              const Tensor<T>& x_a, DeflectionTrace* trace = nullptr,
                              const std::vector<Tensor<T>>* frozen_normed = nullptr) {
  HookMap<T> hooks;
  for (const auto& entry : adapter) {
    const std::size_t layer = entry.first;
    hooks[layer] = [&adapter, &cfg, &x_a, trace, frozen_normed, layer](const HookContext<T>& ctx) {
      const Tensor<T>* ref_in = frozen_normed ? &(*frozen_normed)[layer - 1] : nullptr;
      auto res = adapted_attention_sublayer(ctx.normed, x_a, ctx.block, adapter.at(layer), cfg, ctx.num_heads, ref_in);
      if (trace) {
        auto rn = l2_norm_rows(res.reference.detach());
        auto on = l2_norm_rows(res.output.detach());
        trace->reference_norms[layer].assign(rn.data().begin(), rn.data().end());
        trace->output_norms[layer].assign(on.data().begin(), on.data().end());
      }
      return res.output;
    };
  }
  return hooks;
}

}  // namespace deflect
