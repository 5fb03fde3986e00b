#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/image.hpp"
#include "deflect/ops.hpp"
#include "deflect/params.hpp"
#include "deflect/random.hpp"
#include "deflect/tensor.hpp"

namespace deflect {

struct VitConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t depth = 12;
  std::size_t embed_dim = 96;
  std::size_t num_heads = 4;
  double mlp_ratio = 4.0;
  std::size_t in_channels = 3;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
  }
  std::size_t patch_features(std::size_t channels) const { return channels * patch_size * patch_size; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                        std::to_string(patch_size));
    }
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) throw ConfigError("mlp_ratio must be positive");
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
  }
};

inline constexpr double kLayerNormEps = 1e-6;

/// y = x W + b, optionally with a low-rank update (x A) B.
template <typename T>
struct Linear {
  Tensor<T> weight;  // in × out
  Tensor<T> bias;    // out
  std::optional<Tensor<T>> lora_a;  // in × r
  std::optional<Tensor<T>> lora_b;  // r × out
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& l) {
  auto y = matmul(x, l.weight);
  if (l.lora_a && l.lora_b) y = add(y, matmul(matmul(x, *l.lora_a), *l.lora_b));
  return add_bias(y, l.bias);
}

template <typename T>
struct Norm {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
Tensor<T> apply_norm(const Tensor<T>& x, const Norm<T>& n) {
  return layer_norm(x, n.gain, n.bias, static_cast<T>(kLayerNormEps));
}

/// Pre-norm transformer block: W^Q, W^K, W^V, W^O plus a two-layer MLP.
template <typename T>
struct AttentionBlockParams {
  Norm<T> norm1;
  Linear<T> q, k, v, o;
  Norm<T> norm2;
  Linear<T> fc1, fc2;
};

template <typename T>
struct Encoder {
  VitConfig cfg;
  Linear<T> stem;  // (C p p) × d
  Tensor<T> pos;   // n × d
  std::vector<AttentionBlockParams<T>> blocks;
  Norm<T> norm;
};

inline std::string block_prefix(std::size_t layer) { return "blocks." + std::to_string(layer) + "."; }

/// Parameter layout of the encoder; layers are numbered 1..depth.
inline std::vector<ParamSpec> encoder_layout(const VitConfig& cfg, ParamGroup group = ParamGroup::pretrained) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim, h = cfg.mlp_hidden();
  std::vector<ParamSpec> out;
  auto add = [&](std::string name, Shape shape, ParamKind kind) {
    out.push_back({std::move(name), std::move(shape), kind, group});
  };
  add("patch_embed.weight", {cfg.patch_features(cfg.in_channels), d}, ParamKind::weight);
  add("patch_embed.bias", {d}, ParamKind::bias);
  add("pos_embed", {cfg.tokens(), d}, ParamKind::embedding);
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    const auto p = block_prefix(l);
    add(p + "norm1.gain", {d}, ParamKind::norm_gain);
    add(p + "norm1.bias", {d}, ParamKind::norm_bias);
    for (const char* m : {"q", "k", "v", "o"}) {
      add(p + "attn." + m + ".weight", {d, d}, ParamKind::weight);
      add(p + "attn." + m + ".bias", {d}, ParamKind::bias);
    }
    add(p + "norm2.gain", {d}, ParamKind::norm_gain);
    add(p + "norm2.bias", {d}, ParamKind::norm_bias);
    add(p + "mlp.fc1.weight", {d, h}, ParamKind::weight);
    add(p + "mlp.fc1.bias", {h}, ParamKind::bias);
    add(p + "mlp.fc2.weight", {h, d}, ParamKind::weight);
    add(p + "mlp.fc2.bias", {d}, ParamKind::bias);
  }
  add("norm.gain", {d}, ParamKind::norm_gain);
  add("norm.bias", {d}, ParamKind::norm_bias);
  return out;
}

/// Seeded stand-in for pretrained values: Xavier weights, small random biases
/// and positional encodings, identity layer norms.
template <typename T>
std::vector<T> init_values(const ParamSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case ParamKind::weight: return xavier_uniform<T>(spec.shape.at(0), spec.shape.at(1), rng);
    case ParamKind::bias: return normal_values<T>(spec.count(), 0.02, rng);
    case ParamKind::embedding: return normal_values<T>(spec.count(), 0.02, rng);
    case ParamKind::norm_gain: return std::vector<T>(spec.count(), T(1));
    case ParamKind::norm_bias: return std::vector<T>(spec.count(), T(0));
  }
  return {};
}

template <typename T>
Linear<T> bind_linear(const ParameterSet<T>& ps, const std::string& prefix) {
  return {ps.at(prefix + ".weight"), ps.at(prefix + ".bias"), std::nullopt, std::nullopt};
}

template <typename T>
Norm<T> bind_norm(const ParameterSet<T>& ps, const std::string& prefix) {
  return {ps.at(prefix + ".gain"), ps.at(prefix + ".bias")};
}

/// Views onto the encoder tensors held by a parameter set.
template <typename T>
Encoder<T> bind_encoder(const ParameterSet<T>& ps, const VitConfig& cfg) {
  Encoder<T> enc;
  enc.cfg = cfg;
  enc.stem = bind_linear(ps, "patch_embed");
  enc.pos = ps.at("pos_embed");
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    const auto p = block_prefix(l);
    AttentionBlockParams<T> b;
    b.norm1 = bind_norm(ps, p + "norm1");
    b.q = bind_linear(ps, p + "attn.q");
    b.k = bind_linear(ps, p + "attn.k");
    b.v = bind_linear(ps, p + "attn.v");
    b.o = bind_linear(ps, p + "attn.o");
    b.norm2 = bind_norm(ps, p + "norm2");
    b.fc1 = bind_linear(ps, p + "mlp.fc1");
    b.fc2 = bind_linear(ps, p + "mlp.fc2");
    enc.blocks.push_back(std::move(b));
  }
  enc.norm = bind_norm(ps, "norm");
  return enc;
}

/// Allocates and binds a seeded encoder inside `ps`.
template <typename T>
Encoder<T> make_encoder(ParameterSet<T>& ps, const VitConfig& cfg, Rng& rng,
                        ParamGroup group = ParamGroup::pretrained) {
  for (auto& spec : encoder_layout(cfg, group)) {
    auto values = init_values<T>(spec, rng);
    ps.add(std::move(spec), std::move(values));
  }
  return bind_encoder(ps, cfg);
}

/**
 * Flattens the patches of `img` into an n×(|channels| p p) matrix.
 * Rows follow the patch grid row-major; each row is channel-major, then
 * row-major within the patch.
 */
template <typename T>
Tensor<T> extract_patches(const MultispectralImage& img, const std::vector<std::size_t>& channels,
                          std::size_t patch) {
  const std::size_t gh = img.height / patch, gw = img.width / patch;
  const std::size_t feat = channels.size() * patch * patch;
  std::vector<T> out(gh * gw * feat);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* row = out.data() + (gy * gw + gx) * feat;
      std::size_t f = 0;
      for (auto c : channels)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px) row[f++] = static_cast<T>(img.at(c, gy * patch + py, gx * patch + px));
    }
  return Tensor<T>({gh * gw, feat}, std::move(out));
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& patches, const Linear<T>& stem, const Tensor<T>& pos) {
  return add(linear(patches, stem), pos);
}

inline void check_image_geometry(const MultispectralImage& img, const VitConfig& cfg) {
  if (img.height != cfg.image_size || img.width != cfg.image_size) {
    throw ConfigError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                      " but the encoder expects " + std::to_string(cfg.image_size) + "x" +
                      std::to_string(cfg.image_size));
  }
}

/// x_P: RGB channels through the pretrained stem plus positional encodings.
template <typename T>
Tensor<T> patch_embed_rgb(const MultispectralImage& img, const Encoder<T>& enc) {
  check_image_geometry(img, enc.cfg);
  std::vector<std::size_t> channels;
  for (const auto& name : rgb_band_names()) channels.push_back(img.band(name));
  return patch_embed(extract_patches<T>(img, channels, enc.cfg.patch_size), enc.stem, enc.pos);
}

/// Scores of one head, kept for diagnostics: (q_i k_j^T) / sqrt(d/h).
template <typename T>
Tensor<T> head_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t head, std::size_t head_dim) {
  const auto qh = slice_cols(q, head * head_dim, head_dim);
  const auto kh = slice_cols(k, head * head_dim, head_dim);
  return scale(matmul(qh, transpose(kh)), T(1) / std::sqrt(static_cast<T>(head_dim)));
}

/// Multi-head attention from precomputed queries, keys and values, through W^O.
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Linear<T>& out_proj,
                 std::size_t num_heads, std::vector<Tensor<T>>* scores = nullptr) {
  const std::size_t hd = q.cols() / num_heads;
  std::vector<Tensor<T>> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    auto s = head_scores(q, k, h, hd);
    if (scores) scores->push_back(s.detach());
    heads.push_back(matmul(softmax_rows(s), slice_cols(v, h * hd, hd)));
  }
  auto merged = num_heads == 1 ? heads.front() : concat_cols(heads);
  return linear(merged, out_proj);
}

/// Stacks per-head n×n score matrices into one h×n×n tensor.
template <typename T>
Tensor<T> stack_scores(const std::vector<Tensor<T>>& scores) {
  const std::size_t n = scores.front().rows();
  std::vector<T> out;
  out.reserve(scores.size() * n * n);
  for (const auto& s : scores) out.insert(out.end(), s.data().begin(), s.data().end());
  return Tensor<T>({scores.size(), n, n}, std::move(out));
}

template <typename T>
struct AttentionResult {
  Tensor<T> displacement;  // n × d, after W^O
  Tensor<T> scores;        // h × n × n, pre-softmax, detached
};

/// Self-attention sublayer on an already-normalised input.
template <typename T>
AttentionResult<T> self_attention(const Tensor<T>& normed, const AttentionBlockParams<T>& block,
                                  std::size_t num_heads) {
  std::vector<Tensor<T>> scores;
  auto out = attend(linear(normed, block.q), linear(normed, block.k), linear(normed, block.v), block.o, num_heads,
                    &scores);
  return {out, stack_scores(scores)};
}

/// Delta_1 z: pre-norm attention displacement of the residual state z.
template <typename T>
AttentionResult<T> attention_displacement(const Tensor<T>& z, const AttentionBlockParams<T>& block,
                                          std::size_t num_heads) {
  return self_attention(apply_norm(z, block.norm1), block, num_heads);
}

/// Tokenwise two-layer GELU MLP on an already-normalised input.
template <typename T>
Tensor<T> mlp(const Tensor<T>& normed, const AttentionBlockParams<T>& block) {
  return linear(gelu(linear(normed, block.fc1)), block.fc2);
}

/// Delta_2 z evaluated at u = z + Delta_1 z.
template <typename T>
Tensor<T> mlp_displacement(const Tensor<T>& u, const AttentionBlockParams<T>& block) {
  return mlp(apply_norm(u, block.norm2), block);
}

template <typename T>
struct HookContext {
  std::size_t layer;  // 1-based
  const Tensor<T>& z;
  const Tensor<T>& normed;  // norm1(z), shared by every attention pass of the layer
  const AttentionBlockParams<T>& block;
  std::size_t num_heads;
};

/// Replaces the attention sublayer of one layer; returns the displacement added to the residual.
template <typename T>
using AttentionHook = std::function<Tensor<T>(const HookContext<T>&)>;

template <typename T>
using HookMap = std::map<std::size_t, AttentionHook<T>>;

/// z^(1..m+1) with the displacements that produced them.
template <typename T>
struct LatentState {
  std::vector<Tensor<T>> z;     // z[l-1] = z^(l), size m+1
  std::vector<Tensor<T>> attn;  // attn[l-1] = Delta_1 z^(l)
  std::vector<Tensor<T>> mlp;   // mlp[l-1]  = Delta_2 z^(l)
  std::vector<std::vector<double>> attn_norms;  // per layer, per token; filled on request

  const Tensor<T>& output() const { return z.back(); }
};

/// Residual transport z^(l+1) = z^(l) + Delta_1 z^(l) + Delta_2 z^(l) through every block.
template <typename T>
LatentState<T> transport(const Tensor<T>& x, const Encoder<T>& enc, const HookMap<T>& hooks = {},
                         bool record_norms = false) {
  const std::size_t m = enc.blocks.size();
  for (const auto& [layer, hook] : hooks) {
    if (layer < 1 || layer > m) {
      throw ConfigError("hook layer " + std::to_string(layer) + " outside 1.." + std::to_string(m));
    }
  }
  LatentState<T> state;
  state.z.push_back(x);
  for (std::size_t l = 1; l <= m; ++l) {
    const auto& block = enc.blocks[l - 1];
    const auto& z = state.z.back();
    const auto normed = apply_norm(z, block.norm1);
    auto it = hooks.find(l);
    Tensor<T> d1 = it != hooks.end() ? it->second(HookContext<T>{l, z, normed, block, enc.cfg.num_heads})
                                     : self_attention(normed, block, enc.cfg.num_heads).displacement;
    auto u = add(z, d1);
    auto d2 = mlp_displacement(u, block);
    auto next = add(u, d2);
    if (record_norms) {
      auto norms = l2_norm_rows(d1.detach());
      state.attn_norms.emplace_back(norms.data().begin(), norms.data().end());
    }
    state.attn.push_back(d1);
    state.mlp.push_back(d2);
    state.z.push_back(next);
  }
  return state;
}

}  // namespace deflect
