#pragma once

// A pretrained encoder wrapped with one adaptation method and a task head.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deflect/adapter.hpp"
#include "deflect/errors.hpp"
#include "deflect/image.hpp"
#include "deflect/ops.hpp"
#include "deflect/params.hpp"
#include "deflect/peft.hpp"
#include "deflect/random.hpp"
#include "deflect/spectral.hpp"
#include "deflect/vit.hpp"

namespace deflect {

enum class TaskKind { classification, segmentation };

inline std::string_view task_name(TaskKind t) {
  return t == TaskKind::classification ? "classification" : "segmentation";
}

inline TaskKind parse_task(std::string_view name) {
  if (name == "classification") return TaskKind::classification;
  if (name == "segmentation") return TaskKind::segmentation;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

inline constexpr int kIgnoreLabel = 255;

struct ModelConfig {
  VitConfig vit;  // geometry of the pretrained RGB encoder
  PeftMethod method;
  AdapterConfig adapter;
  UpeConfig upe;  // empty index list: default_index_list(bands)
  std::vector<std::string> bands{"red", "green", "blue", "nir", "swir1", "swir2"};
  std::size_t num_classes = 4;
  TaskKind task = TaskKind::classification;

  UpeConfig resolved_upe() const {
    auto u = upe;
    if (u.indices.empty()) u.indices = default_index_list(bands);
    return u;
  }

  /// The encoder actually run: the pretrained geometry, with every band as input for all-channel stems.
  VitConfig encoder_config() const {
    auto v = vit;
    v.in_channels = method.input == StemInput::all ? bands.size() : 3;
    return v;
  }

  /// All problems found, in a stable order.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    auto check = [&](auto&& fn) {
      try {
        fn();
      } catch (const std::invalid_argument& e) {
        out.emplace_back(e.what());
      }
    };
    check([&] { vit.validate(); });
    check([&] { method.validate(); });
    if (vit.in_channels != 3) out.emplace_back("the pretrained encoder must have 3 input channels");
    if (num_classes < 2) out.emplace_back("num_classes must be at least 2");
    if (num_classes > static_cast<std::size_t>(kIgnoreLabel)) out.emplace_back("num_classes must be below 255");
    check([&] {
      MultispectralImage probe(bands.size(), 1, 1, bands);
      for (const auto& b : rgb_band_names()) probe.band(b);
    });
    if (method.kind == MethodKind::deflect) {
      check([&] { adapter.validate(vit.depth); });
      check([&] {
        const auto u = resolved_upe();
        u.validate();
        for (const auto& idx : u.indices)
          for (const auto& b : idx.bands())
            if (std::find(bands.begin(), bands.end(), b) == bands.end()) {
              throw ConfigError("spectral index " + idx.name + " references band '" + b + "' missing from the sensor");
            }
        projection_layout(u.raw_dim(), vit.embed_dim, u.use_projection);
      });
    }
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid model configuration:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
};

inline std::vector<ParamSpec> head_layout(std::size_t embed_dim, std::size_t num_classes) {
  return {{"head.weight", {embed_dim, num_classes}, ParamKind::weight, ParamGroup::head},
          {"head.bias", {num_classes}, ParamKind::bias, ParamGroup::head}};
}

/// Every parameter of the adapted model with its partition group; no storage is allocated.
inline std::vector<ParamSpec> model_layout(const ModelConfig& cfg) {
  auto out = encoder_layout(cfg.encoder_config());
  assign_encoder_groups(out, cfg.method.kind);
  auto append = [&out](std::vector<ParamSpec> more) { out.insert(out.end(), more.begin(), more.end()); };
  if (cfg.method.kind == MethodKind::lora) {
    append(lora_layout(cfg.vit, cfg.method.lora_rank, cfg.method.lora_targets));
  }
  if (cfg.method.kind == MethodKind::deflect) {
    const auto u = cfg.resolved_upe();
    append(adapter_layout(cfg.adapter, cfg.vit.embed_dim));
    append(projection_layout(u.raw_dim(), cfg.vit.embed_dim, u.use_projection));
  }
  append(head_layout(cfg.vit.embed_dim, cfg.num_classes));
  return out;
}

/// Seeded stand-in for a pretrained RGB encoder.
template <typename T>
ParameterSet<T> random_pretrained(const VitConfig& vit, std::uint64_t seed) {
  ParameterSet<T> ps;
  auto rng = derive_rng(seed, 0x5052);
  make_encoder(ps, vit, rng);
  return ps;
}

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // 1×K, or (H W)×K per pixel
  LatentState<T> state;
};

template <typename T>
class Model {
 public:
  /// Copies the pretrained encoder, then adds the method's parameters and a fresh head.
  Model(ModelConfig cfg, const ParameterSet<T>& pretrained, std::uint64_t seed)
      : cfg_(std::move(cfg)), upe_(cfg_.resolved_upe()) {
    cfg_.validate();
    auto rng = derive_rng(seed, 0x4d4f44);
    auto layout = encoder_layout(cfg_.encoder_config());
    assign_encoder_groups(layout, cfg_.method.kind);
    for (auto& spec : layout) {
      if (!pretrained.contains(spec.name)) {
        throw ConfigError("pretrained weights lack parameter '" + spec.name + "'");
      }
      const auto& src = pretrained.at(spec.name);
      std::vector<T> values;
      if (spec.name == "patch_embed.weight" && cfg_.method.input == StemInput::all) {
        values = multispectral_stem_init(src, cfg_.bands.size(), cfg_.method.stem_init, rng);
      } else {
        if (src.shape() != spec.shape) {
          throw ConfigError("pretrained parameter '" + spec.name + "' has shape " + shape_str(src.shape()) +
                            ", expected " + shape_str(spec.shape));
        }
        values = src.values();
      }
      params_.add(std::move(spec), std::move(values));
    }
    enc_ = bind_encoder(params_, cfg_.encoder_config());
    if (cfg_.method.kind == MethodKind::lora) {
      apply_lora(params_, enc_, cfg_.method.lora_rank, cfg_.method.lora_targets, rng);
    }
    if (cfg_.method.kind == MethodKind::deflect) {
      adapter_ = make_adapter(params_, cfg_.adapter, cfg_.vit.embed_dim, rng);
      projection_ = make_projection(params_, upe_.raw_dim(), cfg_.vit.embed_dim, upe_.use_projection, rng);
    }
    for (auto& spec : head_layout(cfg_.vit.embed_dim, cfg_.num_classes)) {
      auto values = spec.kind == ParamKind::weight ? xavier_uniform<T>(spec.shape[0], spec.shape[1], rng)
                                                   : std::vector<T>(spec.count(), T(0));
      params_.add(std::move(spec), std::move(values));
    }
    head_ = bind_linear(params_, "head");
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const UpeConfig& upe() const { return upe_; }
  const ParameterSet<T>& parameters() const { return params_; }
  ParameterSet<T>& parameters() { return params_; }
  const Encoder<T>& encoder() const { return enc_; }
  const std::map<std::size_t, UattParams<T>>& adapter() const { return adapter_; }
  const SpectralProjection<T>& projection() const { return projection_; }
  const Linear<T>& head() const { return head_; }

  /// Overwrites parameter values by name (shapes must match).
  void assign(const std::string& name, const std::vector<T>& values) {
    auto t = params_.at(name);
    if (t.size() != values.size()) {
      throw IntegrityError("parameter '" + name + "' holds " + std::to_string(t.size()) + " values, got " +
                           std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), t.data().begin());
  }

  /// Raw pixel-set statistics of an image, computed once per image id.
  Tensor<T> raw_spectral(const MultispectralImage& img, std::uint64_t image_id) const {
    {
      std::lock_guard lock(cache_->mutex);
      auto it = cache_->raw.find(image_id);
      if (it != cache_->raw.end()) return it->second;
    }
    auto raw = raw_spectral_tensor<T>(img, upe_, cfg_.vit.patch_size, image_id);
    std::lock_guard lock(cache_->mutex);
    return cache_->raw.emplace(image_id, raw).first->second;
  }

  EmbeddingPair<T> untangled_embedding(const MultispectralImage& img, std::uint64_t image_id) const {
    if (cfg_.method.kind != MethodKind::deflect) throw ConfigError("untangled embedding needs the deflect method");
    auto x_p = patch_embed_rgb(img, enc_);
    auto x_a = project_spectral(raw_spectral(img, image_id), projection_);
    if (x_a.shape() != x_p.shape()) {
      throw DimensionError("spectral embedding " + shape_str(x_a.shape()) + " does not align with RGB embedding " +
                           shape_str(x_p.shape()));
    }
    return {x_p, x_a};
  }

  /// Encoder input z^(1).
  Tensor<T> embed(const MultispectralImage& img) const {
    if (cfg_.method.input == StemInput::rgb) return patch_embed_rgb(img, enc_);
    check_image_geometry(img, enc_.cfg);
    if (img.channels != cfg_.bands.size()) {
      throw ConfigError("image has " + std::to_string(img.channels) + " bands, the stem expects " +
                        std::to_string(cfg_.bands.size()));
    }
    return patch_embed(extract_patches<T>(img, stem_channel_order(img), enc_.cfg.patch_size), enc_.stem, enc_.pos);
  }

  ForwardResult<T> forward(const MultispectralImage& img, std::uint64_t image_id, DeflectionTrace* trace = nullptr,
                           bool record_norms = false) const {
    LatentState<T> state;
    if (cfg_.method.kind == MethodKind::deflect) {
      auto pair = untangled_embedding(img, image_id);
      std::vector<Tensor<T>> frozen_normed;
      if (cfg_.adapter.reference_from_frozen_trajectory) {
        NoGradGuard guard;
        auto frozen = transport(pair.x_p, enc_);
        for (std::size_t l = 0; l < enc_.blocks.size(); ++l)
          frozen_normed.push_back(apply_norm(frozen.z[l], enc_.blocks[l].norm1));
      }
      auto hooks = make_deflect_hooks(adapter_, cfg_.adapter, pair.x_a, trace,
                                      cfg_.adapter.reference_from_frozen_trajectory ? &frozen_normed : nullptr);
      state = transport(pair.x_p, enc_, hooks, record_norms);
    } else {
      state = transport(embed(img), enc_, {}, record_norms);
    }
    return {head_logits(apply_norm(state.output(), enc_.norm)), std::move(state)};
  }

  Tensor<T> logits(const MultispectralImage& img, std::uint64_t image_id) const { return forward(img, image_id).logits; }

  /// Class per image, or per pixel (row-major) for segmentation.
  std::vector<int> predict(const MultispectralImage& img, std::uint64_t image_id) const {
    NoGradGuard guard;
    const auto l = logits(img, image_id);
    const std::size_t k = l.cols();
    std::vector<int> out(l.rows());
    for (std::size_t i = 0; i < l.rows(); ++i) {
      const auto row = l.data().subspan(i * k, k);
      out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }

  /// Classification: linear map of the mean token. Segmentation: per-patch logits repeated over each patch's pixels.
  Tensor<T> head_logits(const Tensor<T>& final_state) const {
    if (cfg_.task == TaskKind::classification) {
      return linear(reshape(mean_rows(final_state), {1, cfg_.vit.embed_dim}), head_);
    }
    return gather_rows(linear(final_state, head_), pixel_to_patch());
  }

  /// Nearest-neighbour upsampling map from pixels (row-major) to patch rows.
  std::vector<std::size_t> pixel_to_patch() const {
    const auto& v = cfg_.vit;
    std::vector<std::size_t> idx(v.image_size * v.image_size);
    for (std::size_t y = 0; y < v.image_size; ++y)
      for (std::size_t x = 0; x < v.image_size; ++x)
        idx[y * v.image_size + x] = (y / v.patch_size) * v.grid() + x / v.patch_size;
    return idx;
  }

 private:
  struct Cache {
    std::mutex mutex;
    std::map<std::uint64_t, Tensor<T>> raw;
  };

  ModelConfig cfg_;
  UpeConfig upe_;
  ParameterSet<T> params_;
  Encoder<T> enc_;
  std::map<std::size_t, UattParams<T>> adapter_;
  SpectralProjection<T> projection_;
  Linear<T> head_;
  std::unique_ptr<Cache> cache_ = std::make_unique<Cache>();
};

}  // namespace deflect
