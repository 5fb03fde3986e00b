#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "deflect/adapter.hpp"
#include "deflect/dataset.hpp"
#include "deflect/model.hpp"
#include "deflect/peft.hpp"
#include "deflect/random.hpp"
#include "deflect/train.hpp"

namespace deflect {

struct Check {
  std::string name;
  double value = 0;
  double tolerance = 0;
  bool passed = false;
};

inline Check at_most(std::string name, double value, double tolerance) {
  return {std::move(name), value, tolerance, value <= tolerance};
}

inline std::string format_checks(const std::vector<Check>& checks) {
  std::ostringstream os;
  for (const auto& c : checks)
    os << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << std::setprecision(4) << std::scientific << c.value
       << " (tolerance " << c.tolerance << ")\n";
  return os.str();
}

inline bool all_passed(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

namespace detail {

inline Tensor<double> random_matrix(std::size_t r, std::size_t c, double scale, Rng& rng) {
  return Tensor<double>({r, c}, normal_values<double>(r * c, scale, rng));
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace detail

struct AlgebraReport {
  double lora_four_term = 0;   // direct vs four-term (x_P, x_A) expansion
  double lora_expanded = 0;    // direct vs (W_P, dW) expansion of the P-P and A-A terms
  double uatt_four_term = 0;   // combined uAtt scores vs four-term sum
};

/**
 * Worst-case absolute errors of the score identities over `instances` random
 * 64-bit problems (n tokens, width d, `heads` heads, low-rank updates of rank r).
 */
inline AlgebraReport algebra_identities(std::uint64_t seed, std::size_t instances, std::size_t n = 8,
                                        std::size_t d = 16, std::size_t heads = 2, std::size_t r = 4) {
  AlgebraReport rep;
  for (std::size_t i = 0; i < instances; ++i) {
    auto rng = derive_rng(seed, i);
    using detail::random_matrix;
    auto x_p = random_matrix(n, d, 1.0, rng), x_a = random_matrix(n, d, 1.0, rng);
    auto wq = random_matrix(d, d, 0.3, rng), wk = random_matrix(d, d, 0.3, rng);
    auto dwq = matmul(random_matrix(d, r, 0.3, rng), random_matrix(r, d, 0.3, rng));
    auto dwk = matmul(random_matrix(d, r, 0.3, rng), random_matrix(r, d, 0.3, rng));
    auto ent = entanglement_diagnostic(x_p, x_a, wq, wk, dwq, dwk);
    rep.lora_four_term = std::max(rep.lora_four_term, ent.eq7_max_abs_error);
    rep.lora_expanded = std::max(rep.lora_expanded, ent.eq8_max_abs_error);

    AttentionBlockParams<double> block;
    auto lin = [&](double s) {
      return Linear<double>{random_matrix(d, d, s, rng), Tensor<double>({d}, normal_values<double>(d, 0.1, rng)),
                            std::nullopt, std::nullopt};
    };
    block.q = lin(0.3);
    block.k = lin(0.3);
    block.v = lin(0.3);
    block.o = lin(0.3);
    auto proj = [&] {
      UattProjection<double> p;
      p.a = random_matrix(d, r, 0.3, rng);
      p.b = random_matrix(r, d, 0.3, rng);
      return p;
    };
    UattParams<double> added{proj(), proj(), proj()};
    auto combined = uatt_scores(x_p, x_a, block, added, heads);
    auto terms = uatt_score_terms(x_p, x_a, block, added, heads);
    rep.uatt_four_term = std::max(rep.uatt_four_term, detail::max_abs_diff(combined, terms.total()));
  }
  return rep;
}

struct GradientReport {
  std::size_t checked = 0;
  double max_rel_error = 0;
  std::string worst;
};

/**
 * Central finite differences (step h) of the loss on `sample` against reverse-mode
 * gradients, for every trainable scalar (or up to `per_tensor` scalars per tensor).
 * Relative error is |a - n| / max(|a|, |n|, floor).
 */
inline GradientReport gradient_check(Model<double>& model, const Sample& sample, double h = 1e-5,
                                     std::size_t per_tensor = 0, double floor = 1e-6) {
  const int ignore = model.config().task == TaskKind::segmentation ? kIgnoreLabel : -1;
  auto loss_value = [&] {
    NoGradGuard guard;
    return cross_entropy(model.logits(sample.image, sample.id), sample.labels, ignore).item();
  };
  auto& params = model.parameters();
  params.zero_grad();
  cross_entropy(model.logits(sample.image, sample.id), sample.labels, ignore).backward();
  GradientReport rep;
  for (const auto& e : params.entries()) {
    if (e.spec.group == ParamGroup::pretrained) continue;
    auto t = e.tensor;
    const auto analytic = std::vector<double>(t.grad().begin(), t.grad().end());
    const std::size_t count = per_tensor ? std::min(per_tensor, t.size()) : t.size();
    const std::size_t stride = std::max<std::size_t>(1, t.size() / count);
    for (std::size_t k = 0, i = 0; k < count && i < t.size(); ++k, i += stride) {
      const double saved = t.data()[i];
      t.data()[i] = saved + h;
      const double up = loss_value();
      t.data()[i] = saved - h;
      const double down = loss_value();
      t.data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst = e.spec.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  params.zero_grad();
  return rep;
}

/// Moves every trainable tensor away from its initial value (zero-initialised factors included).
template <typename T>
void perturb_trainable(Model<T>& model, double scale, std::uint64_t seed) {
  auto rng = derive_rng(seed, 0x50455254);
  for (const auto& e : model.parameters().entries()) {
    if (e.spec.group == ParamGroup::pretrained) continue;
    auto t = e.tensor;
    for (auto& v : t.data()) v += static_cast<T>(std::normal_distribution<double>(0.0, scale)(rng));
  }
}

struct BudgetRow {
  std::string method;
  std::string rank;
  ParameterCount count;
};

inline std::string rank_label(const std::optional<std::size_t>& r) { return r ? std::to_string(*r) : "dense"; }

/// Tuned fractions of every method, and of DEFLECT/LoRA across ranks {8, 16, 32, dense}.
inline std::vector<BudgetRow> budget_table(const ModelConfig& base) {
  std::vector<BudgetRow> rows;
  auto with = [&](MethodKind kind) {
    auto mc = base;
    mc.method = PeftMethod::defaults(kind);
    mc.method.lora_targets = base.method.lora_targets;
    return mc;
  };
  for (auto kind : {MethodKind::frozen, MethodKind::normtune, MethodKind::bitfit, MethodKind::full}) {
    rows.push_back({std::string(method_name(kind)), "-", count_parameters(model_layout(with(kind)))});
  }
  for (std::optional<std::size_t> r : {std::optional<std::size_t>(8), std::optional<std::size_t>(16),
                                       std::optional<std::size_t>(32), std::optional<std::size_t>()}) {
    auto mc = with(MethodKind::deflect);
    mc.adapter.rank = r;
    rows.push_back({"deflect", rank_label(r), count_parameters(model_layout(mc))});
  }
  for (std::size_t r : {8, 16, 32}) {
    auto mc = with(MethodKind::lora);
    mc.method.lora_rank = r;
    rows.push_back({"lora", std::to_string(r), count_parameters(model_layout(mc))});
  }
  return rows;
}

inline std::string format_budget(const std::vector<BudgetRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "method" << std::setw(7) << "rank" << std::right << std::setw(13) << "theta_P"
     << std::setw(12) << "theta_A" << std::setw(8) << "phi" << std::setw(11) << "tuned %" << "\n";
  for (const auto& r : rows)
    os << std::left << std::setw(10) << r.method << std::setw(7) << r.rank << std::right << std::setw(13)
       << r.count.theta_p << std::setw(12) << r.count.theta_a << std::setw(8) << r.count.phi << std::setw(10)
       << std::fixed << std::setprecision(3) << 100.0 * r.count.tuned_fraction() << "%\n";
  return os.str();
}

/// Sentinel-2-like 13-band sensor.
inline std::vector<std::string> sentinel2_bands() {
  return {"coastal", "blue", "green", "red", "re1", "re2", "re3", "nir", "nir_narrow", "water_vapour", "cirrus",
          "swir1", "swir2"};
}

/// ViT-Large geometry: depth 24, width 1024, 16 heads, 224-pixel images in 16-pixel patches.
inline VitConfig vit_large() {
  VitConfig v;
  v.image_size = 224;
  v.patch_size = 16;
  v.depth = 24;
  v.embed_dim = 1024;
  v.num_heads = 16;
  v.mlp_ratio = 4.0;
  return v;
}

}  // namespace deflect
