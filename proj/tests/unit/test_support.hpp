#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "deflect/dataset.hpp"
#include "deflect/model.hpp"
#include "deflect/ops.hpp"
#include "deflect/random.hpp"
#include "deflect/tensor.hpp"
#include "deflect/vit.hpp"

namespace deflect::testing {

inline Tensord random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0, bool grad = true) {
  auto rng = derive_rng(seed, 77);
  return Tensord(shape, normal_values<double>(numel(shape), scale, rng), grad);
}

/**
 * Largest relative error between reverse-mode and central-difference
 * gradients of sum(f(inputs) * W) for a fixed random W, over every scalar of the
 * inputs that require gradients.
 * Relative error is |a - n| / max(|a|, |n|, floor).
 */
inline double fd_max_rel_error(std::vector<Tensord> inputs,
                               const std::function<Tensord(const std::vector<Tensord>&)>& f,
                               std::uint64_t seed = 1, double h = 1e-5, double floor = 1e-6) {
  const auto probe = f(inputs);
  const auto w = random_tensor(probe.shape(), seed + 1000, 1.0, false);
  auto loss = [&] { return sum(mul(f(inputs), w)); };
  for (auto& t : inputs) t.zero_grad();
  loss().backward();
  double worst = 0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + h;
      const double up = loss().item();
      t.data()[i] = saved - h;
      const double down = loss().item();
      t.data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - numeric) /
                                  std::max({std::abs(analytic[i]), std::abs(numeric), floor}));
    }
  }
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline VitConfig small_vit(std::size_t depth = 3, std::size_t d = 8, std::size_t heads = 2) {
  VitConfig v;
  v.image_size = 16;
  v.patch_size = 8;
  v.depth = depth;
  v.embed_dim = d;
  v.num_heads = heads;
  return v;
}

template <typename T = double>
Encoder<T> random_encoder(const VitConfig& cfg, std::uint64_t seed) {
  ParameterSet<T> ps;
  auto rng = derive_rng(seed, 3);
  return make_encoder(ps, cfg, rng);
}

inline MultispectralImage random_image(std::size_t size, std::vector<std::string> bands, std::uint64_t seed) {
  MultispectralImage img(bands.size(), size, size, bands);
  auto rng = derive_rng(seed, 5);
  img.data = uniform_values<float>(img.data.size(), 0.05, 0.6, rng);
  return img;
}

inline std::vector<std::string> six_bands() { return {"red", "green", "blue", "nir", "swir1", "swir2"}; }

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p * n + q]) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * a[p * n + q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
  return ev;
}

/// Descending singular values via the eigenvalues of W^T W.
inline std::vector<double> singular_values(const Tensord& w) {
  const std::size_t n = w.cols();
  auto gram = matmul(transpose(w), w);
  auto ev = symmetric_eigenvalues(gram.values(), n);
  for (auto& v : ev) v = std::sqrt(std::max(v, 0.0));
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

/// d=16, n=4, depth 4, layers {2, 4}, rank 2, three classes on 16-pixel six-band images.
inline ModelConfig tiny_config(MethodKind kind, TaskKind task = TaskKind::classification) {
  ModelConfig mc;
  mc.vit = small_vit(4, 16, 2);
  mc.method = PeftMethod::defaults(kind);
  mc.adapter.layers = {2, 4};
  mc.adapter.rank = 2;
  mc.method.lora_rank = 2;
  mc.num_classes = 3;
  mc.task = task;
  return mc;
}

inline Dataset tiny_dataset(std::uint64_t seed, std::size_t train = 12, TaskKind task = TaskKind::classification) {
  SyntheticTaskSpec spec;
  spec.task = task;
  spec.image_size = 16;
  spec.num_classes = 3;
  spec.ambiguous_classes = 2;
  spec.train_size = train;
  spec.val_size = 6;
  spec.test_size = 6;
  return generate_dataset(spec, seed);
}

}  // namespace deflect::testing
