#pragma once

// Differentiable primitives over Tensor<T>. Every operation validates shapes
// eagerly and records a backward closure only when an input is tracked.
// Broadcasting is limited to the row-vector cases the model needs
// (add_bias, mul_rows).

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "deflect/errors.hpp"
#include "deflect/tensor.hpp"

namespace deflect {

namespace detail {

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// c[m×n] += a[m×k] * b[k×n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×k] += g[m×n] * b[k×n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k×n] += a[m×k]^T * g[m×n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](auto& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::gemm_nt(self.grad.data(), pb.data.data(), pa.grad_buffer().data(), m, n, k);
    if (pb.requires_grad) detail::gemm_tn(pa.data.data(), self.grad.data(), pb.grad_buffer().data(), m, k, n);
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return Tensor<T>::from_op({n, m}, std::move(out), {a}, [m, n](auto& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& self) {
    for (auto& p : self.parents) accumulate<T>(*p, self.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& self) {
    accumulate<T>(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      auto g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "div");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.data[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.data[i] / pb.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [s](auto& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a},
                            [](auto& self) { accumulate<T>(*self.parents[0], self.grad); });
}

/// max(a, floor) elementwise; the gradient is routed only where a > floor.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], floor);
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [floor](auto& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.data[i] > floor) g[i] += self.grad[i];
  });
}

/// a[m×n] + b[n] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (b.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(a.shape()));
  }
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + b.data()[j];
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, n](auto& self) {
    accumulate<T>(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      auto g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

/// Row i of a[n×d] scaled by s[i].
template <typename T>
Tensor<T> mul_rows(const Tensor<T>& a, const Tensor<T>& s) {
  detail::require_rank(a.shape(), 2, "mul_rows");
  const std::size_t n = a.rows(), d = a.cols();
  if (s.size() != n) throw DimensionError("mul_rows: scale " + shape_str(s.shape()) + " vs " + shape_str(a.shape()));
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.data()[i * d + j] * s.data()[i];
  return Tensor<T>::from_op({n, d}, std::move(out), {a, s}, [n, d](auto& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i * d + j] * ps.data[i];
    }
    if (ps.requires_grad) {
      auto g = ps.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += self.grad[i * d + j] * pa.data[i * d + j];
        g[i] += acc;
      }
    }
  });
}

/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [inv_sqrt2](auto& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_buffer();
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = p.data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = a.data().data() + i * n;
    T mx = row[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN in row " + std::to_string(i));
      mx = std::max(mx, row[j]);
    }
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      total += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return Tensor<T>::from_op({m, n}, std::move(out), {a}, [m, n](auto& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const T* y = self.data.data() + i * n;
      const T* gy = self.grad.data() + i * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

/// Normalises each row of a[n×d] to zero mean / unit variance, then applies gamma, beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  detail::require_rank(a.shape(), 2, "layer_norm");
  const std::size_t n = a.rows(), d = a.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + ", " +
                         shape_str(beta.shape()) + " vs input " + shape_str(a.shape()));
  }
  if (!(eps > T(0))) throw PreconditionError("layer_norm: eps must be positive");
  std::vector<T> out(n * d);
  // xhat and 1/sigma are kept for the backward pass.
  auto xhat = std::make_shared<std::vector<T>>(n * d);
  auto inv_std = std::make_shared<std::vector<T>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = a.data().data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (row[j] - mean) * is;
      (*xhat)[i * d + j] = xh;
      out[i * d + j] = xh * gamma.data()[j] + beta.data()[j];
    }
  }
  return Tensor<T>::from_op({n, d}, std::move(out), {a, gamma, beta}, [n, d, xhat, inv_std](auto& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    if (pg.requires_grad || pb.requires_grad) {
      auto gg = pg.requires_grad ? pg.grad_buffer() : std::span<T>{};
      auto gb = pb.requires_grad ? pb.grad_buffer() : std::span<T>{};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          const T gy = self.grad[i * d + j];
          if (!gg.empty()) gg[j] += gy * (*xhat)[i * d + j];
          if (!gb.empty()) gb[j] += gy;
        }
    }
    if (px.requires_grad) {
      auto gx = px.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        T sum_g = 0, sum_gx = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const T gh = self.grad[i * d + j] * pg.data[j];
          sum_g += gh;
          sum_gx += gh * (*xhat)[i * d + j];
        }
        const T is = (*inv_std)[i];
        for (std::size_t j = 0; j < d; ++j) {
          const T gh = self.grad[i * d + j] * pg.data[j];
          gx[i * d + j] += is * (gh - sum_g / T(d) - (*xhat)[i * d + j] * sum_gx / T(d));
        }
      }
    }
  });
}

/// Euclidean norm of each row of a[n×d]. Zero rows give 0 and a zero gradient.
template <typename T>
Tensor<T> l2_norm_rows(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "l2_norm_rows");
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += a.data()[i * d + j] * a.data()[i * d + j];
    out[i] = std::sqrt(acc);
  }
  return Tensor<T>::from_op({n}, std::move(out), {a}, [n, d](auto& self) {
    auto& p = *self.parents[0];
    auto g = p.grad_buffer();
    const T tiny = std::numeric_limits<T>::min();
    for (std::size_t i = 0; i < n; ++i) {
      const T norm = std::max(self.data[i], tiny);
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i] * p.data[i * d + j] / norm;
    }
  });
}

/// Mean over rows: a[n×d] -> [d].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "mean_rows");
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<T> out(d, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += a.data()[i * d + j];
  for (auto& v : out) v /= T(n);
  return Tensor<T>::from_op({d}, std::move(out), {a}, [n, d](auto& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[j] / T(n);
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (auto v : a.data()) acc += v;
  return Tensor<T>::from_op({1}, {acc}, {a}, [](auto& self) {
    auto g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.size()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return Tensor<T>::from_op(std::move(shape), a.values(), {a},
                            [](auto& self) { accumulate<T>(*self.parents[0], self.grad); });
}

/// Columns [start, start + count) of a[m×n].
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  detail::require_rank(a.shape(), 2, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (count == 0 || start + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_str(a.shape()));
  }
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.data()[i * n + start + j];
  return Tensor<T>::from_op({m, count}, std::move(out), {a}, [m, n, start, count](auto& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + start + j] += self.grad[i * count + j];
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> offsets;
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
    offsets.push_back(n);
    n += p.cols();
  }
  std::vector<T> out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t c = parts[k].cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * n + offsets[k] + j] = parts[k].data()[i * c + j];
  }
  return Tensor<T>::from_op({m, n}, std::move(out), parts, [m, n, offsets](auto& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto g = p.grad_buffer();
      const std::size_t c = p.shape[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * n + offsets[k] + j];
    }
  });
}

/// Stacks row vectors / matrices with equal column counts.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].shape().back();
  std::size_t m = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.shape().back() != n) throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()));
    m += p.size() / n;
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor<T>::from_op({m, n}, std::move(out), parts, [](auto& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t len = p->data.size();
      if (p->requires_grad) {
        auto g = p->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

/// out[i] = a[index[i]] for rows.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& index) {
  detail::require_rank(a.shape(), 2, "gather_rows");
  const std::size_t n = a.cols();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  std::vector<T> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw DimensionError("gather_rows: index out of range");
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[index[i] * n + j];
  }
  return Tensor<T>::from_op({index.size(), n}, std::move(out), {a}, [index, n](auto& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[index[i] * n + j] += self.grad[i * n + j];
  });
}

/// Mean softmax cross-entropy over rows of logits[m×K]; rows labelled
/// `ignore_index` contribute neither loss nor gradient.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, int ignore_index = -1) {
  detail::require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t m = logits.rows(), k = logits.cols();
  if (labels.size() != m) throw DimensionError("cross_entropy: label count differs from logit rows");
  auto probs = std::make_shared<std::vector<T>>(m * k);
  T loss = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = logits.data().data() + i * k;
    T mx = row[0];
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, row[j]);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / total;
    if (labels[i] == ignore_index) continue;
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw PreconditionError("cross_entropy: label " + std::to_string(labels[i]) + " outside class range");
    }
    loss += -(row[labels[i]] - mx - std::log(total));
    ++counted;
  }
  const T denom = counted ? T(counted) : T(1);
  return Tensor<T>::from_op({1}, {loss / denom}, {logits}, [probs, labels, ignore_index, m, k, denom](auto& self) {
    auto g = self.parents[0]->grad_buffer();
    const T up = self.grad[0] / denom;
    for (std::size_t i = 0; i < m; ++i) {
      if (labels[i] == ignore_index) continue;
      for (std::size_t j = 0; j < k; ++j) {
        const T target = static_cast<std::size_t>(labels[i]) == j ? T(1) : T(0);
        g[i * k + j] += up * ((*probs)[i * k + j] - target);
      }
    }
  });
}

}  // namespace deflect
