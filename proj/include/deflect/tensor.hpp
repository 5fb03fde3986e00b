#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "deflect/errors.hpp"

namespace deflect {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/**
 * Dense row-major tensor participating in a reverse-mode autodiff graph.
 *
 * A Tensor is a cheap handle onto a shared node. Copies alias the same
 * storage; use clone() for a deep copy. Operations on tensors that require
 * gradients record a backward closure on the result node, and backward()
 * replays those closures in reverse topological order.
 *
 * Leaf tensors (parameters) keep their gradient buffer between backward
 * passes so that gradients accumulate until zero_grad().
 */
template <typename T>
class Tensor {
 public:
  using value_type = T;

  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::span<T> grad_buffer() {
      if (grad.empty()) grad.assign(data.size(), T(0));
      return grad;
    }
  };

  Tensor() : node_(std::make_shared<Node>()) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero extent");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(data), requires_grad);
  }

  /// Result node of an operation; gradients are tracked when any parent tracks them.
  static Tensor from_op(Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                        std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    bool tracked = detail::no_grad_depth == 0 && std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& p) { return p.requires_grad(); });
    if (tracked) {
      out.node_->requires_grad = true;
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  /// Gradient buffer; all zeros when nothing has been accumulated.
  std::span<const T> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
  }

  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }
  T& at(std::size_t i, std::size_t j) { return node_->data[i * cols() + j]; }

  /// Deep copy without graph history.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->data, requires_grad);
  }
  Tensor detach() const { return clone(false); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  Node& node() const { return *node_; }

  /// Reverse-mode sweep from a scalar (or from an explicit output seed).
  void backward() const {
    if (size() != 1) {
      throw DimensionError("backward() without seed needs a scalar, got " + shape_str(shape()));
    }
    backward(std::vector<T>{T(1)});
  }

  void backward(const std::vector<T>& seed) const {
    if (seed.size() != size()) throw DimensionError("backward seed length mismatch");
    if (!node_->requires_grad) return;
    auto order = topological_order();
    auto g = node_->grad_buffer();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  // Post-order DFS; each reachable tracked node appears exactly once.
  std::vector<Node*> topological_order() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Adds `values` into the gradient of `t` when it is tracked.
template <typename T>
inline void accumulate(typename Tensor<T>::Node& parent, std::span<const T> values) {
  if (!parent.requires_grad) return;
  auto g = parent.grad_buffer();
  for (std::size_t i = 0; i < values.size(); ++i) g[i] += values[i];
}

}  // namespace deflect
