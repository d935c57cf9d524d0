#pragma once

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mlcn/errors.hpp"

namespace mlcn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <std::floating_point T>
struct Node;

/// Receives the output gradient and one (possibly empty) gradient span per
/// parent; empty spans mark parents that do not require a gradient.
template <std::floating_point T>
using BackwardFn =
    std::function<void(const Node<T>& self, std::span<const T> grad_out, std::span<std::span<T>> grad_in)>;

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> values;
  bool requires_grad = false;
  std::uint64_t id = next_node_id();
  const char* op = "leaf";
  std::vector<std::shared_ptr<const Node>> parents;
  BackwardFn<T> backward;
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables recording of the differentiation graph on this thread for its
/// lifetime. Used for evaluation passes.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <std::floating_point T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

/// Dense row-major tensor. Values are immutable once constructed; the node
/// optionally records the operation that produced it for reverse-mode
/// differentiation.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<const detail::Node<T>>;

  Tensor() : Tensor(Shape{1}, std::vector<T>{T(0)}) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_size(shape) != values.size()) {
      throw ShapeError("shape " + shape_str(shape) + " does not match buffer of " +
                       std::to_string(values.size()));
    }
    check_finite<T>(values, "tensor construction");
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    node_ = std::move(n);
  }

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    return Tensor(s, std::vector<T>(shape_size(s), T(0)), requires_grad);
  }
  static Tensor full(const Shape& s, T v, bool requires_grad = false) {
    return Tensor(s, std::vector<T>(shape_size(s), v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, {v}, requires_grad); }
  static Tensor vector(std::vector<T> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }

  /// Builds an op output. Records parents and the backward closure only when
  /// grad mode is on and some parent requires a gradient.
  static Tensor from_op(Shape shape, std::vector<T> values, const char* op, std::vector<Tensor> parents,
                        detail::BackwardFn<T> backward) {
    check_finite<T>(values, op);
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->op = op;
    assert(shape_size(n->shape) == n->values.size());
    const bool needs = grad_enabled() && std::any_of(parents.begin(), parents.end(),
                                                     [](const Tensor& p) { return p.requires_grad(); });
    if (needs) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node_);
      n->backward = std::move(backward);
    }
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  std::span<const T> values() const { return node_->values; }
  T operator[](std::size_t i) const { return node_->values[i]; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->values[0];
  }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->id; }
  const NodePtr& node() const { return node_; }

  /// Same values, no differentiation record.
  Tensor detach() const { return Tensor(shape(), node_->values, false); }
  /// Fresh leaf with the same values that requires a gradient.
  Tensor as_parameter() const { return Tensor(shape(), node_->values, true); }

 private:
  NodePtr node_;
};

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

/// Reverse-mode gradients for every node reachable from a loss.
template <std::floating_point T>
class Gradients {
 public:
  bool contains(const Tensor<T>& t) const { return grads_.count(t.id()) != 0; }

  /// Gradient of the loss w.r.t. `t`; zeros when `t` did not contribute.
  std::vector<T> of(const Tensor<T>& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return std::vector<T>(t.size(), T(0));
    return it->second;
  }

  std::unordered_map<std::uint64_t, std::vector<T>>& raw() { return grads_; }

 private:
  std::unordered_map<std::uint64_t, std::vector<T>> grads_;
};

/// Back-propagates from a scalar loss. Nodes are processed in descending
/// creation order, which is a topological order because a node can only
/// reference parents created before it; accumulation order is therefore
/// fixed and runs are bit-reproducible.
template <std::floating_point T>
Gradients<T> backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw PreconditionError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  Gradients<T> out;
  if (!loss.requires_grad()) return out;

  using NodeT = detail::Node<T>;
  std::vector<const NodeT*> order;
  std::unordered_set<const NodeT*> seen;
  std::vector<const NodeT*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    const NodeT* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      assert(p->id < n->id && "differentiation record must be acyclic");
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const NodeT* a, const NodeT* b) { return a->id > b->id; });

  auto& g = out.raw();
  g[loss.id()] = std::vector<T>{T(1)};
  std::vector<std::span<T>> spans;
  for (const NodeT* n : order) {
    if (n->parents.empty() || !n->backward) continue;
    auto it = g.find(n->id);
    if (it == g.end()) continue;
    const std::vector<T>& grad_out = it->second;
    spans.assign(n->parents.size(), std::span<T>{});
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const auto& p = n->parents[i];
      if (!p->requires_grad) continue;
      auto& buf = g[p->id];
      if (buf.empty()) buf.assign(p->values.size(), T(0));
      spans[i] = buf;
    }
    // Map references are stable across rehash, so the spans stay valid.
    n->backward(*n, grad_out, spans);
  }
  return out;
}

}  // namespace mlcn
