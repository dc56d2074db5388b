#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap shared handle to a Node. Operations (see ops.hpp)
// produce new nodes which, while gradient recording is enabled and at least
// one input requires a gradient, keep their inputs alive and carry a closure
// that pushes the node's gradient back into the inputs.

#include <algorithm>
#include <cmath>
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

#include "cer/error.hpp"

namespace cer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
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
inline thread_local bool grad_enabled = true;
inline thread_local bool deterministic = false;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Deterministic mode selects batch-invariant kernels: a row's result no
/// longer depends on how many other rows share the batch or where it sits.
inline bool deterministic_mode() { return detail::deterministic; }
inline void set_deterministic_mode(bool on) { detail::deterministic = on; }

class DeterministicGuard {
 public:
  explicit DeterministicGuard(bool on = true) : prev_(detail::deterministic) {
    detail::deterministic = on;
  }
  ~DeterministicGuard() { detail::deterministic = prev_; }
  DeterministicGuard(const DeterministicGuard&) = delete;
  DeterministicGuard& operator=(const DeterministicGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return !grad.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  /// A leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(node_->shape, node_->value); }

  /// Back-propagates from a scalar output into every reachable leaf.
  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar output, got shape " + shape_str(shape()));
  }
  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen{node_.get()};
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  while (!stack.empty()) {
    Node<T>* n = stack.back().first;
    std::size_t i = stack.back().second;
    if (i < n->parents.size()) {
      ++stack.back().second;
      Node<T>* p = n->parents[i].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward_fn && n.has_grad()) n.backward_fn(n);
  }
}

/// Creates an operation result, attaching the backward closure only when
/// recording is on and some input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor<T>* in : inputs) {
      if (in && in->defined() && in->requires_grad()) needs = true;
    }
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor<T>* in : inputs) {
      node->parents.push_back(in && in->defined() ? in->node() : std::make_shared<Node<T>>());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace cer
