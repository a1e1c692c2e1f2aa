#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations in ops.hpp create
// new nodes that remember their inputs and a backward closure; calling
// backward() on a scalar result walks the recorded graph once in reverse
// topological order and accumulates gradients into every node that
// requires them.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace pcn {

#ifdef PCN_USE_FLOAT32
using Real = float;
#else
using Real = double;
#endif

/// Storage for tensor values and gradients; aligned to Eigen's packet size.
using RealVector = std::vector<Real, Eigen::aligned_allocator<Real>>;

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
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

struct Node {
  Shape shape;
  RealVector value;
  RealVector grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Real* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad.data();
  }
};

using NodePtr = std::shared_ptr<Node>;

inline thread_local bool grad_mode = true;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode; }

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, RealVector data) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, Real v) {
    const std::size_t n = numel(shape);
    return from_data(std::move(shape), RealVector(n, v));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), Real(0)); }

  static Tensor scalar(Real v) { return from_data({}, {v}); }

  /// Leaf that participates in differentiation.
  static Tensor parameter(Shape shape, RealVector data) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }

  /// Writable view of a leaf's values (optimizer updates, test setup).
  std::span<Real> mutable_data() {
    if (!node_->inputs.empty() || node_->backward) {
      throw std::logic_error("mutable_data() is only available on leaf tensors");
    }
    return node_->value;
  }

  Real item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape()));
    }
    return node_->value[0];
  }

  Real operator[](std::size_t flat_index) const { return node_->value.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool on) {
    if (!node_->inputs.empty()) {
      throw std::logic_error("requires_grad can only be toggled on leaf tensors");
    }
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  /// Accumulated gradient; zeros if nothing has flowed here yet.
  RealVector grad() const {
    if (node_->grad.empty()) return RealVector(size(), Real(0));
    return node_->grad;
  }

  void zero_grad() { node_->grad.clear(); }

  /// Shares values, drops history.
  Tensor detach() const {
    return from_data(node_->shape, node_->value);
  }

  void backward() const;

  const detail::NodePtr& node() const { return node_; }

  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

namespace detail {

/// Creates an op result. Inputs and the backward closure are kept only when
/// recording is on and at least one input needs gradients.
inline Tensor make_result(Shape shape, RealVector value,
                          std::vector<NodePtr> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_mode) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

/// Reverse topological order of the graph rooted at `root` (root first).
inline std::vector<Node*> reverse_topological(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() requires a scalar, got " + to_string(shape()));
  }
  if (!node_->requires_grad) return;
  node_->grad_buffer()[0] += Real(1);
  for (detail::Node* node : detail::reverse_topological(node_.get())) {
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

}  // namespace pcn
