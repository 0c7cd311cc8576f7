// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "codesearch/tensor.hpp"

namespace codesearch {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

// One vertex of the dynamically built graph. Leaves hold parameters and
// inputs; interior nodes own a closure that pushes `grad` to `inputs`.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }

  Tensor& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
  }
};

// Shared handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  // Zeros when no gradient has been accumulated yet.
  const Tensor& grad() const { return node_->ensure_grad(); }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (has_grad()) node_->grad.fill(0.0);
  }

  double item() const {
    require(value().size() == 1, ErrorKind::kDimension, "item() on non-scalar " + shape_string(shape()));
    return value()[0];
  }

  Node* node() const { return node_.get(); }
  const NodePtr& shared() const { return node_; }

 private:
  NodePtr node_;
};

inline Var constant(Tensor value) { return Var(std::move(value), false); }

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// Disables graph recording on this thread; used by inference paths.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an interior node. The closure is dropped when no input needs a
// gradient, so frozen sub-graphs cost nothing on the way back.
inline Var make_node(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_mode())
    for (const Var& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (const Var& in : inputs) node->inputs.push_back(in.shared());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

// Gradient sink for input `i` of `self`, or nullptr if it needs none.
inline Tensor* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

// Reverse sweep from a scalar root. Interior gradients are reset on every
// call; leaf gradients accumulate, so two calls double every leaf buffer.
inline void backward(const Var& root) {
  require(root.value().size() == 1, ErrorKind::kDimension,
          "backward() needs a scalar root, got " + shape_string(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order)
    if (!n->is_leaf()) n->ensure_grad().fill(0.0);
  if (root.node()->is_leaf()) {
    root.node()->ensure_grad()[0] += 1.0;
    return;
  }
  root.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf()) n->backward(*n);
  }
}

// A named leaf. Frozen parameters never require a gradient, which is what
// keeps them out of the optimizer.
struct Parameter {
  std::string id;
  Var var;

  Parameter() = default;
  Parameter(std::string id_, Tensor value, bool trainable = true)
      : id(std::move(id_)), var(std::move(value), trainable) {}

  bool trainable() const { return var.requires_grad(); }
  void set_trainable(bool on) { var.set_requires_grad(on); }
  const Tensor& value() const { return var.value(); }
  Tensor& mutable_value() { return var.mutable_value(); }
  std::size_t size() const { return var.value().size(); }

  Parameter clone() const { return Parameter(id, var.value(), trainable()); }
};

}  // namespace codesearch
