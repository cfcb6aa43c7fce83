#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "diffseg/tensor.hpp"

namespace diffseg {

// Reverse-mode tape node. Graphs are built per training step and dropped
// after backward(); parameters enter as leaves whose grad tensor aliases the
// persistent parameter gradient, so accumulation lands where the optimizer
// reads it.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily (or aliased, for parameter leaves)
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  Tensor<T>& ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

template <typename T>
class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Value constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Value(std::move(n));
  }

  // Gradient-requiring leaf whose grad aliases `grad_sink`.
  static Value leaf(Tensor<T> v, Tensor<T> grad_sink) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->grad = std::move(grad_sink);
    n->requires_grad = true;
    return Value(std::move(n));
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor<T>& val() const { return n_->value; }
  Tensor<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return n_; }

  // Value detached from the graph.
  Value detach() const { return constant(n_->value); }

  double scalar() const {
    require(n_->value.numel() == 1, "value: scalar() on non-scalar");
    return static_cast<double>(n_->value[0]);
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

// Builds an op node: output requires grad iff any parent does; otherwise the
// node is a plain constant and the graph behind it is dropped.
template <typename T>
Value<T> make_op(Tensor<T> out, std::vector<Value<T>> parents,
                 std::function<void(Node<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(out);
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Value<T>(std::move(n));
}

// Reverse accumulation from a scalar root. Iterative post-order topological
// sort; each node's backprop runs once, after all its consumers.
template <typename T>
void backward(const Value<T>& root) {
  require(root.defined() && root.val().numel() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  struct Frame {
    Node<T>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node().get(), 0});
  visited.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node<T>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop && n->grad.defined()) n->backprop(*n);
  }
}

}  // namespace diffseg
