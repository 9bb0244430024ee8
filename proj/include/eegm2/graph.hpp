#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "eegm2/tensor.hpp"

namespace eegm2 {

namespace detail {
inline uint64_t next_node_id() {
  thread_local uint64_t counter = 0;
  return ++counter;
}
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables gradient recording in the current scope. Ops built under the
/// guard produce unlinked values, so intermediates free as soon as they go
/// out of scope.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse-mode autodiff over an implicit DAG. Each Var owns a shared Node
// holding the forward value, the accumulated gradient, links to parents and
// a pull-back closure. Node ids increase in creation order, which is a
// topological order of the DAG; backward() replays reachable nodes in
// descending id order, i.e. exact reverse topological order.
template <class S>
struct Node {
  uint64_t id = detail::next_node_id();
  Tensor<S> value;
  Tensor<S> grad;  // undefined until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor<S>& g) {
    if (!grad.defined()) {
      grad = Tensor<S>::zeros(value.shape());
    }
    const S* src = g.data();
    S* dst = grad.data();
    for (int64_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
  }
};

template <class S>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<S> value, bool requires_grad = false)
      : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var leaf(Tensor<S> value) { return Var(std::move(value), true); }
  static Var constant(Tensor<S> value) { return Var(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient; exact zeros when the parameter was never used.
  Tensor<S> grad() const {
    if (node_->grad.defined()) return node_->grad;
    return Tensor<S>::zeros(node_->value.shape());
  }

  void zero_grad() { node_->grad = Tensor<S>(); }

  std::shared_ptr<Node<S>> node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <class S>
Var<S> make_op_node(Tensor<S> value, std::vector<std::shared_ptr<Node<S>>> parents,
                    std::function<void(Node<S>&)> backward) {
  bool rg = false;
  if (grad_enabled()) {
    for (const auto& p : parents) rg = rg || p->requires_grad;
  }
  Var<S> out(std::move(value), rg);
  if (rg) {
    out.node()->parents = std::move(parents);
    out.node()->backward = std::move(backward);
  }
  return out;
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar root. Gradients add into
/// every reachable node that requires them; leaves keep their gradients
/// until zero_grad().
template <class S>
void backward(const Var<S>& root) {
  if (root.value().numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " +
                     shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<Node<S>*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });

  root.node()->accumulate(Tensor<S>::full(root.shape(), S(1)));
  for (Node<S>* n : order) {
    if (n->backward && n->grad.defined()) n->backward(*n);
  }
}

}  // namespace eegm2
