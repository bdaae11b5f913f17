#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "condvc/tensor.hpp"

namespace condvc {

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph recording for the enclosing scope (eval-mode coding, metrics).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad{false};
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.empty() && value.size() > 0) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// Handle to a node in the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  bool has_grad() const { return !node_->grad.empty(); }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  T item() const { return node_->value.item(); }

  // Returns a graph-free copy of the value.
  Var detach() const { return Var(node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

// Builds a result node. `fn` receives the result node and must push gradient
// into the parents; it is only recorded when some parent requires grad.
template <typename T, typename Fn>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> parents, Fn&& fn) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  Node<T>* self = out.node();
  self->requires_grad = true;
  for (const auto& p : parents) self->parents.push_back(p.node_ptr());
  self->backward_fn = [self, f = std::forward<Fn>(fn)]() { f(*self); };
  return out;
}

template <typename T, typename Fn>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& parents, Fn&& fn) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  Node<T>* self = out.node();
  self->requires_grad = true;
  for (const auto& p : parents) self->parents.push_back(p.node_ptr());
  self->backward_fn = [self, f = std::forward<Fn>(fn)]() { f(*self); };
  return out;
}

// Reverse-mode sweep from a scalar root. Gradients accumulate into every
// reachable node with requires_grad; intermediate grads are released after use.
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() needs a scalar root, got " + root.shape().str());
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) {
      n->backward_fn();
      // Interior nodes no longer need their gradient.
      n->grad = Tensor<T>();
    }
  }
}

}  // namespace condvc
