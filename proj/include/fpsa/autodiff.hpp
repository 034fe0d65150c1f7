#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fpsa/tensor.hpp"

namespace fpsa {

template <typename T>
struct Node;

// A tensor in the gradient graph. Ops link nodes to their inputs while grad
// recording is enabled; backward() replays the links in reverse.
template <typename T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII switch for graph recording.
struct GradModeGuard {
  bool prev;
  explicit GradModeGuard(bool enable) : prev(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = enable;
  }
  ~GradModeGuard() { detail::grad_mode_flag() = prev; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first accumulation
  std::vector<Var<T>> parents;
  std::function<void(Node<T>&)> backprop;  // pulls this->grad into parents
  bool requires_grad = false;

  Node() { ++live_count(); }
  explicit Node(Tensor<T> v) : value(std::move(v)) { ++live_count(); }
  ~Node() { --live_count(); }
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
  }
  void zero_grad() {
    if (!grad.data.empty()) grad.fill(T(0));
  }

  // Number of live graph nodes; the fixed-point memory contract is asserted
  // against this.
  static std::atomic<int64_t>& live_count() {
    static std::atomic<int64_t> c{0};
    return c;
  }
};

template <typename T>
Var<T> make_var(Tensor<T> value) {
  return std::make_shared<Node<T>>(std::move(value));
}

// Differentiable leaf (parameter or input).
template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
  auto v = make_var(std::move(value));
  v->requires_grad = requires_grad;
  return v;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return make_var(std::move(value));
}

// Wire up a result node. The backprop closure reads self.grad and
// accumulates into self.parents; it is only attached when recording is on
// and some input participates in differentiation.
template <typename T, typename F>
Var<T> attach(Tensor<T> out_value, std::vector<Var<T>> parents, F&& backprop_fn) {
  auto out = make_var(std::move(out_value));
  if (grad_enabled()) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    if (rg) {
      out->requires_grad = true;
      out->parents = std::move(parents);
      out->backprop = std::forward<F>(backprop_fn);
    }
  }
  return out;
}

// Postorder over the differentiable subgraph: parents appear before
// consumers, so the reverse is a valid backward order. Each node is visited
// exactly once; traversal order is fixed by the recorded parent order.
template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  if (!root->requires_grad) return order;
  std::unordered_set<Node<T>*> visited;
  struct Frame {
    Node<T>* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  return order;
}

// Reverse-mode sweep from root with an explicit seed cotangent. Gradients
// accumulate into .grad buffers; fresh interior nodes start at zero, so a
// single sweep over a newly recorded graph needs no zeroing.
template <typename T>
void backward_from(const Var<T>& root, const Tensor<T>& seed) {
  if (!root->value.same_shape(seed))
    throw ShapeError("backward seed shape " + shape_str(seed.shape) +
                     " does not match output shape " + shape_str(root->value.shape));
  if (!root->requires_grad) return;
  auto order = topo_order(root.get());
  root->ensure_grad();
  for (int64_t i = 0; i < seed.numel(); ++i) root->grad[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop && !n->grad.data.empty()) n->backprop(*n);
  }
}

// Reverse-mode gradients of a scalar loss. Leaves not connected to the loss
// keep zero (or empty) gradients rather than erroring; frozen fixed-point
// chunks legitimately detach parts of the graph.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss->value.numel() != 1)
    throw ShapeError("backward expects a scalar loss, got shape " +
                     shape_str(loss->value.shape));
  backward_from(loss, Tensor<T>::ones(loss->value.shape));
}

template <typename T>
Tensor<T> grad_or_zeros(const Var<T>& v) {
  if (v->grad.data.empty()) return Tensor<T>::zeros(v->value.shape);
  return v->grad;
}

// Reusable pullback over one recorded graph. Repeated calls zero the graph's
// grads first, so each pullback yields pure vector-Jacobian products; the
// adjoint solve calls this once per iteration.
template <typename T>
class VjpSession {
 public:
  explicit VjpSession(Var<T> output) : output_(std::move(output)) {
    topo_ = topo_order(output_.get());
  }

  void pullback(const Tensor<T>& seed) {
    if (!output_->value.same_shape(seed))
      throw ShapeError("vjp seed shape " + shape_str(seed.shape) + " does not match " +
                       shape_str(output_->value.shape));
    for (auto* n : topo_) n->zero_grad();
    if (!output_->requires_grad) return;
    output_->ensure_grad();
    for (int64_t i = 0; i < seed.numel(); ++i) output_->grad[i] += seed[i];
    for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backprop && !n->grad.data.empty()) n->backprop(*n);
    }
  }

  const Var<T>& output() const { return output_; }

 private:
  Var<T> output_;
  std::vector<Node<T>*> topo_;
};

// v^T (d step / d z) without materializing the Jacobian. Parameters captured
// by the step keep their previously accumulated gradients untouched.
template <typename T, typename StepFn>
Tensor<T> vjp(StepFn&& step, const Tensor<T>& z, const Tensor<T>& v) {
  auto z_leaf = leaf(z, true);
  Var<T> out;
  {
    GradModeGuard record(true);
    out = step(z_leaf);
  }
  if (!out->value.same_shape(v))
    throw ShapeError("vjp cotangent shape " + shape_str(v.shape) +
                     " does not match step output " + shape_str(out->value.shape));
  VjpSession<T> session(out);
  // Preserve gradients already held by captured leaves (parameters).
  std::vector<std::pair<Node<T>*, Tensor<T>>> saved;
  for (auto* n : topo_order(out.get())) {
    if (n->parents.empty() && n != z_leaf.get() && !n->grad.data.empty())
      saved.emplace_back(n, n->grad);
  }
  session.pullback(v);
  Tensor<T> result = grad_or_zeros(z_leaf);
  for (auto& [n, g] : saved) n->grad = std::move(g);
  return result;
}

}  // namespace fpsa
