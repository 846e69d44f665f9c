#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <string>

#include "dcnseg/nn/tensor.hpp"

namespace dcnseg::nn {

/// A learnable tensor with a persistent gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;  // false for batch-norm running statistics

  Parameter() = default;
  Parameter(std::string n, Shape5 s, bool train = true)
      : name(std::move(n)), value(s), grad(s), trainable(train) {}

  void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.f); }
};

/// One value in the forward graph. The backward closure reads this node's
/// grad and accumulates into its parents' grads.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool needs_grad = false;
  Parameter* param = nullptr;
  std::function<void()> backward;

  float* grad_data() {
    if (grad.v.empty()) grad = Tensor(value.shape);
    return grad.data();
  }
  bool has_grad() const { return !grad.v.empty(); }
};

/// Define-by-run tape: nodes are created in forward order and the backward
/// sweep walks them in reverse. A single tape serves one forward/backward
/// pass over one batch.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Node* make(Tensor value, bool needs_grad) {
    nodes_.push_back(std::make_unique<Node>());
    Node* n = nodes_.back().get();
    n->value = std::move(value);
    n->needs_grad = needs_grad && grad_enabled_;
    return n;
  }

  /// Constant input (no gradient tracked).
  Node* constant(Tensor value) { return make(std::move(value), false); }

  /// Leaf backed by a Parameter; the parameter's value is copied in and its
  /// gradient collects this node's gradient after the sweep.
  Node* param_node(Parameter& p) {
    Node* n = make(p.value, p.trainable);
    n->param = &p;
    return n;
  }

  /// Reverse sweep. Seed gradients on loss-facing nodes before calling.
  void backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = it->get();
      if (!n->has_grad()) continue;
      if (n->backward) n->backward();
      if (n->param && n->param->trainable) {
        float* g = n->param->grad.data();
        const float* src = n->grad.data();
        for (std::int64_t i = 0; i < n->grad.shape.count(); ++i) g[i] += src[i];
      }
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  bool grad_enabled_;
  std::deque<std::unique_ptr<Node>> nodes_;
};

/// Accumulates src into the node's gradient buffer.
inline void accumulate_grad(Node* n, const Tensor& src) {
  float* g = n->grad_data();
  for (std::int64_t i = 0; i < src.shape.count(); ++i) g[i] += src.v[size_t(i)];
}

}  // namespace dcnseg::nn
