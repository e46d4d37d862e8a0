#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "lcpr/tensor.hpp"

namespace lcpr::nd {

// Handle to a node on a Tape.
struct Val {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so parents
// always precede children; the backward pass walks the records in exact
// reverse order. One tape per training step; not thread-safe.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  struct Node {
    Tensor<T> value;
    std::vector<int> parents;
    BackwardFn backward;  // empty for leaves and constants
    bool requires_grad = false;
  };

  bool grad_enabled = true;

  // Constant input: never receives a gradient.
  Val constant(Tensor<T> v) { return push_node(std::move(v), {}, nullptr, false); }

  // Differentiable leaf (parameter or probed input).
  Val leaf(Tensor<T> v) { return push_node(std::move(v), {}, nullptr, true); }

  Val push(Tensor<T> value, std::vector<int> parents, BackwardFn backward) {
    bool rg = false;
    for (int p : parents) {
      if (p < 0 || p >= static_cast<int>(nodes_.size()))
        throw DataError("tape: op consumes node " + std::to_string(p) +
                        " that does not precede it");
      rg = rg || nodes_[static_cast<size_t>(p)].requires_grad;
    }
    if (!grad_enabled || !rg) return push_node(std::move(value), std::move(parents), nullptr, rg && grad_enabled);
    return push_node(std::move(value), std::move(parents), std::move(backward), true);
  }

  const Tensor<T>& val(Val v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  bool requires_grad(Val v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }
  size_t size() const { return nodes_.size(); }

  // Accumulate into a parent's gradient; only meaningful during backward().
  void accumulate(int id, const Tensor<T>& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    auto& slot = grads_[static_cast<size_t>(id)];
    if (!slot) {
      slot = g;
      return;
    }
    if (!slot->same_shape(g)) throw DataError("tape: gradient shape mismatch");
    for (size_t i = 0; i < g.data.size(); ++i) slot->data[i] += g.data[i];
  }

  // Propagates from a scalar loss; returns per-node gradients (absent for
  // nodes the loss does not reach and for constants).
  std::vector<std::optional<Tensor<T>>> backward(Val loss) {
    const Tensor<T>& lv = val(loss);
    if (lv.size() != 1) throw DataError("backward: loss must be scalar, got " + shape_str(lv.shape));
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[static_cast<size_t>(loss.id)] = Tensor<T>::full(lv.shape, T(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!grads_[static_cast<size_t>(i)] || !n.backward) continue;
      n.backward(*this, *grads_[static_cast<size_t>(i)]);
    }
    return std::move(grads_);
  }

 private:
  Val push_node(Tensor<T> value, std::vector<int> parents, BackwardFn backward, bool rg) {
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward), rg});
    return Val{static_cast<int>(nodes_.size()) - 1};
  }

  // deque: node references stay valid while later ops append.
  std::deque<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
};

}  // namespace lcpr::nd
