// wsasr: reverse-mode autodiff on an append-only tape. Nodes are created in
// topological order, so backward is a single reverse sweep.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "wsasr/common.hpp"
#include "wsasr/tensor.hpp"

namespace wsasr {

template <typename T>
class Tape;

// Lightweight handle into a tape.
template <typename T>
struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily by backward()
    std::vector<int> parents;
    const char* op;
    // Accumulates into parent grads given this node's grad.
    std::function<void(Tape&, const Node&)> backprop;
  };

  // Forward results are checked for NaN/Inf as they are produced; a non-finite
  // activation is a hard error naming the op. Disable only for profiling.
  bool check_finite = true;
  // When false, no backprop closures are recorded (inference mode).
  bool grad_enabled = true;
  // Dropout is active only while training; see ops.hpp.
  bool training = false;
  uint64_t dropout_seed = 0;

  Value<T> leaf(Tensor<T> v, const char* name = "leaf") {
    return push(std::move(v), {}, name, nullptr);
  }

  Value<T> constant(Tensor<T> v, const char* name = "const") {
    return push(std::move(v), {}, name, nullptr);
  }

  Value<T> push(Tensor<T> v, std::vector<int> parents, const char* op,
                std::function<void(Tape&, const Node&)> backprop) {
    if (check_finite && !v.all_finite()) {
      fail(std::string("non-finite forward value from op '") + op + "'");
    }
    Node n;
    n.value = std::move(v);
    n.parents = std::move(parents);
    n.op = op;
    if (grad_enabled) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Value<T>{int(nodes_.size()) - 1};
  }

  const Tensor<T>& val(Value<T> v) const { return nodes_[size_t(v.id)].value; }
  Tensor<T>& grad(Value<T> v) { return nodes_[size_t(v.id)].grad; }
  const Node& node(Value<T> v) const { return nodes_[size_t(v.id)]; }
  size_t size() const { return nodes_.size(); }

  // Drops nodes created after `mark`. Used by decoding loops to keep the
  // encoder portion alive while reclaiming per-step decoder graphs. Handles
  // into the dropped region become invalid.
  void truncate(size_t mark) {
    require(mark <= nodes_.size(), "truncate: mark beyond tape");
    nodes_.resize(mark);
  }

  uint64_t next_dropout_stream() { return hash_combine(dropout_seed, dropout_counter_++); }
  bool used_dropout() const { return used_dropout_; }
  void mark_dropout_used() { used_dropout_ = true; }

  // Populates grad tensors for every node reachable from `loss`; unreachable
  // nodes keep zero gradients. Visits each node exactly once in reverse
  // creation order.
  void backward(Value<T> loss) {
    require(loss.valid() && loss.id < int(nodes_.size()), "backward: invalid loss node");
    require(nodes_[size_t(loss.id)].value.numel() == 1, "backward: loss node must be scalar");
    require(grad_enabled, "backward: tape was built with gradients disabled");
    for (auto& n : nodes_) n.grad = Tensor<T>::zeros(n.value.shape);
    nodes_[size_t(loss.id)].grad.data[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.grad.all_finite()) {
        fail(std::string("NaN/Inf gradient at op '") + n.op + "' (node " + std::to_string(i) + ")");
      }
      if (n.backprop) n.backprop(*this, n);
    }
  }

 private:
  std::vector<Node> nodes_;
  int dropout_counter_ = 0;
  bool used_dropout_ = false;
};

}  // namespace wsasr
