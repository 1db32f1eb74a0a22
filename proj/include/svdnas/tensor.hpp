#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "svdnas/ndarray.hpp"

namespace svdnas {

// Differentiable tensor handle. Copies share the underlying node; use clone()
// for an independent leaf. Gradients accumulate into leaves until zero_grad().
template <typename T>
class Tensor {
  struct Node;

 public:
  using Scalar = T;
  // Receives the gradient of the loss with respect to this node's value and
  // routes contributions to the parents through accumulate().
  using BackwardFn = std::function<void(const NdArray<T>& grad_out)>;

  Tensor() : node_(std::make_shared<Node>()) {}
  explicit Tensor(NdArray<T> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(NdArray<T>::scalar(v), requires_grad); }

  // Result of a recorded operation. Records the backward closure only when a
  // parent requires gradients.
  static Tensor from_op(NdArray<T> value, std::vector<Tensor> parents, BackwardFn backward) {
    Tensor out(std::move(value));
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      out.node_->requires_grad = true;
      out.node_->leaf = false;
      out.node_->parents.reserve(parents.size());
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  const NdArray<T>& value() const { return node_->value; }
  // Leaf values are updated in place by optimizers.
  NdArray<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(std::size_t i) const { return node_->value.dim(i); }
  Index numel() const { return node_->value.numel(); }
  T item() const {
    if (numel() != 1) throw ContractError("item(): tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->leaf) throw ContractError("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return node_->has_grad; }
  // Zero-filled when no gradient has been accumulated yet.
  NdArray<T> grad() const { return node_->has_grad ? node_->grad : NdArray<T>(shape()); }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad = NdArray<T>();
  }

  // Adds `g` into this node's gradient buffer.
  void accumulate(const NdArray<T>& g) const { accumulate_into(*node_, g); }

  Tensor detach() const { return Tensor(node_->value, false); }
  Tensor clone() const { return Tensor(node_->value, node_->requires_grad && node_->leaf); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  template <typename U>
  friend void backward(const Tensor<U>& loss);

 private:
  struct Node {
    NdArray<T> value;
    NdArray<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;
  };

  static void accumulate_into(Node& n, const NdArray<T>& g) {
    if (!n.requires_grad) return;
    if (g.numel() != n.value.numel())
      throw DimensionError("gradient of shape " + shape_str(g.shape()) + " for value " + shape_str(n.value.shape()));
    if (!n.has_grad) {
      n.grad = NdArray<T>(n.value.shape(), g.data());
      n.has_grad = true;
    } else {
      n.grad.data() += g.data();
    }
  }

  std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; intermediate buffers are released once the sweep completes.
template <typename T>
void backward(const Tensor<T>& loss) {
  using Node = typename Tensor<T>::Node;
  if (loss.numel() != 1) throw ContractError("backward(): loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS yields a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node_.get(), 0}};
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor<T>::accumulate_into(*loss.node_, NdArray<T>::constant(loss.shape(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->leaf || !n->has_grad) continue;
    NdArray<T> g = std::move(n->grad);
    n->has_grad = false;
    n->grad = NdArray<T>();
    n->backward(g);
  }
}

}  // namespace svdnas
