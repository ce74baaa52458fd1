#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "earshot/parameters.hpp"
#include "earshot/tensor.hpp"

namespace earshot {

template <typename Scalar>
class BasicGraph;

/// Handle to a node of a BasicGraph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
class BasicVar {
 public:
  using TensorT = BasicTensor<Scalar>;

  BasicVar() = default;
  BasicVar(BasicGraph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  BasicGraph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const TensorT& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Index extent(Index axis) const { return value().extent(axis); }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  /// Gradient after backward(); zero-filled if the node received none.
  const TensorT& grad() const { return graph_->grad(id_); }

 private:
  BasicGraph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// creation order is a valid topological order for backpropagation.
template <typename Scalar>
class BasicGraph {
 public:
  using TensorT = BasicTensor<Scalar>;
  using VarT = BasicVar<Scalar>;
  using StoreT = BasicParameterStore<Scalar>;
  using Backward = std::function<void(BasicGraph&, const TensorT& out_grad)>;

  explicit BasicGraph(std::uint64_t seed = 0, bool training = false)
      : rng_(seed), training_(training) {}

  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;

  bool training() const noexcept { return training_; }
  void set_training(bool on) noexcept { training_ = on; }
  std::mt19937_64& rng() noexcept { return rng_; }

  VarT constant(TensorT value) { return push(std::move(value), false, {}, "constant"); }

  VarT leaf(TensorT value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, {}, "leaf");
  }

  /// Leaf bound to a stored parameter. Repeated lookups return the same node
  /// so all uses accumulate into one gradient buffer.
  VarT param(const StoreT& store, const std::string& name) {
    const auto key = std::make_pair(&store, store.index_of(name));
    auto it = param_nodes_.find(key);
    if (it != param_nodes_.end()) return VarT(this, it->second);
    VarT v = push(store.at(key.second).value, true, {}, "param");
    param_nodes_.emplace(key, v.id());
    return v;
  }

  /// Appends an op result. `backward` receives the output gradient and
  /// accumulates into the inputs it closed over.
  VarT make(TensorT value, bool requires_grad, Backward backward, const char* op) {
    return push(std::move(value), requires_grad, std::move(backward), op);
  }

  const TensorT& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  const TensorT& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = TensorT(n.value.shape());
    return n.grad;
  }

  /// Mutable gradient buffer of `id`, allocated on first use.
  TensorT& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = TensorT(n.value.shape());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Forward multiply-add count recorded by the dense ops.
  std::uint64_t flops() const noexcept { return flops_; }
  void count_flops(std::uint64_t n) noexcept { flops_ += n; }

  /// Backpropagates from a single-element root.
  void backward(const VarT& root) {
    const TensorT& rv = value(root.id());
    if (rv.size() != 1) {
      throw DimensionError("backward root must hold one element, got shape " +
                           shape_string(rv.shape()));
    }
    grad_buffer(root.id()).data().setConstant(Scalar(1));
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.requires_grad || n.grad.size() == 0) continue;
      if (!n.grad.all_finite()) {
        throw NumericError(std::string("non-finite gradient at op '") + n.op + "'");
      }
      n.backward(*this, n.grad);
    }
  }

  /// Adds the gradients of every parameter node into `store`.
  void accumulate_into(StoreT& store) {
    for (const auto& [key, id] : param_nodes_) {
      if (key.first != &store) continue;
      const Node& n = nodes_[id];
      if (n.grad.size() == 0) continue;
      if (!n.grad.all_finite()) {
        throw NumericError("non-finite gradient for parameter '" +
                           store.at(key.second).name + "'");
      }
      store.at(key.second).grad.data() += n.grad.data();
    }
  }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    Backward backward;
    const char* op = "";
  };

  VarT push(TensorT value, bool requires_grad, Backward backward, const char* op) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
    nodes_.push_back(Node{std::move(value), TensorT(), requires_grad,
                          requires_grad ? std::move(backward) : Backward{}, op});
    return VarT(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // stable references across push
  std::map<std::pair<const StoreT*, std::size_t>, std::size_t> param_nodes_;
  std::mt19937_64 rng_;
  bool training_;
  std::uint64_t flops_ = 0;
};

using Graph = BasicGraph<double>;
using Var = BasicVar<double>;

}  // namespace earshot
