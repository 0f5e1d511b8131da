#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tck/tensor.hpp"

namespace tck {

// Named trainable array. `grad` accumulates across backward passes until
// cleared by the optimizer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

class Graph;

// Handle to a node recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const;
  bool valid() const { return graph != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so iterating
// them backwards is a valid topological order.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor t);
  Var input(Tensor t, bool requires_grad);
  // Leaf bound to a parameter; gradients are accumulated into p.grad on
  // backward unless `trainable` is false.
  Var param(Parameter& p, bool trainable = true);

  // Appends a computed node. `backward` is dropped when no parent needs grad.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }
  // Gradient of the node, or nullptr when nothing flowed into it.
  const Tensor* grad(int id) const;
  const Tensor* grad(Var v) const { return grad(v.id); }
  // Mutable gradient buffer for accumulation, zero-initialized on first use.
  Tensor& grad_buffer(int id);

  // Seeds d(root)/d(root) with ones (or `seed`) and propagates.
  void backward(Var root);
  void backward(Var root, const Tensor& seed);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  void propagate(int root);

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace tck
