#include "tck/graph.hpp"

#include "tck/errors.hpp"

namespace tck {

const Tensor& Var::value() const { return graph->value(id); }
const Shape& Var::shape() const { return graph->value(id).shape(); }

Var Graph::constant(Tensor t) { return input(std::move(t), false); }

Var Graph::input(Tensor t, bool requires_grad) {
  Node n;
  n.value = std::move(t);
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Parameter& p, bool trainable) {
  Node n;
  n.value = p.value;
  n.requires_grad = trainable && grad_enabled_;
  n.param = n.requires_grad ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  return record(std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Graph::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& p : parents) {
      if (p.graph != this) throw std::logic_error("operand recorded on a different graph");
      if (nodes_[static_cast<std::size_t>(p.id)].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor* Graph::grad(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.has_grad ? &n.grad : nullptr;
}

Tensor& Graph::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var root) {
  Tensor seed(root.shape(), 1.0);
  backward(root, seed);
}

void Graph::backward(Var root, const Tensor& seed) {
  if (!grad_enabled_) throw std::logic_error("backward on a graph recorded without gradients");
  if (seed.shape() != root.shape()) {
    throw ShapeError("backward seed shape " + shape_str(seed.shape()) + " does not match " +
                     shape_str(root.shape()));
  }
  Tensor& g = grad_buffer(root.id);
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
  propagate(root.id);
}

void Graph::propagate(int root) {
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      for (std::size_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += n.grad[i];
    }
  }
}

}  // namespace tck
