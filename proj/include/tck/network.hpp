#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tck/graph.hpp"
#include "tck/quantize.hpp"
#include "tck/serialize.hpp"

namespace tck {

enum class LayerKind {
  linear,
  conv3x3,       // stride 1
  conv3x3_s2,    // stride 2
  deconv2,       // transposed 3x3, stride 2
  conv1x1,
  relu,
  global_avg_pool,
  quantize_hard,  // rounding onto the default alphabet; not differentiable
};

const char* layer_kind_name(LayerKind k);

struct LayerDesc {
  LayerKind kind;
  int in = 0;
  int out = 0;
};

// Sequential stack of layers with named parameters "<name>.<index>.weight" /
// "<name>.<index>.bias". A network with zero layers is the identity.
class Network {
 public:
  Network() = default;
  Network(std::string name, std::vector<LayerDesc> layers, std::uint64_t seed);
  // Copies carry parameters and layout but not a recorded tape.
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const std::string& name() const { return name_; }
  const std::vector<LayerDesc>& layers() const { return layers_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }
  bool differentiable() const;

  // Expected channel/feature extent of the input, if the network has one.
  std::optional<int> input_channels() const;
  // Throws ShapeError when `input` cannot flow through the stack.
  Shape output_shape(const Shape& input) const;

  // Records the stack onto an existing graph.
  Var apply(Graph& g, Var x);

  // Standalone evaluation; records a private tape for a subsequent backward.
  Tensor forward(const Tensor& x);
  // Gradients of sum(output * loss_grad) w.r.t. every unfrozen parameter.
  std::map<std::string, Tensor> backward(const Tensor& loss_grad);

 private:
  std::string name_;
  std::vector<LayerDesc> layers_;
  std::vector<Parameter> params_;
  // index into params_ of the weight of each layer, -1 for parameterless ones
  std::vector<int> weight_index_;
  bool frozen_ = false;

  std::unique_ptr<Graph> tape_;
  Var tape_out_;
};

// Parameter values as named arrays, names prefixed with `prefix`.
void append_arrays(NamedArrays& out, const std::vector<Parameter*>& params, const std::string& prefix = "");
// Copies values from `arrays` into `params` by prefixed name; shapes must match.
void assign_arrays(const std::vector<Parameter*>& params, const NamedArrays& arrays, const std::string& prefix = "");
std::vector<Parameter*> parameter_ptrs(Network& net);

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool differentiable = true;
  bool finite = true;
  std::string message;

  double max_rel_error() const;
  bool passed(double tol) const { return differentiable && finite && max_rel_error() < tol; }
};

// Relative error between an analytic and a numeric derivative.
double relative_error(double analytic, double numeric);

// Compares backward() against central differences of L = sum(out * r) for a
// fixed random r. Parameters are restored after each probe.
GradCheckReport grad_check(Network& net, const Tensor& x, double eps, std::uint64_t seed = 7);

// Finite-difference check of an arbitrary scalar objective. `objective` must
// bind every entry of `params` through Graph::param. Up to `probes_per_param`
// randomly chosen entries of each parameter are probed (all when 0).
GradCheckReport grad_check_objective(const std::vector<Parameter*>& params,
                                     const std::function<Var(Graph&)>& objective, double eps,
                                     std::size_t probes_per_param = 0, std::uint64_t seed = 7);

}  // namespace tck
