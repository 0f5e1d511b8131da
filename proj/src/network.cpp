#include "tck/network.hpp"

#include <cmath>
#include <memory>

#include "tck/errors.hpp"
#include "tck/ops.hpp"
#include "tck/rng.hpp"

namespace tck {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::linear: return "linear";
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::conv3x3_s2: return "conv3x3_s2";
    case LayerKind::deconv2: return "deconv2";
    case LayerKind::conv1x1: return "conv1x1";
    case LayerKind::relu: return "relu";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::quantize_hard: return "quantize_hard";
  }
  return "?";
}

namespace {

bool has_weights(LayerKind k) {
  return k == LayerKind::linear || k == LayerKind::conv3x3 || k == LayerKind::conv3x3_s2 ||
         k == LayerKind::deconv2 || k == LayerKind::conv1x1;
}

Shape weight_shape(const LayerDesc& l) {
  switch (l.kind) {
    case LayerKind::linear: return {l.out, l.in};
    case LayerKind::conv3x3:
    case LayerKind::conv3x3_s2: return {l.out, l.in, 3, 3};
    case LayerKind::deconv2: return {l.in, l.out, 3, 3};
    case LayerKind::conv1x1: return {l.out, l.in, 1, 1};
    default: return {};
  }
}

int fan_in(const LayerDesc& l) {
  switch (l.kind) {
    case LayerKind::conv3x3:
    case LayerKind::conv3x3_s2:
    case LayerKind::deconv2: return l.in * 9;
    default: return l.in;
  }
}

int fan_out(const LayerDesc& l) {
  switch (l.kind) {
    case LayerKind::conv3x3:
    case LayerKind::conv3x3_s2:
    case LayerKind::deconv2: return l.out * 9;
    default: return l.out;
  }
}

}  // namespace

Network::Network(std::string name, std::vector<LayerDesc> layers, std::uint64_t seed)
    : name_(std::move(name)), layers_(std::move(layers)) {
  Rng rng(seed);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerDesc& l = layers_[i];
    if (!has_weights(l.kind)) {
      weight_index_.push_back(-1);
      continue;
    }
    if (l.in < 1 || l.out < 1) throw ShapeError(name_ + ": layer " + std::to_string(i) + " has empty extents");
    const double a = std::sqrt(6.0 / (fan_in(l) + fan_out(l)));
    Parameter w{name_ + "." + std::to_string(i) + ".weight", Tensor(weight_shape(l)), {}};
    for (double& v : w.value.storage()) v = rng.uniform(-a, a);
    Parameter b{name_ + "." + std::to_string(i) + ".bias", Tensor({l.out}, 0.0), {}};
    weight_index_.push_back(static_cast<int>(params_.size()));
    params_.push_back(std::move(w));
    params_.push_back(std::move(b));
  }
}

Network::Network(const Network& other)
    : name_(other.name_),
      layers_(other.layers_),
      params_(other.params_),
      weight_index_(other.weight_index_),
      frozen_(other.frozen_) {}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    name_ = other.name_;
    layers_ = other.layers_;
    params_ = other.params_;
    weight_index_ = other.weight_index_;
    frozen_ = other.frozen_;
    tape_.reset();
    tape_out_ = Var{};
  }
  return *this;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

bool Network::differentiable() const {
  for (const auto& l : layers_) {
    if (l.kind == LayerKind::quantize_hard) return false;
  }
  return true;
}

std::optional<int> Network::input_channels() const {
  for (const auto& l : layers_) {
    if (has_weights(l.kind)) return l.in;
  }
  return std::nullopt;
}

Shape Network::output_shape(const Shape& input) const {
  Shape s = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerDesc& l = layers_[i];
    const std::string where = name_ + " layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::linear:
        if (s.size() != 2 || s[1] != l.in) {
          throw ShapeError(where + " expects (N," + std::to_string(l.in) + "), got " + shape_str(s));
        }
        s[1] = l.out;
        break;
      case LayerKind::conv3x3:
      case LayerKind::conv1x1:
      case LayerKind::conv3x3_s2:
      case LayerKind::deconv2:
        if (s.size() != 4 || s[1] != l.in) {
          throw ShapeError(where + " expects (N," + std::to_string(l.in) + ",H,W), got " + shape_str(s));
        }
        s[1] = l.out;
        if (l.kind == LayerKind::conv3x3_s2) {
          s[2] = (s[2] - 1) / 2 + 1;
          s[3] = (s[3] - 1) / 2 + 1;
        } else if (l.kind == LayerKind::deconv2) {
          s[2] *= 2;
          s[3] *= 2;
        }
        break;
      case LayerKind::global_avg_pool:
        if (s.size() != 4) throw ShapeError(where + " expects a 4-d input, got " + shape_str(s));
        s = {s[0], s[1]};
        break;
      case LayerKind::relu:
      case LayerKind::quantize_hard:
        break;
    }
  }
  return s;
}

Var Network::apply(Graph& g, Var x) {
  output_shape(x.shape());
  const bool trainable = !frozen_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerDesc& l = layers_[i];
    const int wi = weight_index_[i];
    auto weight = [&] { return g.param(params_[static_cast<std::size_t>(wi)], trainable); };
    auto bias = [&] { return g.param(params_[static_cast<std::size_t>(wi) + 1], trainable); };
    switch (l.kind) {
      case LayerKind::linear: x = ops::linear(x, weight(), bias()); break;
      case LayerKind::conv3x3:
      case LayerKind::conv1x1: x = ops::conv2d(x, weight(), bias(), 1); break;
      case LayerKind::conv3x3_s2: x = ops::conv2d(x, weight(), bias(), 2); break;
      case LayerKind::deconv2: x = ops::deconv2d(x, weight(), bias()); break;
      case LayerKind::relu: x = ops::relu(x); break;
      case LayerKind::global_avg_pool: x = ops::global_avg_pool(x); break;
      case LayerKind::quantize_hard: {
        const QuantSpec spec;
        x = ops::round_hard(x, spec.t_min, spec.t_max);
        break;
      }
    }
  }
  return x;
}

Tensor Network::forward(const Tensor& x) {
  tape_ = std::make_unique<Graph>(true);
  Var in = tape_->constant(x);
  tape_out_ = apply(*tape_, in);
  return tape_out_.value();
}

std::map<std::string, Tensor> Network::backward(const Tensor& loss_grad) {
  if (!tape_) throw std::logic_error(name_ + ": backward called without a recorded forward pass");
  std::map<std::string, Tensor> out;
  if (frozen_) {
    tape_.reset();
    return out;
  }
  for (auto& p : params_) p.zero_grad();
  tape_->backward(tape_out_, loss_grad);
  for (auto& p : params_) out.emplace(p.name, p.grad);
  tape_.reset();
  return out;
}

void append_arrays(NamedArrays& out, const std::vector<Parameter*>& params, const std::string& prefix) {
  for (const Parameter* p : params) out.emplace_back(prefix + p->name, p->value);
}

void assign_arrays(const std::vector<Parameter*>& params, const NamedArrays& arrays, const std::string& prefix) {
  for (Parameter* p : params) {
    const Tensor& t = find_array(arrays, prefix + p->name);
    if (t.shape() != p->value.shape()) {
      throw CorruptionError("array " + prefix + p->name + " has shape " + shape_str(t.shape()) + ", expected " +
                            shape_str(p->value.shape()));
    }
    p->value = t;
  }
}

std::vector<Parameter*> parameter_ptrs(Network& net) {
  std::vector<Parameter*> out;
  for (Parameter& p : net.parameters()) out.push_back(&p);
  return out;
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(Network& net, const Tensor& x, double eps, std::uint64_t seed) {
  if (!(eps > 0.0)) throw DomainError("grad_check: eps must be positive");
  if (net.parameter_count() > 10000) throw DomainError("grad_check: network exceeds 10^4 parameters");
  GradCheckReport report;
  if (!net.differentiable()) {
    report.differentiable = false;
    report.message = net.name() + " contains a hard quantizer; gradient is zero almost everywhere";
    return report;
  }
  const bool was_frozen = net.frozen();
  net.unfreeze();
  Tensor out = net.forward(x);
  if (!out.all_finite()) {
    report.finite = false;
    report.message = "non-finite forward output";
    net.backward(Tensor(out.shape(), 0.0));
    if (was_frozen) net.freeze();
    return report;
  }
  Rng rng(seed);
  Tensor weights(out.shape());
  for (double& v : weights.storage()) v = rng.uniform(-1.0, 1.0);
  auto loss = [&](const Tensor& o) {
    double s = 0.0;
    for (std::size_t i = 0; i < o.numel(); ++i) s += o[i] * weights[i];
    return s;
  };
  const auto grads = net.backward(weights);
  for (Parameter& p : net.parameters()) {
    GradCheckEntry e{p.name, 0.0};
    const Tensor& analytic = grads.at(p.name);
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      Graph g1(false);
      const double lp = loss(net.apply(g1, g1.constant(x)).value());
      p.value[i] = saved - eps;
      Graph g2(false);
      const double lm = loss(net.apply(g2, g2.constant(x)).value());
      p.value[i] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        report.finite = false;
        report.message = "non-finite probe at " + p.name;
        continue;
      }
      e.max_rel_error = std::max(e.max_rel_error, relative_error(analytic[i], (lp - lm) / (2.0 * eps)));
    }
    report.entries.push_back(e);
  }
  if (was_frozen) net.freeze();
  return report;
}

GradCheckReport grad_check_objective(const std::vector<Parameter*>& params,
                                     const std::function<Var(Graph&)>& objective, double eps,
                                     std::size_t probes_per_param, std::uint64_t seed) {
  if (!(eps > 0.0)) throw DomainError("grad_check: eps must be positive");
  GradCheckReport report;
  for (Parameter* p : params) p->zero_grad();
  {
    Graph g(true);
    Var loss = objective(g);
    if (loss.value().numel() != 1) throw ShapeError("grad_check: objective must be scalar");
    if (!loss.value().all_finite()) {
      report.finite = false;
      report.message = "non-finite objective";
      return report;
    }
    g.backward(loss);
  }
  auto eval = [&] {
    Graph g(false);
    return objective(g).value()[0];
  };
  Rng rng(seed);
  for (Parameter* p : params) {
    GradCheckEntry e{p->name, 0.0};
    std::vector<std::size_t> idx;
    const std::size_t n = p->value.numel();
    if (probes_per_param == 0 || probes_per_param >= n) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < probes_per_param; ++k) idx.push_back(rng.next() % n);
    }
    for (std::size_t i : idx) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double lp = eval();
      p->value[i] = saved - eps;
      const double lm = eval();
      p->value[i] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        report.finite = false;
        report.message = "non-finite probe at " + p->name;
        continue;
      }
      e.max_rel_error = std::max(e.max_rel_error, relative_error(p->grad[i], (lp - lm) / (2.0 * eps)));
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace tck
