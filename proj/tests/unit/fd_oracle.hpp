#pragma once

#include <functional>
#include <vector>

#include "tck/graph.hpp"
#include "tck/network.hpp"
#include "tck/rng.hpp"

namespace fd {

using Fn = std::function<tck::Var(tck::Graph&, const std::vector<tck::Var>&)>;

inline tck::Tensor random_tensor(tck::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  tck::Rng rng(seed);
  tck::Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Max relative error between reverse-mode input gradients of
// L = sum(f(inputs) * r) and central differences.
inline double input_grad_error(const Fn& f, std::vector<tck::Tensor> inputs, double eps = 1e-4,
                               std::uint64_t seed = 11) {
  tck::Tensor r;
  std::vector<tck::Tensor> analytic;
  {
    tck::Graph g(true);
    std::vector<tck::Var> vars;
    for (auto& t : inputs) vars.push_back(g.input(t, true));
    tck::Var out = f(g, vars);
    r = random_tensor(out.shape(), seed);
    g.backward(out, r);
    for (auto& v : vars) {
      const tck::Tensor* gr = g.grad(v);
      analytic.push_back(gr ? *gr : tck::Tensor(v.shape(), 0.0));
    }
  }
  auto loss = [&] {
    tck::Graph g(false);
    std::vector<tck::Var> vars;
    for (auto& t : inputs) vars.push_back(g.input(t, false));
    const tck::Tensor& o = f(g, vars).value();
    double s = 0.0;
    for (std::size_t i = 0; i < o.numel(); ++i) s += o[i] * r[i];
    return s;
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + eps;
      const double lp = loss();
      inputs[k][i] = saved - eps;
      const double lm = loss();
      inputs[k][i] = saved;
      worst = std::max(worst, tck::relative_error(analytic[k][i], (lp - lm) / (2 * eps)));
    }
  }
  return worst;
}

}  // namespace fd
