#include <doctest.h>

#include <cmath>

#include "tck/ops.hpp"
#include "tck/optim.hpp"

using namespace tck;

TEST_CASE("first two Adam steps match the moment recursion") {
  Parameter p{"p", Tensor({2}, {1.0, -2.0}), {}};
  Adam opt({&p}, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  const double g1[2] = {0.5, -3.0}, g2[2] = {1.0, 2.0};
  double x[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 2; ++t) {
    const double* g = t == 1 ? g1 : g2;
    p.grad = Tensor({2}, {g[0], g[1]});
    opt.step();
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p.value[i] == doctest::Approx(x[i]).epsilon(1e-14));
    }
  }
  // the first step moves each coordinate by about lr against the gradient sign
  CHECK(opt.steps() == 2);
}

TEST_CASE("parameters without gradients are left alone") {
  Parameter a{"a", Tensor({1}, 3.0), {}}, b{"b", Tensor({1}, 4.0), {}};
  Adam opt({&a, &b}, AdamConfig{});
  opt.zero_grad();
  a.grad = Tensor({1}, 1.0);
  opt.step();
  CHECK(a.value[0] < 3.0);
  CHECK(b.value[0] == 4.0);
}

TEST_CASE("Adam drives a quadratic to its minimum") {
  Parameter p{"p", Tensor({3}, {2.0, -1.0, 0.5}), {}};
  const Tensor target({3}, {0.25, 0.75, -1.0});
  Adam opt({&p}, AdamConfig{0.05});
  for (int i = 0; i < 800; ++i) {
    opt.zero_grad();
    Graph g;
    Var d = ops::sub(g.param(p), g.constant(target));
    g.backward(ops::sum(ops::mul(d, d)));
    opt.step();
  }
  for (int i = 0; i < 3; ++i) CHECK(p.value[i] == doctest::Approx(target[i]).epsilon(1e-3));
}
