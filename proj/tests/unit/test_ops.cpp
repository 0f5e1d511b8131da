#include <doctest.h>

#include <cmath>

#include "fd_oracle.hpp"
#include "tck/errors.hpp"
#include "tck/ops.hpp"

using namespace tck;
using fd::random_tensor;

namespace {

constexpr double kTol = 1e-4;

double grad_err(const fd::Fn& f, std::vector<Tensor> in) { return fd::input_grad_error(f, std::move(in)); }

}  // namespace

TEST_CASE("pointwise and reduction gradients") {
  const Tensor a = random_tensor({2, 3}, 1), b = random_tensor({2, 3}, 2);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::add(v[0], v[1]); }, {a, b}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::sub(v[0], v[1]); }, {a, b}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::mul(v[0], v[1]); }, {a, b}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::scale(v[0], -2.5); }, {a}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::mean(v[0]); }, {a}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::softplus(v[0]); }, {a}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::positive_scale(v[0], 0.04); }, {a}) < kTol);
}

TEST_CASE("relu gradient away from the kink") {
  Tensor a = random_tensor({4, 5}, 3);
  for (double& v : a.storage()) {
    if (std::abs(v) < 0.01) v = 0.3;
  }
  CHECK(grad_err([](Graph&, const auto& v) { return ops::relu(v[0]); }, {a}) < kTol);
}

TEST_CASE("linear and matmul gradients") {
  CHECK(grad_err([](Graph&, const auto& v) { return ops::linear(v[0], v[1], v[2]); },
                 {random_tensor({3, 4}, 1), random_tensor({5, 4}, 2), random_tensor({5}, 3)}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::matmul(v[0], v[1]); },
                 {random_tensor({3, 4}, 4), random_tensor({4, 6}, 5)}) < kTol);
}

TEST_CASE("convolution gradients") {
  const Tensor x = random_tensor({2, 2, 5, 6}, 7);
  for (int stride : {1, 2}) {
    CHECK(grad_err([stride](Graph&, const auto& v) { return ops::conv2d(v[0], v[1], v[2], stride); },
                   {x, random_tensor({3, 2, 3, 3}, 8), random_tensor({3}, 9)}) < kTol);
  }
  CHECK(grad_err([](Graph&, const auto& v) { return ops::conv2d(v[0], v[1], v[2], 1); },
                 {x, random_tensor({3, 2, 1, 1}, 10), random_tensor({3}, 11)}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::deconv2d(v[0], v[1], v[2]); },
                 {random_tensor({1, 2, 3, 4}, 12), random_tensor({2, 3, 3, 3}, 13), random_tensor({3}, 14)}) <
        kTol);
}

TEST_CASE("spatial op gradients") {
  const Tensor x = random_tensor({2, 3, 4, 5}, 21);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::global_avg_pool(v[0]); }, {x}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::broadcast_spatial(v[0], 3, 2); },
                 {random_tensor({2, 3}, 22)}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::resample_bilinear(v[0], 7, 3); }, {x}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::concat_channels({v[0], v[1]}); },
                 {x, random_tensor({2, 1, 4, 5}, 23)}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::slice_channels(v[0], 1, 2); }, {x}) < kTol);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::tile_rows(v[0], 3); }, {random_tensor({4}, 24)}) < kTol);
}

TEST_CASE("loss gradients") {
  const std::vector<int> labels{0, 2, -1, 1};
  CHECK(grad_err([&](Graph&, const auto& v) { return ops::cross_entropy(v[0], labels); },
                 {random_tensor({4, 3}, 31)}) < kTol);
  const std::vector<int> pix{0, 1, 1, 0, 2, 2};
  CHECK(grad_err([&](Graph&, const auto& v) { return ops::cross_entropy(v[0], pix); },
                 {random_tensor({1, 3, 2, 3}, 32)}) < kTol);
  Tensor pred = random_tensor({2, 3}, 33);
  Tensor target = pred;
  for (double& t : target.storage()) t += 0.25;
  CHECK(grad_err([&](Graph&, const auto& v) { return ops::l1_loss(v[0], target); }, {pred}) < kTol);
}

TEST_CASE("cross entropy of uniform logits is log K") {
  Graph g(false);
  const std::vector<int> labels{0, 3};
  Var ce = ops::cross_entropy(g.constant(Tensor({2, 4}, 0.0)), labels);
  CHECK(ce.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("global average pool of a 2x2 grid") {
  Graph g(false);
  Var p = ops::global_avg_pool(g.constant(Tensor({1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7})));
  CHECK(p.value()[0] == 4.0);
}

TEST_CASE("pool then broadcast is idempotent on constant maps") {
  Graph g(false);
  Tensor c({2, 3, 4, 4});
  for (int n = 0; n < 2; ++n)
    for (int ch = 0; ch < 3; ++ch)
      for (int i = 0; i < 16; ++i) c[(n * 3 + ch) * 16 + i] = n - 0.75 * ch;
  Var b = ops::broadcast_spatial(ops::global_avg_pool(g.constant(c)), 4, 4);
  CHECK(b.value() == c);
}

TEST_CASE("bilinear resampling") {
  Graph g(false);
  SUBCASE("constant stays constant") {
    Var r = ops::resample_bilinear(g.constant(Tensor({1, 2, 3, 5}, 3.0)), 11, 2);
    for (double v : r.value().values()) CHECK(v == doctest::Approx(3.0).epsilon(1e-15));
  }
  SUBCASE("identity target") {
    Tensor x = random_tensor({1, 2, 4, 3}, 5);
    CHECK(ops::resample_bilinear(g.constant(x), 4, 3).value() == x);
  }
  SUBCASE("2x2 to 3x3 centre") {
    Var r = ops::resample_bilinear(g.constant(Tensor({1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3})), 3, 3);
    CHECK(r.value().at(0, 0, 1, 1) == doctest::Approx(1.5).epsilon(1e-15));
  }
  SUBCASE("bad target") {
    CHECK_THROWS_AS(ops::resample_bilinear(g.constant(Tensor({1, 1, 2, 2})), 0, 3), ShapeError);
  }
}

TEST_CASE("uniform noise has identity gradient and bounded support") {
  Rng rng(3);
  Graph g(true);
  Var x = g.input(Tensor({100}, 0.0), true);
  Var y = ops::add_uniform_noise(x, rng);
  for (double v : y.value().values()) {
    CHECK(v > -0.5);
    CHECK(v < 0.5);
  }
  g.backward(y);
  for (double v : g.grad(x)->values()) CHECK(v == 1.0);
}

TEST_CASE("hard rounding passes no gradient") {
  Graph g(true);
  Var x = g.input(Tensor({3}, std::vector<double>{0.4, 2.5, 300.0}), true);
  Var y = ops::round_hard(x, -127, 127);
  CHECK(y.value()[0] == 0.0);
  CHECK(y.value()[1] == 2.0);
  CHECK(y.value()[2] == 127.0);
  g.backward(ops::sum(y));
  const Tensor* gx = g.grad(x);
  CHECK((gx == nullptr || gx->max_abs() == 0.0));
}

TEST_CASE("gaussian bits gradient in values, means and scales") {
  Tensor vals = random_tensor({12}, 41, -3.0, 3.0);
  Tensor means = random_tensor({12}, 42, -2.0, 2.0);
  Tensor scales = random_tensor({12}, 43, 0.5, 3.0);
  CHECK(grad_err([](Graph&, const auto& v) { return ops::gaussian_bits(v[0], v[1], v[2], -127, 127); },
                 {vals, means, scales}) < kTol);
}

TEST_CASE("gaussian bits at the alphabet boundary absorb the tail") {
  Graph g(false);
  Var b = ops::gaussian_bits(g.constant(Tensor({1}, 4.0)), g.constant(Tensor({1}, 10.0)),
                             g.constant(Tensor({1}, 1.0)), -4, 4);
  // Upper boundary symbol holds P(x > 3.5) for N(10, 1).
  CHECK(b.value()[0] == doctest::Approx(-std::log2(1.0 - 0.5 * std::erfc(6.5 / std::sqrt(2.0)))));
}
