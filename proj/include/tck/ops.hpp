#pragma once

#include <span>
#include <vector>

#include "tck/graph.hpp"
#include "tck/rng.hpp"

// Differentiable tensor operations recorded on a Graph. Image tensors are
// NCHW, vectors are (N, F).
namespace tck::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

Var relu(Var a);
Var softplus(Var a);
// floor + softplus(raw): strictly positive scale parameters.
Var positive_scale(Var raw, double floor);

// x: (N, in), weight: (out, in), bias: (out).
Var linear(Var x, Var weight, Var bias);
// a: (M, K), b: (K, P).
Var matmul(Var a, Var b);
// weight: (O, C, k, k) with odd k, padding k/2.
Var conv2d(Var x, Var weight, Var bias, int stride);
// Transposed 3x3 convolution doubling both spatial extents. weight: (C, O, 3, 3).
Var deconv2d(Var x, Var weight, Var bias);

Var global_avg_pool(Var x);
Var broadcast_spatial(Var x, int h, int w);
// (M) -> (N, M)
Var tile_rows(Var x, int n);
// Half-pixel-centre bilinear resampling with edge clamping.
Var resample_bilinear(Var x, int h, int w);

Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(Var x, int begin, int count);

// Mean cross-entropy in nats. logits (N, K) with one label per row, or
// (N, K, H, W) with one label per pixel. Labels equal to -1 are ignored.
Var cross_entropy(Var logits, std::span<const int> labels);
Var l1_loss(Var pred, const Tensor& target);

// x + u with u ~ U(-0.5, 0.5); identity gradient.
Var add_uniform_noise(Var x, Rng& rng);
// Round half to even then clamp; the gradient is zero almost everywhere.
Var round_hard(Var x, int t_min, int t_max);

// Total bits of `values` under per-element discretized Gaussians, summed over
// all elements. Differentiable in values, means and scales.
Var gaussian_bits(Var values, Var means, Var scales, int t_min, int t_max);

}  // namespace tck::ops
