#include "tck/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "tck/errors.hpp"
#include "tck/gaussian.hpp"
#include "tck/quantize.hpp"

namespace tck::ops {
namespace {

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": operand shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

void accumulate(Graph& g, int target, const Tensor& delta, double factor = 1.0) {
  if (!g.requires_grad(target)) return;
  Tensor& buf = g.grad_buffer(target);
  double* d = buf.data();
  const double* s = delta.data();
  for (std::size_t i = 0; i < buf.numel(); ++i) d[i] += factor * s[i];
}

// Output coordinate range [lo, hi) whose input index o*stride + off stays in [0, n).
inline void valid_range(int out_n, int stride, int off, int n, int& lo, int& hi) {
  lo = 0;
  while (lo < out_n && lo * stride + off < 0) ++lo;
  hi = out_n;
  while (hi > lo && (hi - 1) * stride + off >= n) --hi;
}

// C (m x n) += A B, A element (i, p) at a[i * ars + p * acs], B (k x n) and C row-major.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t ars, std::size_t acs,
          const double* __restrict b, double* __restrict c) {
  constexpr std::size_t kBlock = 512;
  for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
    const std::size_t jn = std::min(kBlock, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      double* __restrict c0 = c + i * n + j0;
      double* __restrict c1 = c0 + n;
      double* __restrict c2 = c1 + n;
      double* __restrict c3 = c2 + n;
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = a[i * ars + p * acs], a1 = a[(i + 1) * ars + p * acs];
        const double a2 = a[(i + 2) * ars + p * acs], a3 = a[(i + 3) * ars + p * acs];
        const double* __restrict br = b + p * n + j0;
        for (std::size_t j = 0; j < jn; ++j) {
          const double bv = br[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      double* __restrict c0 = c + i * n + j0;
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = a[i * ars + p * acs];
        const double* __restrict br = b + p * n + j0;
        for (std::size_t j = 0; j < jn; ++j) c0[j] += a0 * br[j];
      }
    }
  }
}

// C (m x n) += A B^T with A (m x k), B (n x k), row-major.
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b + j * k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += ar[p] * br[p];
        s1 += ar[p + 1] * br[p + 1];
        s2 += ar[p + 2] * br[p + 2];
        s3 += ar[p + 3] * br[p + 3];
      }
      for (; p < k; ++p) s0 += ar[p] * br[p];
      c[i * n + j] += (s0 + s1) + (s2 + s3);
    }
  }
}

struct ConvGeom {
  int n, c, h, w, k, stride, pad, ho, wo;
};

// col[(c, ky, kx)][(b, oy, ox)] = x[b][c][oy * stride + ky - pad][ox * stride + kx - pad], zero outside
void im2col(const ConvGeom& g, const double* x, double* col) {
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t oplane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t np = g.n * oplane;
  for (int c = 0; c < g.c; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = col + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * np;
        int x_lo, x_hi;
        valid_range(g.wo, g.stride, kx - g.pad, g.w, x_lo, x_hi);
        for (int b = 0; b < g.n; ++b) {
          const double* ip = x + (static_cast<std::size_t>(b) * g.c + c) * plane;
          for (int oy = 0; oy < g.ho; ++oy) {
            double* dst = row + b * oplane + static_cast<std::size_t>(oy) * g.wo;
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.h) {
              std::fill(dst, dst + g.wo, 0.0);
              continue;
            }
            const double* src = ip + static_cast<std::size_t>(iy) * g.w + (kx - g.pad);
            for (int ox = 0; ox < x_lo; ++ox) dst[ox] = 0.0;
            for (int ox = x_lo; ox < x_hi; ++ox) dst[ox] = src[ox * g.stride];
            for (int ox = x_hi; ox < g.wo; ++ox) dst[ox] = 0.0;
          }
        }
      }
    }
  }
}

// adjoint of im2col: x += scatter(col)
void col2im(const ConvGeom& g, const double* col, double* x) {
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t oplane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t np = g.n * oplane;
  for (int c = 0; c < g.c; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((static_cast<std::size_t>(c) * g.k + ky) * g.k + kx) * np;
        int x_lo, x_hi;
        valid_range(g.wo, g.stride, kx - g.pad, g.w, x_lo, x_hi);
        for (int b = 0; b < g.n; ++b) {
          double* ip = x + (static_cast<std::size_t>(b) * g.c + c) * plane;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.h) continue;
            const double* src = row + b * oplane + static_cast<std::size_t>(oy) * g.wo;
            double* dst = ip + static_cast<std::size_t>(iy) * g.w + (kx - g.pad);
            for (int ox = x_lo; ox < x_hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

// (n, c, p) <-> (c, n * p)
void to_channel_major(const double* src, int n, int c, int p, double* dst) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + (static_cast<std::size_t>(b) * c + ch) * p, p,
                  dst + (static_cast<std::size_t>(ch) * n + b) * p);
}

void from_channel_major(const double* src, int n, int c, int p, double* dst) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + (static_cast<std::size_t>(ch) * n + b) * p, p,
                  dst + (static_cast<std::size_t>(b) * c + ch) * p);
}

void add_bias(Tensor& out, const Tensor& bias) {
  const int n = out.shape()[0], c = out.shape()[1];
  const std::size_t p = out.numel() / (static_cast<std::size_t>(n) * c);
  double* o = out.data();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      double* q = o + (static_cast<std::size_t>(b) * c + ch) * p;
      for (std::size_t i = 0; i < p; ++i) q[i] += bias[static_cast<std::size_t>(ch)];
    }
}

void bias_grad(const double* go, int n, int c, int p, double* gb) {
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double* q = go + (static_cast<std::size_t>(b) * c + ch) * p;
      double s = 0.0;
      for (int i = 0; i < p; ++i) s += q[i];
      gb[ch] += s;
    }
}

struct ResampleAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;
};

ResampleAxis resample_axis(int in, int out) {
  ResampleAxis ax;
  ax.i0.resize(static_cast<std::size_t>(out));
  ax.i1.resize(static_cast<std::size_t>(out));
  ax.w1.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    ax.i0[static_cast<std::size_t>(o)] = lo;
    ax.i1[static_cast<std::size_t>(o)] = hi;
    ax.w1[static_cast<std::size_t>(o)] = src - lo;
  }
  return ax;
}

}  // namespace

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const int ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Tensor& go = *g.grad(self);
    accumulate(g, ia, go);
    accumulate(g, ib, go);
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  const int ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Tensor& go = *g.grad(self);
    accumulate(g, ia, go);
    accumulate(g, ib, go, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const int ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {a, b}, [ia, ib](Graph& g, int self) {
    const Tensor& go = *g.grad(self);
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  const int ia = a.id;
  return a.graph->record(std::move(out), {a},
                         [ia, s](Graph& g, int self) { accumulate(g, ia, *g.grad(self), s); });
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v += s;
  const int ia = a.id;
  return a.graph->record(std::move(out), {a},
                         [ia](Graph& g, int self) { accumulate(g, ia, *g.grad(self)); });
}

Var sum(Var a) {
  const int ia = a.id;
  return a.graph->record(Tensor::scalar(a.value().sum()), {a}, [ia](Graph& g, int self) {
    const double go = (*g.grad(self))[0];
    Tensor& ga = g.grad_buffer(ia);
    for (double& v : ga.storage()) v += go;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().numel());
  return scale(sum(a), 1.0 / n);
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id;
  return a.graph->record(std::move(out), {a}, [ia](Graph& g, int self) {
    const Tensor& go = *g.grad(self);
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  const int ia = a.id;
  return a.graph->record(std::move(out), {a}, [ia](Graph& g, int self) {
    const Tensor& go = *g.grad(self);
    const Tensor& x = g.value(ia);
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.numel(); ++i) {
      if (x[i] > 0.0) ga[i] += go[i];
    }
  });
}

Var softplus(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  const int ia = a.id;
  return a.graph->record(std::move(out), {a}, [ia](Graph& g, int self) {
    const Tensor& go = *g.grad(self);
    const Tensor& x = g.value(ia);
    Tensor& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < go.numel(); ++i) {
      const double e = std::exp(-std::abs(x[i]));
      const double sig = x[i] >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
      ga[i] += go[i] * sig;
    }
  });
}

Var positive_scale(Var raw, double floor) { return add_scalar(softplus(raw), floor); }

Var linear(Var x, Var weight, Var bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int n = x.shape()[0], in = x.shape()[1], out_f = weight.shape()[0];
  if (weight.shape()[1] != in) {
    throw ShapeError("linear: input features " + std::to_string(in) + " do not match weight " +
                     shape_str(weight.shape()));
  }
  if (bias.value().numel() != static_cast<std::size_t>(out_f)) throw ShapeError("linear: bias extent");
  Tensor out({n, out_f});
  const double* xv = x.value().data();
  const double* wv = weight.value().data();
  const double* bv = bias.value().data();
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out_f; ++o) {
      double s = bv[o];
      const double* wr = wv + static_cast<std::size_t>(o) * in;
      const double* xr = xv + static_cast<std::size_t>(i) * in;
      for (int k = 0; k < in; ++k) s += wr[k] * xr[k];
      out[static_cast<std::size_t>(i) * out_f + o] = s;
    }
  }
  const int ix = x.id, iw = weight.id, ib = bias.id;
  return x.graph->record(std::move(out), {x, weight, bias},
                         [ix, iw, ib, n, in, out_f](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    const double* xv = g.value(ix).data();
    const double* wv = g.value(iw).data();
    if (g.requires_grad(ix)) {
      double* gx = g.grad_buffer(ix).data();
      for (int i = 0; i < n; ++i) {
        for (int o = 0; o < out_f; ++o) {
          const double d = go[static_cast<std::size_t>(i) * out_f + o];
          const double* wr = wv + static_cast<std::size_t>(o) * in;
          double* gr = gx + static_cast<std::size_t>(i) * in;
          for (int k = 0; k < in; ++k) gr[k] += d * wr[k];
        }
      }
    }
    if (g.requires_grad(iw)) {
      double* gw = g.grad_buffer(iw).data();
      for (int i = 0; i < n; ++i) {
        for (int o = 0; o < out_f; ++o) {
          const double d = go[static_cast<std::size_t>(i) * out_f + o];
          const double* xr = xv + static_cast<std::size_t>(i) * in;
          double* gr = gw + static_cast<std::size_t>(o) * in;
          for (int k = 0; k < in; ++k) gr[k] += d * xr[k];
        }
      }
    }
    if (g.requires_grad(ib)) {
      double* gb = g.grad_buffer(ib).data();
      for (int i = 0; i < n; ++i) {
        for (int o = 0; o < out_f; ++o) gb[o] += go[static_cast<std::size_t>(i) * out_f + o];
      }
    }
  });
}

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, p});
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* ov = out.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < k; ++j) {
      const double s = av[static_cast<std::size_t>(i) * k + j];
      const double* br = bv + static_cast<std::size_t>(j) * p;
      double* orow = ov + static_cast<std::size_t>(i) * p;
      for (int c = 0; c < p; ++c) orow[c] += s * br[c];
    }
  }
  const int ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), {a, b}, [ia, ib, m, k, p](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    const double* av = g.value(ia).data();
    const double* bv = g.value(ib).data();
    if (g.requires_grad(ia)) {
      double* ga = g.grad_buffer(ia).data();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < k; ++j) {
          double s = 0.0;
          const double* br = bv + static_cast<std::size_t>(j) * p;
          const double* gr = go + static_cast<std::size_t>(i) * p;
          for (int c = 0; c < p; ++c) s += gr[c] * br[c];
          ga[static_cast<std::size_t>(i) * k + j] += s;
        }
      }
    }
    if (g.requires_grad(ib)) {
      double* gb = g.grad_buffer(ib).data();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < k; ++j) {
          const double s = av[static_cast<std::size_t>(i) * k + j];
          const double* gr = go + static_cast<std::size_t>(i) * p;
          double* br = gb + static_cast<std::size_t>(j) * p;
          for (int c = 0; c < p; ++c) br[c] += s * gr[c];
        }
      }
    }
  });
}

Var conv2d(Var x, Var weight, Var bias, int stride) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const int n = xs[0], c_in = xs[1], h = xs[2], w = xs[3];
  const int c_out = ws[0], k = ws[2];
  if (ws[1] != c_in || ws[3] != k || k % 2 == 0) {
    throw ShapeError("conv2d: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  const ConvGeom geo{n, c_in, h, w, k, stride, k / 2, (h + 2 * (k / 2) - k) / stride + 1,
                     (w + 2 * (k / 2) - k) / stride + 1};
  const std::size_t ck = static_cast<std::size_t>(c_in) * k * k;
  const std::size_t np = static_cast<std::size_t>(n) * geo.ho * geo.wo;
  std::vector<double> col(ck * np);
  im2col(geo, x.value().data(), col.data());
  std::vector<double> om(static_cast<std::size_t>(c_out) * np, 0.0);
  gemm(c_out, np, ck, weight.value().data(), ck, 1, col.data(), om.data());
  Tensor out({n, c_out, geo.ho, geo.wo});
  from_channel_major(om.data(), n, c_out, geo.ho * geo.wo, out.data());
  add_bias(out, bias.value());
  const int ix = x.id, iw = weight.id, ib = bias.id;
  return x.graph->record(std::move(out), {x, weight, bias}, [=](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    if (g.requires_grad(ib)) bias_grad(go, n, c_out, geo.ho * geo.wo, g.grad_buffer(ib).data());
    const bool need_x = g.requires_grad(ix);
    const bool need_w = g.requires_grad(iw);
    if (!need_x && !need_w) return;
    std::vector<double> gom(static_cast<std::size_t>(c_out) * np);
    to_channel_major(go, n, c_out, geo.ho * geo.wo, gom.data());
    if (need_w) {
      std::vector<double> col(ck * np);
      im2col(geo, g.value(ix).data(), col.data());
      gemm_nt(c_out, ck, np, gom.data(), col.data(), g.grad_buffer(iw).data());
    }
    if (need_x) {
      std::vector<double> gcol(ck * np, 0.0);
      gemm(ck, np, c_out, g.value(iw).data(), 1, ck, gom.data(), gcol.data());
      col2im(geo, gcol.data(), g.grad_buffer(ix).data());
    }
  });
}

Var deconv2d(Var x, Var weight, Var bias) {
  require_rank(x, 4, "deconv2d");
  require_rank(weight, 4, "deconv2d");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const int n = xs[0], c_in = xs[1], h = xs[2], w = xs[3];
  const int c_out = ws[1];
  if (ws[0] != c_in || ws[2] != 3 || ws[3] != 3) {
    throw ShapeError("deconv2d: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  }
  // out[2*iy - 1 + ky][2*ix - 1 + kx] += x[iy][ix] * w[ky][kx]; as a conv
  // geometry this is the stride-2 pad-1 window over the output grid
  const ConvGeom geo{n, c_out, 2 * h, 2 * w, 3, 2, 1, h, w};
  const std::size_t co9 = static_cast<std::size_t>(c_out) * 9;
  const std::size_t np = static_cast<std::size_t>(n) * h * w;
  std::vector<double> xm(static_cast<std::size_t>(c_in) * np);
  to_channel_major(x.value().data(), n, c_in, h * w, xm.data());
  std::vector<double> cols(co9 * np, 0.0);
  gemm(co9, np, c_in, weight.value().data(), 1, co9, xm.data(), cols.data());
  Tensor out({n, c_out, 2 * h, 2 * w});
  col2im(geo, cols.data(), out.data());
  add_bias(out, bias.value());
  const int ix_ = x.id, iw = weight.id, ib = bias.id;
  return x.graph->record(std::move(out), {x, weight, bias}, [=](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    if (g.requires_grad(ib)) bias_grad(go, n, c_out, 4 * h * w, g.grad_buffer(ib).data());
    const bool need_x = g.requires_grad(ix_);
    const bool need_w = g.requires_grad(iw);
    if (!need_x && !need_w) return;
    std::vector<double> gcol(co9 * np);
    im2col(geo, go, gcol.data());
    if (need_w) {
      std::vector<double> xm(static_cast<std::size_t>(c_in) * np);
      to_channel_major(g.value(ix_).data(), n, c_in, h * w, xm.data());
      gemm_nt(c_in, co9, np, xm.data(), gcol.data(), g.grad_buffer(iw).data());
    }
    if (need_x) {
      std::vector<double> gxm(static_cast<std::size_t>(c_in) * np, 0.0);
      gemm(c_in, np, co9, g.value(iw).data(), co9, 1, gcol.data(), gxm.data());
      std::vector<double> gx(static_cast<std::size_t>(c_in) * np);
      from_channel_major(gxm.data(), n, c_in, h * w, gx.data());
      double* dst = g.grad_buffer(ix_).data();
      for (std::size_t i = 0; i < gx.size(); ++i) dst[i] += gx[i];
    }
  });
}

Var global_avg_pool(Var x) {
  require_rank(x, 4, "global_avg_pool");
  const Shape& s = x.shape();
  const int n = s[0], c = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor out({n, c});
  const double* xv = x.value().data();
  for (int i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* p = xv + static_cast<std::size_t>(i) * plane;
    for (std::size_t j = 0; j < plane; ++j) acc += p[j];
    out[static_cast<std::size_t>(i)] = acc / static_cast<double>(plane);
  }
  const int ix = x.id;
  return x.graph->record(std::move(out), {x}, [ix, n, c, plane](Graph& g, int self) {
    const Tensor& go = *g.grad(self);
    double* gx = g.grad_buffer(ix).data();
    for (int i = 0; i < n * c; ++i) {
      const double d = go[static_cast<std::size_t>(i)] / static_cast<double>(plane);
      double* p = gx + static_cast<std::size_t>(i) * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] += d;
    }
  });
}

Var broadcast_spatial(Var x, int h, int w) {
  require_rank(x, 2, "broadcast_spatial");
  if (h < 1 || w < 1) throw ShapeError("broadcast_spatial: extents must be positive");
  const int n = x.shape()[0], c = x.shape()[1];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out({n, c, h, w});
  for (int i = 0; i < n * c; ++i) {
    const double v = x.value()[static_cast<std::size_t>(i)];
    std::fill_n(out.data() + static_cast<std::size_t>(i) * plane, plane, v);
  }
  const int ix = x.id;
  return x.graph->record(std::move(out), {x}, [ix, n, c, plane](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    double* gx = g.grad_buffer(ix).data();
    for (int i = 0; i < n * c; ++i) {
      double acc = 0.0;
      const double* p = go + static_cast<std::size_t>(i) * plane;
      for (std::size_t j = 0; j < plane; ++j) acc += p[j];
      gx[i] += acc;
    }
  });
}

Var tile_rows(Var x, int n) {
  const std::size_t m = x.value().numel();
  Tensor out({n, static_cast<int>(m)});
  for (int i = 0; i < n; ++i) std::copy_n(x.value().data(), m, out.data() + static_cast<std::size_t>(i) * m);
  const int ix = x.id;
  return x.graph->record(std::move(out), {x}, [ix, n, m](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    double* gx = g.grad_buffer(ix).data();
    for (int i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) gx[j] += go[static_cast<std::size_t>(i) * m + j];
    }
  });
}

Var resample_bilinear(Var x, int h, int w) {
  require_rank(x, 4, "resample_bilinear");
  if (h < 1 || w < 1) throw ShapeError("resample_bilinear: target extent must be at least 1");
  const Shape& s = x.shape();
  const int n = s[0], c = s[1], hi = s[2], wi = s[3];
  if (hi == h && wi == w) return x;
  auto ay = std::make_shared<ResampleAxis>(resample_axis(hi, h));
  auto ax = std::make_shared<ResampleAxis>(resample_axis(wi, w));
  Tensor out({n, c, h, w});
  const double* xv = x.value().data();
  for (int p = 0; p < n * c; ++p) {
    const double* ip = xv + static_cast<std::size_t>(p) * hi * wi;
    double* op = out.data() + static_cast<std::size_t>(p) * h * w;
    for (int y = 0; y < h; ++y) {
      const double wy = ay->w1[y];
      const double* r0 = ip + static_cast<std::size_t>(ay->i0[y]) * wi;
      const double* r1 = ip + static_cast<std::size_t>(ay->i1[y]) * wi;
      for (int xx = 0; xx < w; ++xx) {
        const double wx = ax->w1[xx];
        const int x0 = ax->i0[xx], x1 = ax->i1[xx];
        const double top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
        const double bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
        op[static_cast<std::size_t>(y) * w + xx] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  const int idx = x.id;
  return x.graph->record(std::move(out), {x}, [=](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    double* gx = g.grad_buffer(idx).data();
    for (int p = 0; p < n * c; ++p) {
      double* ip = gx + static_cast<std::size_t>(p) * hi * wi;
      const double* op = go + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < h; ++y) {
        const double wy = ay->w1[y];
        double* r0 = ip + static_cast<std::size_t>(ay->i0[y]) * wi;
        double* r1 = ip + static_cast<std::size_t>(ay->i1[y]) * wi;
        for (int xx = 0; xx < w; ++xx) {
          const double wx = ax->w1[xx];
          const int x0 = ax->i0[xx], x1 = ax->i1[xx];
          const double d = op[static_cast<std::size_t>(y) * w + xx];
          r0[x0] += d * (1.0 - wy) * (1.0 - wx);
          r0[x1] += d * (1.0 - wy) * wx;
          r1[x0] += d * wy * (1.0 - wx);
          r1[x1] += d * wy * wx;
        }
      }
    }
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no operands");
  if (parts.size() == 1) return parts[0];
  const Shape& s0 = parts[0].shape();
  if (s0.size() < 2) throw ShapeError("concat_channels: operands need a channel axis");
  const int n = s0[0];
  std::size_t plane = 1;
  for (std::size_t i = 2; i < s0.size(); ++i) plane *= static_cast<std::size_t>(s0[i]);
  int total = 0;
  std::vector<int> offsets, counts, ids;
  for (const Var& v : parts) {
    const Shape& s = v.shape();
    if (s.size() != s0.size() || s[0] != n || !std::equal(s.begin() + 2, s.end(), s0.begin() + 2)) {
      throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(s0));
    }
    offsets.push_back(total);
    counts.push_back(s[1]);
    ids.push_back(v.id);
    total += s[1];
  }
  Shape os = s0;
  os[1] = total;
  Tensor out(os);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].value().data();
    for (int b = 0; b < n; ++b) {
      std::copy_n(src + static_cast<std::size_t>(b) * counts[k] * plane,
                  static_cast<std::size_t>(counts[k]) * plane,
                  out.data() + (static_cast<std::size_t>(b) * total + offsets[k]) * plane);
    }
  }
  return parts[0].graph->record(std::move(out), parts, [=](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!g.requires_grad(ids[k])) continue;
      double* gd = g.grad_buffer(ids[k]).data();
      for (int b = 0; b < n; ++b) {
        const double* src = go + (static_cast<std::size_t>(b) * total + offsets[k]) * plane;
        double* dst = gd + static_cast<std::size_t>(b) * counts[k] * plane;
        for (std::size_t i = 0; i < static_cast<std::size_t>(counts[k]) * plane; ++i) dst[i] += src[i];
      }
    }
  });
}

Var slice_channels(Var x, int begin, int count) {
  const Shape& s = x.shape();
  if (s.size() < 2 || begin < 0 || count < 1 || begin + count > s[1]) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " + shape_str(s));
  }
  const int n = s[0], c = s[1];
  std::size_t plane = 1;
  for (std::size_t i = 2; i < s.size(); ++i) plane *= static_cast<std::size_t>(s[i]);
  Shape os = s;
  os[1] = count;
  Tensor out(os);
  for (int b = 0; b < n; ++b) {
    std::copy_n(x.value().data() + (static_cast<std::size_t>(b) * c + begin) * plane,
                static_cast<std::size_t>(count) * plane,
                out.data() + static_cast<std::size_t>(b) * count * plane);
  }
  const int ix = x.id;
  return x.graph->record(std::move(out), {x}, [=](Graph& g, int self) {
    const double* go = g.grad(self)->data();
    double* gx = g.grad_buffer(ix).data();
    for (int b = 0; b < n; ++b) {
      const double* src = go + static_cast<std::size_t>(b) * count * plane;
      double* dst = gx + (static_cast<std::size_t>(b) * c + begin) * plane;
      for (std::size_t i = 0; i < static_cast<std::size_t>(count) * plane; ++i) dst[i] += src[i];
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 && s.size() != 4) throw ShapeError("cross_entropy: logits must be (N,K) or (N,K,H,W)");
  const int n = s[0], k = s[1];
  const std::size_t plane = s.size() == 4 ? static_cast<std::size_t>(s[2]) * s[3] : 1;
  if (labels.size() != static_cast<std::size_t>(n) * plane) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(s));
  }
  const double* lv = logits.value().data();
  auto probs = std::make_shared<std::vector<double>>(logits.value().numel());
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  std::size_t counted = 0;
  for (int b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = static_cast<std::size_t>(b) * k * plane + p;
      double mx = -gauss::kInf;
      for (int j = 0; j < k; ++j) mx = std::max(mx, lv[base + j * plane]);
      double z = 0.0;
      for (int j = 0; j < k; ++j) z += std::exp(lv[base + j * plane] - mx);
      for (int j = 0; j < k; ++j) (*probs)[base + j * plane] = std::exp(lv[base + j * plane] - mx) / z;
      const int y = lab[static_cast<std::size_t>(b) * plane + p];
      if (y < 0) continue;
      if (y >= k) throw DomainError("cross_entropy: label " + std::to_string(y) + " out of range");
      total += -(lv[base + y * plane] - mx - std::log(z));
      ++counted;
    }
  }
  const double denom = counted ? static_cast<double>(counted) : 1.0;
  const int il = logits.id;
  return logits.graph->record(Tensor::scalar(total / denom), {logits},
                              [=, lab = std::move(lab)](Graph& g, int self) {
    const double go = (*g.grad(self))[0] / denom;
    double* gl = g.grad_buffer(il).data();
    for (int b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < plane; ++p) {
        const int y = lab[static_cast<std::size_t>(b) * plane + p];
        if (y < 0) continue;
        const std::size_t base = static_cast<std::size_t>(b) * k * plane + p;
        for (int j = 0; j < k; ++j) {
          gl[base + j * plane] += go * ((*probs)[base + j * plane] - (j == y ? 1.0 : 0.0));
        }
      }
    }
  });
}

Var l1_loss(Var pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  double acc = 0.0;
  const double* pv = pred.value().data();
  for (std::size_t i = 0; i < target.numel(); ++i) acc += std::abs(pv[i] - target[i]);
  const double n = static_cast<double>(target.numel());
  const int ip = pred.id;
  return pred.graph->record(Tensor::scalar(acc / n), {pred}, [ip, target, n](Graph& g, int self) {
    const double go = (*g.grad(self))[0] / n;
    const double* pv = g.value(ip).data();
    double* gp = g.grad_buffer(ip).data();
    for (std::size_t i = 0; i < target.numel(); ++i) {
      const double d = pv[i] - target[i];
      if (d > 0.0) gp[i] += go;
      else if (d < 0.0) gp[i] -= go;
    }
  });
}

Var add_uniform_noise(Var x, Rng& rng) {
  Tensor out = x.value();
  for (double& v : out.storage()) v += rng.centered_open();
  const int ix = x.id;
  return x.graph->record(std::move(out), {x}, [ix](Graph& g, int self) { accumulate(g, ix, *g.grad(self)); });
}

Var round_hard(Var x, int t_min, int t_max) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = static_cast<double>(quantize_scalar(v, t_min, t_max));
  return x.graph->record(std::move(out), {x}, [](Graph&, int) {});
}

Var gaussian_bits(Var values, Var means, Var scales, int t_min, int t_max) {
  require_same(values, means, "gaussian_bits");
  require_same(values, scales, "gaussian_bits");
  const std::size_t n = values.value().numel();
  const double* yv = values.value().data();
  const double* mv = means.value().data();
  const double* sv = scales.value().data();
  Graph& graph = *values.graph;
  const bool want = graph.grad_enabled() &&
                    (graph.requires_grad(values) || graph.requires_grad(means) || graph.requires_grad(scales));
  auto grads = std::make_shared<std::vector<double>>(want ? 3 * n : 0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(sv[i] > 0.0)) throw DomainError("gaussian_bits: non-positive scale");
    const gauss::ElementBits e = gauss::element_bits(yv[i], mv[i], sv[i], t_min, t_max, want);
    total += e.bits;
    if (want) {
      (*grads)[3 * i] = e.d_value;
      (*grads)[3 * i + 1] = e.d_mean;
      (*grads)[3 * i + 2] = e.d_scale;
    }
  }
  const int iy = values.id, im = means.id, is = scales.id;
  return graph.record(Tensor::scalar(total), {values, means, scales}, [=](Graph& g, int self) {
    const double go = (*g.grad(self))[0];
    const int targets[3] = {iy, im, is};
    for (int t = 0; t < 3; ++t) {
      if (!g.requires_grad(targets[t])) continue;
      double* gd = g.grad_buffer(targets[t]).data();
      for (std::size_t i = 0; i < n; ++i) gd[i] += go * (*grads)[3 * i + t];
    }
  });
}

}  // namespace tck::ops
