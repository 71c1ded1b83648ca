#include "dnas/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace dnas::ops {
namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void require_rank(std::string_view op, const Shape& s, int rank) {
  if (static_cast<int>(s.size()) != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

struct Dims4 {
  std::int64_t n, c, h, w;
};

Dims4 dims4(std::string_view op, const Shape& s) {
  require_rank(op, s, 4);
  return {s[0], s[1], s[2], s[3]};
}

int normalize_axis(std::string_view op, int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Lower k x k patches of one image [C, H, W] into a [C*k*k, Ho*Wo] matrix.
void im2col(const double* img, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride,
            std::int64_t ho, std::int64_t wo, double* col) {
  const int pad = k / 2;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* plane = img + ch * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + ((ch * k + ky) * k + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + ky - pad;
          double* out = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + wo, 0.0);
            continue;
          }
          const double* src = plane + iy * w;
          if (stride == 1) {
            const std::int64_t lo = std::max<std::int64_t>(0, pad - kx);
            const std::int64_t hi = std::min<std::int64_t>(wo, w + pad - kx);
            for (std::int64_t ox = 0; ox < lo; ++ox) out[ox] = 0.0;
            for (std::int64_t ox = lo; ox < hi; ++ox) out[ox] = src[ox + kx - pad];
            for (std::int64_t ox = std::max(hi, lo); ox < wo; ++ox) out[ox] = 0.0;
          } else {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const std::int64_t ix = ox * stride + kx - pad;
              out[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride,
                std::int64_t ho, std::int64_t wo, double* img) {
  const int pad = k / 2;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double* plane = img + ch * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + ((ch * k + ky) * k + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          double* dst = plane + iy * w;
          const double* in = row + oy * wo;
          if (stride == 1) {
            const std::int64_t lo = std::max<std::int64_t>(0, pad - kx);
            const std::int64_t hi = std::min<std::int64_t>(wo, w + pad - kx);
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox + kx - pad] += in[ox];
          } else {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const std::int64_t ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < w) dst[ix] += in[ox];
            }
          }
        }
      }
    }
  }
}

// Interpolation table for one axis under half-pixel-center bilinear resizing.
struct LerpAxis {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> t;
};

LerpAxis lerp_axis(std::int64_t in, std::int64_t out) {
  LerpAxis a;
  a.i0.resize(static_cast<std::size_t>(out));
  a.i1.resize(static_cast<std::size_t>(out));
  a.t.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::int64_t hi = std::min(lo + 1, in - 1);
    const auto u = static_cast<std::size_t>(o);
    a.i0[u] = lo;
    a.i1[u] = hi;
    a.t[u] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace

Var add(Var a, Var b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  Tensor out = a.value();
  out.add_(b.value());
  const Var ins[] = {a, b};
  return a.tape().record("add", ins, std::move(out), [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).add_(g);
    if (t.requires_grad(ib)) t.grad(ib).add_(g);
  });
}

Var sub(Var a, Var b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const Var ins[] = {a, b};
  return a.tape().record("sub", ins, std::move(out), [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad(ia).add_(g);
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[static_cast<std::int64_t>(i)];
    }
  });
}

Var mul(Var a, Var b) {
  const bool broadcast = b.value().numel() == 1 && a.shape() != b.shape();
  if (!broadcast && a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  const std::int64_t n = av.numel();
  if (broadcast) {
    const double s = bv[0];
    for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * s;
  } else {
    for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  }
  const Var ins[] = {a, b};
  return a.tape().record("mul", ins, std::move(out),
                         [ia = a.id(), ib = b.id(), broadcast](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           const std::int64_t n = g.numel();
                           if (t.requires_grad(ia)) {
                             Tensor& ga = t.grad(ia);
                             for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * (broadcast ? bv[0] : bv[i]);
                           }
                           if (t.requires_grad(ib)) {
                             Tensor& gb = t.grad(ib);
                             if (broadcast) {
                               double acc = 0.0;
                               for (std::int64_t i = 0; i < n; ++i) acc += g[i] * av[i];
                               gb[0] += acc;
                             } else {
                               for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
                             }
                           }
                         });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  const Var ins[] = {a};
  return a.tape().record("scale", ins, std::move(out), [ia = a.id(), factor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += factor * g[i];
  });
}

Var matmul(Var a, Var b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) shape_fail("matmul", a.shape(), b.shape());
  Tensor out(Shape{m, n});
  MapR(out.ptr(), m, n).noalias() = CMapR(a.value().ptr(), m, k) * CMapR(b.value().ptr(), k, n);
  const Var ins[] = {a, b};
  return a.tape().record("matmul", ins, std::move(out),
                         [ia = a.id(), ib = b.id(), m, k, n](Tape& t, std::size_t self) {
                           CMapR g(t.grad(self).ptr(), m, n);
                           if (t.requires_grad(ia)) {
                             MapR(t.grad(ia).ptr(), m, k).noalias() += g * CMapR(t.value(ib).ptr(), k, n).transpose();
                           }
                           if (t.requires_grad(ib)) {
                             MapR(t.grad(ib).ptr(), k, n).noalias() += CMapR(t.value(ia).ptr(), m, k).transpose() * g;
                           }
                         });
}

Var conv2d(Var x, Var weight, int stride) {
  const auto [n, c, h, w] = dims4("conv2d", x.shape());
  require_rank("conv2d", weight.shape(), 4);
  const std::int64_t co = weight.shape()[0];
  const int k = static_cast<int>(weight.shape()[2]);
  if (weight.shape()[1] != c || weight.shape()[3] != k || k % 2 == 0) {
    shape_fail("conv2d", x.shape(), weight.shape());
  }
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  const int pad = k / 2;
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (w + 2 * pad - k) / stride + 1;
  const std::int64_t kk = c * k * k, p = ho * wo;
  const bool direct = k == 1 && stride == 1;

  Tensor out(Shape{n, co, ho, wo});
  std::vector<double> col(direct ? 0 : static_cast<std::size_t>(kk * p));
  CMapR wm(weight.value().ptr(), co, kk);
  for (std::int64_t b = 0; b < n; ++b) {
    const double* img = x.value().ptr() + b * c * h * w;
    if (!direct) im2col(img, c, h, w, k, stride, ho, wo, col.data());
    const double* src = direct ? img : col.data();
    MapR(out.ptr() + b * co * p, co, p).noalias() = wm * CMapR(src, kk, p);
  }

  const Var ins[] = {x, weight};
  return x.tape().record(
      "conv2d", ins, std::move(out),
      [ix = x.id(), iw = weight.id(), n = n, c = c, h = h, w = w, co, k, stride, ho, wo, kk, p, direct](Tape& t,
                                                                                                     std::size_t self) {
        const Tensor& g = t.grad(self);
        const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
        std::vector<double> col(direct ? 0 : static_cast<std::size_t>(kk * p));
        CMapR wm(t.value(iw).ptr(), co, kk);
        for (std::int64_t b = 0; b < n; ++b) {
          CMapR gb(g.ptr() + b * co * p, co, p);
          const double* img = t.value(ix).ptr() + b * c * h * w;
          if (need_w) {
            if (!direct) im2col(img, c, h, w, k, stride, ho, wo, col.data());
            const double* src = direct ? img : col.data();
            MapR(t.grad(iw).ptr(), co, kk).noalias() += gb * CMapR(src, kk, p).transpose();
          }
          if (need_x) {
            double* dimg = t.grad(ix).ptr() + b * c * h * w;
            if (direct) {
              MapR(dimg, kk, p).noalias() += wm.transpose() * gb;
            } else {
              MapR(col.data(), kk, p).noalias() = wm.transpose() * gb;
              col2im_add(col.data(), c, h, w, k, stride, ho, wo, dimg);
            }
          }
        }
      });
}

Var depthwise_conv2d(Var x, Var weight) {
  const auto [n, c, h, w] = dims4("depthwise_conv2d", x.shape());
  require_rank("depthwise_conv2d", weight.shape(), 4);
  const int k = static_cast<int>(weight.shape()[2]);
  if (weight.shape()[0] != c || weight.shape()[1] != 1 || weight.shape()[3] != k || k % 2 == 0) {
    shape_fail("depthwise_conv2d", x.shape(), weight.shape());
  }
  const int pad = k / 2;
  Tensor out(x.shape());
  const double* xv = x.value().ptr();
  const double* wv = weight.value().ptr();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* in = xv + (b * c + ch) * h * w;
      double* o = out.ptr() + (b * c + ch) * h * w;
      const double* kw = wv + ch * k * k;
      for (int ky = 0; ky < k; ++ky) {
        const std::int64_t y_lo = std::max<std::int64_t>(0, pad - ky);
        const std::int64_t y_hi = std::min<std::int64_t>(h, h + pad - ky);
        for (int kx = 0; kx < k; ++kx) {
          const double wt = kw[ky * k + kx];
          const std::int64_t x_lo = std::max<std::int64_t>(0, pad - kx);
          const std::int64_t x_hi = std::min<std::int64_t>(w, w + pad - kx);
          const std::int64_t off = (ky - pad) * w + (kx - pad);
          for (std::int64_t y = y_lo; y < y_hi; ++y) {
            double* orow = o + y * w;
            const double* irow = in + y * w + off;
            for (std::int64_t xx = x_lo; xx < x_hi; ++xx) orow[xx] += wt * irow[xx];
          }
        }
      }
    }
  }
  const Var ins[] = {x, weight};
  return x.tape().record(
      "depthwise_conv2d", ins, std::move(out),
      [ix = x.id(), iw = weight.id(), n = n, c = c, h = h, w = w, k, pad](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
        const double* xv = t.value(ix).ptr();
        const double* wv = t.value(iw).ptr();
        double* gx = need_x ? t.grad(ix).ptr() : nullptr;
        double* gw = need_w ? t.grad(iw).ptr() : nullptr;
        for (std::int64_t b = 0; b < n; ++b) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t base = (b * c + ch) * h * w;
            const double* go = g.ptr() + base;
            for (int ky = 0; ky < k; ++ky) {
              const std::int64_t y_lo = std::max<std::int64_t>(0, pad - ky);
              const std::int64_t y_hi = std::min<std::int64_t>(h, h + pad - ky);
              for (int kx = 0; kx < k; ++kx) {
                const std::int64_t x_lo = std::max<std::int64_t>(0, pad - kx);
                const std::int64_t x_hi = std::min<std::int64_t>(w, w + pad - kx);
                const std::int64_t off = (ky - pad) * w + (kx - pad);
                const double wt = wv[ch * k * k + ky * k + kx];
                double acc = 0.0;
                for (std::int64_t y = y_lo; y < y_hi; ++y) {
                  const double* grow = go + y * w;
                  if (need_w) {
                    const double* irow = xv + base + y * w + off;
                    for (std::int64_t xx = x_lo; xx < x_hi; ++xx) acc += grow[xx] * irow[xx];
                  }
                  if (need_x) {
                    double* dxrow = gx + base + y * w + off;
                    for (std::int64_t xx = x_lo; xx < x_hi; ++xx) dxrow[xx] += wt * grow[xx];
                  }
                }
                if (need_w) gw[ch * k * k + ky * k + kx] += acc;
              }
            }
          }
        }
      });
}

Var add_channel_bias(Var x, Var bias) {
  const auto [n, c, h, w] = dims4("add_channel_bias", x.shape());
  if (bias.shape() != Shape{c}) shape_fail("add_channel_bias", x.shape(), bias.shape());
  Tensor out = x.value();
  const std::int64_t hw = h * w;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double* o = out.ptr() + (b * c + ch) * hw;
      const double v = bias.value()[ch];
      for (std::int64_t i = 0; i < hw; ++i) o[i] += v;
    }
  const Var ins[] = {x, bias};
  return x.tape().record("add_channel_bias", ins, std::move(out),
                         [ix = x.id(), ib = bias.id(), n = n, c = c, hw](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           if (t.requires_grad(ix)) t.grad(ix).add_(g);
                           if (t.requires_grad(ib)) {
                             Tensor& gb = t.grad(ib);
                             for (std::int64_t b = 0; b < n; ++b)
                               for (std::int64_t ch = 0; ch < c; ++ch) {
                                 const double* gp = g.ptr() + (b * c + ch) * hw;
                                 double acc = 0.0;
                                 for (std::int64_t i = 0; i < hw; ++i) acc += gp[i];
                                 gb[ch] += acc;
                               }
                           }
                         });
}

Var resize_bilinear(Var x, std::int64_t out_h, std::int64_t out_w) {
  const auto [n, c, h, w] = dims4("resize_bilinear", x.shape());
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: non-positive output size");
  auto ay = std::make_shared<LerpAxis>(lerp_axis(h, out_h));
  auto ax = std::make_shared<LerpAxis>(lerp_axis(w, out_w));
  Tensor out(Shape{n, c, out_h, out_w});
  const std::int64_t planes = n * c;
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* in = x.value().ptr() + pl * h * w;
    double* o = out.ptr() + pl * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto uy = static_cast<std::size_t>(oy);
      const double ty = ay->t[uy];
      const double* r0 = in + ay->i0[uy] * w;
      const double* r1 = in + ay->i1[uy] * w;
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto ux = static_cast<std::size_t>(ox);
        const double tx = ax->t[ux];
        const auto x0 = ax->i0[ux], x1 = ax->i1[ux];
        const double top = (1.0 - tx) * r0[x0] + tx * r0[x1];
        const double bot = (1.0 - tx) * r1[x0] + tx * r1[x1];
        o[oy * out_w + ox] = (1.0 - ty) * top + ty * bot;
      }
    }
  }
  const Var ins[] = {x};
  return x.tape().record("resize_bilinear", ins, std::move(out),
                         [ix = x.id(), ay, ax, planes, h = h, w = w, out_h, out_w](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& gx = t.grad(ix);
                           for (std::int64_t pl = 0; pl < planes; ++pl) {
                             const double* go = g.ptr() + pl * out_h * out_w;
                             double* gi = gx.ptr() + pl * h * w;
                             for (std::int64_t oy = 0; oy < out_h; ++oy) {
                               const auto uy = static_cast<std::size_t>(oy);
                               const double ty = ay->t[uy];
                               double* r0 = gi + ay->i0[uy] * w;
                               double* r1 = gi + ay->i1[uy] * w;
                               for (std::int64_t ox = 0; ox < out_w; ++ox) {
                                 const auto ux = static_cast<std::size_t>(ox);
                                 const double tx = ax->t[ux];
                                 const double v = go[oy * out_w + ox];
                                 const auto x0 = ax->i0[ux], x1 = ax->i1[ux];
                                 r0[x0] += (1.0 - ty) * (1.0 - tx) * v;
                                 r0[x1] += (1.0 - ty) * tx * v;
                                 r1[x0] += ty * (1.0 - tx) * v;
                                 r1[x1] += ty * tx * v;
                               }
                             }
                           }
                         });
}

Var avg_pool2d(Var x, int k) {
  const auto [n, c, h, w] = dims4("avg_pool2d", x.shape());
  if (k <= 0 || h % k != 0 || w % k != 0) {
    throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not tile " + to_string(x.shape()));
  }
  const std::int64_t ho = h / k, wo = w / k;
  const double inv = 1.0 / (k * k);
  Tensor out(Shape{n, c, ho, wo});
  for (std::int64_t pl = 0; pl < n * c; ++pl) {
    const double* in = x.value().ptr() + pl * h * w;
    double* o = out.ptr() + pl * ho * wo;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) o[(y / k) * wo + xx / k] += in[y * w + xx] * inv;
  }
  const Var ins[] = {x};
  return x.tape().record("avg_pool2d", ins, std::move(out),
                         [ix = x.id(), n = n, c = c, h = h, w = w, k, ho, wo, inv](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& gx = t.grad(ix);
                           for (std::int64_t pl = 0; pl < n * c; ++pl) {
                             const double* go = g.ptr() + pl * ho * wo;
                             double* gi = gx.ptr() + pl * h * w;
                             for (std::int64_t y = 0; y < h; ++y)
                               for (std::int64_t xx = 0; xx < w; ++xx) gi[y * w + xx] += go[(y / k) * wo + xx / k] * inv;
                           }
                         });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  const Var ins[] = {x};
  return x.tape().record("relu", ins, std::move(out), [ix = x.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (y[i] > 0.0) gx[i] += g[i];
  });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training, double momentum, double eps) {
  const auto [n, c, h, w] = dims4("batch_norm", x.shape());
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) shape_fail("batch_norm", x.shape(), gamma.shape());
  if (stats.running_mean.shape() != Shape{c} || stats.running_var.shape() != Shape{c}) {
    shape_fail("batch_norm", x.shape(), stats.running_mean.shape());
  }
  const std::int64_t hw = h * w;
  const std::int64_t m = n * hw;
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> invstd(static_cast<std::size_t>(c));

  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* p = xv.ptr() + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      }
      mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* p = xv.ptr() + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / static_cast<double>(m);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
      stats.running_mean[ch] = (1.0 - momentum) * stats.running_mean[ch] + momentum * mu;
      stats.running_var[ch] = (1.0 - momentum) * stats.running_var[ch] + momentum * unbiased;
    } else {
      mu = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[static_cast<std::size_t>(ch)] = is;
    for (std::int64_t b = 0; b < n; ++b) {
      const std::int64_t off = (b * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double xh = (xv[off + i] - mu) * is;
        xhat[off + i] = xh;
        out[off + i] = gv[ch] * xh + bv[ch];
      }
    }
  }

  const Var ins[] = {x, gamma, beta};
  return x.tape().record(
      "batch_norm", ins, std::move(out),
      [ix = x.id(), ig = gamma.id(), ib = beta.id(), xhat = std::move(xhat), invstd = std::move(invstd), n = n,
       c = c, hw, m, training](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gv = t.value(ig);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sg += g[off + i];
              sgx += g[off + i] * xhat[off + i];
            }
          }
          if (t.requires_grad(ig)) t.grad(ig)[ch] += sgx;
          if (t.requires_grad(ib)) t.grad(ib)[ch] += sg;
          if (!t.requires_grad(ix)) continue;
          Tensor& gx = t.grad(ix);
          const double is = invstd[static_cast<std::size_t>(ch)];
          if (training) {
            const double k = gv[ch] * is / static_cast<double>(m);
            const double md = static_cast<double>(m);
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t off = (b * c + ch) * hw;
              for (std::int64_t i = 0; i < hw; ++i) gx[off + i] += k * (md * g[off + i] - sg - xhat[off + i] * sgx);
            }
          } else {
            const double k = gv[ch] * is;
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t off = (b * c + ch) * hw;
              for (std::int64_t i = 0; i < hw; ++i) gx[off + i] += k * g[off + i];
            }
          }
        }
      });
}

Var softmax(Var x, int axis) {
  const int a = normalize_axis("softmax", axis, static_cast<int>(x.shape().size()));
  const AxisSplit s = split_at(x.shape(), a);
  if (s.extent == 0) throw EmptyAxisError("softmax: axis " + std::to_string(axis) + " has zero length");
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < s.extent; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::int64_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (std::int64_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= z;
    }
  const Var ins[] = {x};
  return x.tape().record("softmax", ins, std::move(out), [ix = x.id(), s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::int64_t j = 0; j < s.extent; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::int64_t j = 0; j < s.extent; ++j) {
          const std::int64_t i = base + j * s.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
  });
}

Var log_softmax(Var x, int axis) {
  const int a = normalize_axis("log_softmax", axis, static_cast<int>(x.shape().size()));
  const AxisSplit s = split_at(x.shape(), a);
  if (s.extent == 0) throw EmptyAxisError("log_softmax: axis " + std::to_string(axis) + " has zero length");
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < s.extent; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::int64_t j = 0; j < s.extent; ++j) z += std::exp(xv[base + j * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::int64_t j = 0; j < s.extent; ++j) out[base + j * s.inner] = xv[base + j * s.inner] - lse;
    }
  const Var ins[] = {x};
  return x.tape().record("log_softmax", ins, std::move(out), [ix = x.id(), s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(ix);
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.extent * s.inner + in;
        double gs = 0.0;
        for (std::int64_t j = 0; j < s.extent; ++j) gs += g[base + j * s.inner];
        for (std::int64_t j = 0; j < s.extent; ++j) {
          const std::int64_t i = base + j * s.inner;
          gx[i] += g[i] - std::exp(y[i]) * gs;
        }
      }
  });
}

Var log(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::log(v);
  const Var ins[] = {x};
  return x.tape().record("log", ins, std::move(out), [ix = x.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad(ix);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] / xv[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const Var ins[] = {x};
  return x.tape().record("sum", ins, Tensor::scalar(s), [ix = x.id()](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad(ix).data()) v += g;
  });
}

Var mean(Var x) {
  const auto n = x.value().numel();
  if (n == 0) throw EmptyAxisError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const Var ins[] = {x};
  return x.tape().record("mean", ins, Tensor::scalar(s / static_cast<double>(n)),
                         [ix = x.id(), n](Tape& t, std::size_t self) {
                           const double g = t.grad(self)[0] / static_cast<double>(n);
                           for (auto& v : t.grad(ix).data()) v += g;
                         });
}

Var concat(std::span<const Var> xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs[0].shape();
  const int a = normalize_axis("concat", axis, static_cast<int>(first.size()));
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(a)] = 0;
  std::vector<std::int64_t> extents;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != first.size()) shape_fail("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d)
      if (static_cast<int>(d) != a && s[d] != first[d]) shape_fail("concat", first, s);
    extents.push_back(s[static_cast<std::size_t>(a)]);
    out_shape[static_cast<std::size_t>(a)] += s[static_cast<std::size_t>(a)];
  }
  const AxisSplit os = split_at(out_shape, a);
  Tensor out(out_shape);
  std::int64_t offset = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor& v = xs[i].value();
    const std::int64_t chunk = extents[i] * os.inner;
    for (std::int64_t o = 0; o < os.outer; ++o) {
      std::copy_n(v.ptr() + o * chunk, chunk, out.ptr() + o * os.extent * os.inner + offset * os.inner);
    }
    offset += extents[i];
  }
  std::vector<std::size_t> ids;
  for (const auto& v : xs) ids.push_back(v.id());
  return xs[0].tape().record("concat", xs, std::move(out),
                             [ids = std::move(ids), extents = std::move(extents), os](Tape& t, std::size_t self) {
                               const Tensor& g = t.grad(self);
                               std::int64_t offset = 0;
                               for (std::size_t i = 0; i < ids.size(); ++i) {
                                 const std::int64_t chunk = extents[i] * os.inner;
                                 if (t.requires_grad(ids[i])) {
                                   Tensor& gi = t.grad(ids[i]);
                                   for (std::int64_t o = 0; o < os.outer; ++o) {
                                     const double* src = g.ptr() + o * os.extent * os.inner + offset * os.inner;
                                     double* dst = gi.ptr() + o * chunk;
                                     for (std::int64_t j = 0; j < chunk; ++j) dst[j] += src[j];
                                   }
                                 }
                                 offset += extents[i];
                               }
                             });
}

Var mask_channels(Var x, std::span<const double> mask) {
  if (x.shape().size() < 2 || x.shape()[1] != static_cast<std::int64_t>(mask.size())) {
    shape_fail("mask_channels", x.shape(), Shape{static_cast<std::int64_t>(mask.size())});
  }
  const AxisSplit s = split_at(x.shape(), 1);
  std::vector<double> m(mask.begin(), mask.end());
  Tensor out = x.value();
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t ch = 0; ch < s.extent; ++ch) {
      double* p = out.ptr() + (o * s.extent + ch) * s.inner;
      for (std::int64_t i = 0; i < s.inner; ++i) p[i] *= m[static_cast<std::size_t>(ch)];
    }
  const Var ins[] = {x};
  return x.tape().record("mask_channels", ins, std::move(out),
                         [ix = x.id(), s, m = std::move(m)](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& gx = t.grad(ix);
                           for (std::int64_t o = 0; o < s.outer; ++o)
                             for (std::int64_t ch = 0; ch < s.extent; ++ch) {
                               const std::int64_t off = (o * s.extent + ch) * s.inner;
                               for (std::int64_t i = 0; i < s.inner; ++i)
                                 gx[off + i] += g[off + i] * m[static_cast<std::size_t>(ch)];
                             }
                         });
}

Var gather_channels(Var x, std::span<const std::int64_t> channels) {
  if (x.shape().size() < 2) throw ShapeError("gather_channels: rank < 2 in " + to_string(x.shape()));
  const AxisSplit s = split_at(x.shape(), 1);
  for (auto ch : channels)
    if (ch < 0 || ch >= s.extent) throw ShapeError("gather_channels: channel out of range");
  Shape out_shape = x.shape();
  const auto k = static_cast<std::int64_t>(channels.size());
  out_shape[1] = k;
  Tensor out(out_shape);
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t j = 0; j < k; ++j)
      std::copy_n(x.value().ptr() + (o * s.extent + channels[static_cast<std::size_t>(j)]) * s.inner, s.inner,
                  out.ptr() + (o * k + j) * s.inner);
  std::vector<std::int64_t> idx(channels.begin(), channels.end());
  const Var ins[] = {x};
  return x.tape().record("gather_channels", ins, std::move(out),
                         [ix = x.id(), s, idx = std::move(idx)](Tape& t, std::size_t self) {
                           const Tensor& g = t.grad(self);
                           Tensor& gx = t.grad(ix);
                           const auto k = static_cast<std::int64_t>(idx.size());
                           for (std::int64_t o = 0; o < s.outer; ++o)
                             for (std::int64_t j = 0; j < k; ++j) {
                               const double* src = g.ptr() + (o * k + j) * s.inner;
                               double* dst = gx.ptr() + (o * s.extent + idx[static_cast<std::size_t>(j)]) * s.inner;
                               for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                             }
                         });
}

Var merge_channels(Var base, Var replacement, std::span<const std::int64_t> channels) {
  const Shape& bs = base.shape();
  const Shape& rs = replacement.shape();
  if (bs.size() < 2 || rs.size() != bs.size() || rs[1] != static_cast<std::int64_t>(channels.size())) {
    shape_fail("merge_channels", bs, rs);
  }
  for (std::size_t d = 0; d < bs.size(); ++d)
    if (d != 1 && bs[d] != rs[d]) shape_fail("merge_channels", bs, rs);
  const AxisSplit s = split_at(bs, 1);
  const auto k = static_cast<std::int64_t>(channels.size());
  std::vector<char> replaced(static_cast<std::size_t>(s.extent), 0);
  for (auto ch : channels) {
    if (ch < 0 || ch >= s.extent) throw ShapeError("merge_channels: channel out of range");
    replaced[static_cast<std::size_t>(ch)] = 1;
  }
  Tensor out = base.value();
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t j = 0; j < k; ++j)
      std::copy_n(replacement.value().ptr() + (o * k + j) * s.inner, s.inner,
                  out.ptr() + (o * s.extent + channels[static_cast<std::size_t>(j)]) * s.inner);
  std::vector<std::int64_t> idx(channels.begin(), channels.end());
  const Var ins[] = {base, replacement};
  return base.tape().record(
      "merge_channels", ins, std::move(out),
      [ibase = base.id(), irep = replacement.id(), s, idx = std::move(idx), replaced = std::move(replaced)](
          Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const auto k = static_cast<std::int64_t>(idx.size());
        if (t.requires_grad(ibase)) {
          Tensor& gb = t.grad(ibase);
          for (std::int64_t o = 0; o < s.outer; ++o)
            for (std::int64_t ch = 0; ch < s.extent; ++ch) {
              if (replaced[static_cast<std::size_t>(ch)]) continue;
              const std::int64_t off = (o * s.extent + ch) * s.inner;
              for (std::int64_t i = 0; i < s.inner; ++i) gb[off + i] += g[off + i];
            }
        }
        if (t.requires_grad(irep)) {
          Tensor& gr = t.grad(irep);
          for (std::int64_t o = 0; o < s.outer; ++o)
            for (std::int64_t j = 0; j < k; ++j) {
              const double* src = g.ptr() + (o * s.extent + idx[static_cast<std::size_t>(j)]) * s.inner;
              double* dst = gr.ptr() + (o * k + j) * s.inner;
              for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
            }
        }
      });
}

Var select(Var x, std::span<const std::int64_t> index) {
  require_rank("select", x.shape(), 1);
  const auto n = x.shape()[0];
  Tensor out(Shape{static_cast<std::int64_t>(index.size())});
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] < 0 || index[j] >= n) throw ShapeError("select: index out of range");
    out[static_cast<std::int64_t>(j)] = x.value()[index[j]];
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  const Var ins[] = {x};
  return x.tape().record("select", ins, std::move(out), [ix = x.id(), idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t j = 0; j < idx.size(); ++j) gx[idx[j]] += g[static_cast<std::int64_t>(j)];
  });
}

Var mix(std::span<const Var> xs, Var weights) {
  if (xs.empty()) throw ShapeError("mix: no inputs");
  if (weights.shape() != Shape{static_cast<std::int64_t>(xs.size())}) {
    shape_fail("mix", Shape{static_cast<std::int64_t>(xs.size())}, weights.shape());
  }
  const Shape& s = xs[0].shape();
  for (const auto& v : xs)
    if (v.shape() != s) shape_fail("mix", s, v.shape());
  Tensor out(s);
  const std::int64_t n = out.numel();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double wi = weights.value()[static_cast<std::int64_t>(i)];
    const double* src = xs[i].value().ptr();
    double* o = out.ptr();
    for (std::int64_t j = 0; j < n; ++j) o[j] += wi * src[j];
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  ins.push_back(weights);
  std::vector<std::size_t> ids;
  for (const auto& v : xs) ids.push_back(v.id());
  return weights.tape().record("mix", ins, std::move(out),
                               [ids = std::move(ids), iw = weights.id(), n](Tape& t, std::size_t self) {
                                 const Tensor& g = t.grad(self);
                                 const Tensor& w = t.value(iw);
                                 const bool need_w = t.requires_grad(iw);
                                 for (std::size_t i = 0; i < ids.size(); ++i) {
                                   if (need_w) {
                                     const double* x = t.value(ids[i]).ptr();
                                     double acc = 0.0;
                                     for (std::int64_t j = 0; j < n; ++j) acc += g[j] * x[j];
                                     t.grad(iw)[static_cast<std::int64_t>(i)] += acc;
                                   }
                                   if (t.requires_grad(ids[i])) {
                                     const double wi = w[static_cast<std::int64_t>(i)];
                                     double* gx = t.grad(ids[i]).ptr();
                                     for (std::int64_t j = 0; j < n; ++j) gx[j] += wi * g[j];
                                   }
                                 }
                               });
}

Var cross_entropy(Var logits, std::span<const std::uint8_t> labels, std::uint8_t ignore) {
  const auto [n, c, h, w] = dims4("cross_entropy", logits.shape());
  const std::int64_t hw = h * w;
  if (static_cast<std::int64_t>(labels.size()) != n * hw) {
    shape_fail("cross_entropy", logits.shape(), Shape{static_cast<std::int64_t>(labels.size())});
  }
  const Tensor& z = logits.value();
  // Stores softmax probabilities for the backward pass.
  Tensor probs(logits.shape());
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    const double* zb = z.ptr() + b * c * hw;
    double* pb = probs.ptr() + b * c * hw;
    for (std::int64_t i = 0; i < hw; ++i) {
      const std::uint8_t lab = labels[static_cast<std::size_t>(b * hw + i)];
      if (lab == ignore) continue;
      if (lab >= c) throw ShapeError("cross_entropy: label " + std::to_string(lab) + " outside " + std::to_string(c) + " classes");
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < c; ++k) mx = std::max(mx, zb[k * hw + i]);
      double s = 0.0;
      for (std::int64_t k = 0; k < c; ++k) {
        const double e = std::exp(zb[k * hw + i] - mx);
        pb[k * hw + i] = e;
        s += e;
      }
      for (std::int64_t k = 0; k < c; ++k) pb[k * hw + i] /= s;
      total += mx + std::log(s) - zb[lab * hw + i];
      ++count;
    }
  }
  const double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  std::vector<std::uint8_t> labs(labels.begin(), labels.end());
  const Var ins[] = {logits};
  return logits.tape().record(
      "cross_entropy", ins, Tensor::scalar(loss),
      [iz = logits.id(), probs = std::move(probs), labs = std::move(labs), n = n, c = c, hw, count, ignore](
          Tape& t, std::size_t self) {
        if (count == 0) return;
        const double g = t.grad(self)[0] / static_cast<double>(count);
        Tensor& gz = t.grad(iz);
        for (std::int64_t b = 0; b < n; ++b) {
          double* gb = gz.ptr() + b * c * hw;
          const double* pb = probs.ptr() + b * c * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const std::uint8_t lab = labs[static_cast<std::size_t>(b * hw + i)];
            if (lab == ignore) continue;
            for (std::int64_t k = 0; k < c; ++k) gb[k * hw + i] += g * pb[k * hw + i];
            gb[lab * hw + i] -= g;
          }
        }
      });
}

}  // namespace dnas::ops
