#include "mtat/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace mtat::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_finite(const char* op, const Tensor<T>& t) {
  if (!t.all_finite()) {
    throw NonFiniteError(std::string(op) + ": non-finite input of shape " + shape_str(t.shape()));
  }
}

template <typename T>
Graph<T>& graph_of(const char* op, std::initializer_list<Var<T>> vars) {
  Graph<T>* g = nullptr;
  for (const auto& v : vars) {
    if (!v.graph) throw std::invalid_argument(std::string(op) + ": unbound variable");
    if (g && g != v.graph) throw std::invalid_argument(std::string(op) + ": inputs from different graphs");
    g = v.graph;
  }
  for (const auto& v : vars) require_finite(op, v.value());
  return *g;
}

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_rank(const char* op, const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(s));
  }
}

// Geometry of a convolution from an input image C x H x W to an output grid
// OH x OW. The transposed convolution reuses it with roles swapped.
struct ConvGeom {
  std::int64_t n, c, h, w, kh, kw, stride, pad, oh, ow;
  std::int64_t rows() const { return c * kh * kw; }
  std::int64_t cols() const { return n * oh * ow; }
};

// Output columns ow whose input column ow * stride - pad + k lies in [0, w).
inline std::pair<std::int64_t, std::int64_t> valid_range(std::int64_t k, std::int64_t stride, std::int64_t pad,
                                                         std::int64_t w, std::int64_t ow) {
  const std::int64_t off = pad - k;
  std::int64_t lo = off > 0 ? (off + stride - 1) / stride : 0;
  std::int64_t hi = w - 1 + off >= 0 ? (w - 1 + off) / stride + 1 : 0;
  lo = std::min(lo, ow);
  hi = std::max(lo, std::min(hi, ow));
  return {lo, hi};
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::int64_t p = g.oh * g.ow;
  const std::int64_t np = g.n * p;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * np;
        const auto [lo, hi] = valid_range(kj, g.stride, g.pad, g.w, g.ow);
        for (std::int64_t n = 0; n < g.n; ++n) {
          const T* xc = x + (n * g.c + c) * g.h * g.w;
          T* rn = row + n * p;
          for (std::int64_t oh = 0; oh < g.oh; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            T* dst = rn + oh * g.ow;
            if (ih < 0 || ih >= g.h) {
              std::fill(dst, dst + g.ow, T(0));
              continue;
            }
            const std::int64_t base = ih * g.w + kj - g.pad;
            std::fill(dst, dst + lo, T(0));
            if (g.stride == 1) {
              if (hi > lo) std::copy(xc + base + lo, xc + base + hi, dst + lo);
            } else {
              for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow] = xc[base + ow * g.stride];
            }
            std::fill(dst + hi, dst + g.ow, T(0));
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters (accumulates) columns back onto the image.
template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::int64_t p = g.oh * g.ow;
  const std::int64_t np = g.n * p;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * np;
        const auto [lo, hi] = valid_range(kj, g.stride, g.pad, g.w, g.ow);
        for (std::int64_t n = 0; n < g.n; ++n) {
          T* xc = x + (n * g.c + c) * g.h * g.w;
          const T* rn = row + n * p;
          for (std::int64_t oh = 0; oh < g.oh; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.h) continue;
            const std::int64_t base = ih * g.w + kj - g.pad;
            const T* src = rn + oh * g.ow;
            if (g.stride == 1) {
              for (std::int64_t ow = lo; ow < hi; ++ow) xc[base + ow] += src[ow];
            } else {
              for (std::int64_t ow = lo; ow < hi; ++ow) xc[base + ow * g.stride] += src[ow];
            }
          }
        }
      }
    }
  }
}

// N x C x P  <->  C x (N*P)
template <typename T>
void nchw_to_cmajor(const T* src, std::int64_t n, std::int64_t c, std::int64_t p, T* dst) {
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < c; ++k)
      std::copy(src + (i * c + k) * p, src + (i * c + k + 1) * p, dst + k * n * p + i * p);
}

template <typename T>
void cmajor_to_nchw(const T* src, std::int64_t n, std::int64_t c, std::int64_t p, T* dst) {
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < c; ++k)
      std::copy(src + k * n * p + i * p, src + k * n * p + (i + 1) * p, dst + (i * c + k) * p);
}

template <typename T>
void add_channel_bias(Tensor<T>& out, const Tensor<T>& bias) {
  const auto n = out.dim(0), c = out.dim(1);
  const auto p = out.numel() / (n * c);
  auto o = out.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < c; ++k) {
      const T b = bias[static_cast<std::size_t>(k)];
      T* row = o.data() + (i * c + k) * p;
      for (std::int64_t q = 0; q < p; ++q) row[q] += b;
    }
}

template <typename T>
void accumulate_channel_sum(const Tensor<T>& grad, Tensor<T>& dbias) {
  const auto n = grad.dim(0), c = grad.dim(1);
  const auto p = grad.numel() / (n * c);
  for (std::int64_t k = 0; k < c; ++k) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = grad.data().data() + (i * c + k) * p;
      for (std::int64_t q = 0; q < p; ++q) s += row[q];
    }
    dbias[static_cast<std::size_t>(k)] += static_cast<T>(s);
  }
}

template <typename T>
void check_bias(const char* op, const std::optional<Var<T>>& bias, std::int64_t channels) {
  if (!bias) return;
  const Shape want{channels};
  if (bias->shape() != want) {
    throw ShapeError(std::string(op) + ": bias shape " + shape_str(bias->shape()) + " vs expected " +
                     shape_str(want));
  }
}

template <typename T>
std::vector<Var<T>> with_optional(std::vector<Var<T>> base, const std::optional<Var<T>>& extra) {
  if (extra) base.push_back(*extra);
  return base;
}

template <typename T, typename F, typename DF>
Var<T> unary(const char* op, Var<T> x, F f, DF df) {
  Graph<T>& g = graph_of(op, {x});
  Tensor<T> out(x.shape());
  const auto in = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return g.record(op, {x}, std::move(out), [df](BackwardContext<T>& ctx) {
    auto* dx = ctx.input_grads[0];
    if (!dx) return;
    const auto in = ctx.inputs[0]->data();
    const auto y = ctx.out.data();
    const auto go = ctx.grad_out.data();
    auto d = dx->data();
    for (std::size_t i = 0; i < in.size(); ++i) d[i] += go[i] * df(in[i], y[i]);
  });
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, Conv2dAttrs attrs) {
  constexpr const char* op = "conv2d";
  Graph<T>& g = graph_of(op, {x, weight});
  if (bias) require_finite(op, bias->value());
  require_rank(op, x.shape(), 4, "input");
  require_rank(op, weight.shape(), 4, "weight");
  if (x.shape()[1] != weight.shape()[1]) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) + " and weight " +
                     shape_str(weight.shape()) + " disagree on channels");
  }
  if (attrs.stride < 1 || attrs.pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  ConvGeom geo{xs[0], xs[1], xs[2], xs[3], ws[2], ws[3], attrs.stride, attrs.pad, 0, 0};
  const auto span_h = geo.h + 2 * geo.pad - geo.kh;
  const auto span_w = geo.w + 2 * geo.pad - geo.kw;
  if (span_h < 0 || span_w < 0) {
    throw ShapeError(std::string(op) + ": kernel " + shape_str(ws) + " larger than padded input " +
                     shape_str(xs));
  }
  geo.oh = span_h / geo.stride + 1;
  geo.ow = span_w / geo.stride + 1;
  const std::int64_t outc = ws[0];
  check_bias(op, bias, outc);

  RowMat<T> cols(geo.rows(), geo.cols());
  im2col(x.value().data().data(), geo, cols.data());
  ConstMatMap<T> wmat(weight.value().data().data(), outc, geo.rows());
  RowMat<T> y = wmat * cols;
  Tensor<T> out(Shape{geo.n, outc, geo.oh, geo.ow});
  cmajor_to_nchw(y.data(), geo.n, outc, geo.oh * geo.ow, out.data().data());
  if (bias) add_channel_bias(out, bias->value());

  return g.record(op, with_optional<T>({x, weight}, bias), std::move(out),
                  [geo, outc](BackwardContext<T>& ctx) {
                    const std::int64_t p = geo.oh * geo.ow;
                    RowMat<T> dy(outc, geo.cols());
                    nchw_to_cmajor(ctx.grad_out.data().data(), geo.n, outc, p, dy.data());
                    const T* wptr = ctx.inputs[1]->data().data();
                    ConstMatMap<T> wmat(wptr, outc, geo.rows());
                    if (auto* dw = ctx.input_grads[1]) {
                      RowMat<T> cols(geo.rows(), geo.cols());
                      im2col(ctx.inputs[0]->data().data(), geo, cols.data());
                      MatMap<T> dwm(dw->data().data(), outc, geo.rows());
                      dwm.noalias() += dy * cols.transpose();
                    }
                    if (ctx.input_grads.size() > 2 && ctx.input_grads[2]) {
                      accumulate_channel_sum(ctx.grad_out, *ctx.input_grads[2]);
                    }
                    if (auto* dx = ctx.input_grads[0]) {
                      RowMat<T> dcols = wmat.transpose() * dy;
                      col2im(dcols.data(), geo, dx->data().data());
                    }
                  });
}

template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, Conv2dAttrs attrs) {
  constexpr const char* op = "conv_transpose2d";
  Graph<T>& g = graph_of(op, {x, weight});
  if (bias) require_finite(op, bias->value());
  require_rank(op, x.shape(), 4, "input");
  require_rank(op, weight.shape(), 4, "weight");
  if (x.shape()[1] != weight.shape()[0]) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) + " and weight " +
                     shape_str(weight.shape()) + " disagree on channels");
  }
  if (attrs.stride < 1 || attrs.pad < 0) throw std::invalid_argument("conv_transpose2d: bad stride/pad");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  const std::int64_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::int64_t outc = ws[1];
  const std::int64_t oh = (h - 1) * attrs.stride - 2 * attrs.pad + ws[2];
  const std::int64_t ow = (w - 1) * attrs.stride - 2 * attrs.pad + ws[3];
  if (oh <= 0 || ow <= 0) {
    throw ShapeError(std::string(op) + ": empty output for input " + shape_str(xs) + " and weight " +
                     shape_str(ws));
  }
  check_bias(op, bias, outc);
  // The adjoint convolution maps the output image (outc x oh x ow) onto the
  // input grid (h x w).
  const ConvGeom geo{n, outc, oh, ow, ws[2], ws[3], attrs.stride, attrs.pad, h, w};

  RowMat<T> xm(cin, n * h * w);
  nchw_to_cmajor(x.value().data().data(), n, cin, h * w, xm.data());
  ConstMatMap<T> wmat(weight.value().data().data(), cin, geo.rows());
  RowMat<T> cols = wmat.transpose() * xm;
  Tensor<T> out(Shape{n, outc, oh, ow});
  col2im(cols.data(), geo, out.data().data());
  if (bias) add_channel_bias(out, bias->value());

  return g.record(op, with_optional<T>({x, weight}, bias), std::move(out),
                  [geo, cin](BackwardContext<T>& ctx) {
                    RowMat<T> dcols(geo.rows(), geo.cols());
                    im2col(ctx.grad_out.data().data(), geo, dcols.data());
                    ConstMatMap<T> wmat(ctx.inputs[1]->data().data(), cin, geo.rows());
                    const std::int64_t q = geo.oh * geo.ow;
                    if (auto* dx = ctx.input_grads[0]) {
                      RowMat<T> dxm = wmat * dcols;
                      RowMat<T> tmp(geo.n * cin, q);
                      cmajor_to_nchw(dxm.data(), geo.n, cin, q, tmp.data());
                      auto d = dx->data();
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += tmp.data()[i];
                    }
                    if (auto* dw = ctx.input_grads[1]) {
                      RowMat<T> xm(cin, geo.n * q);
                      nchw_to_cmajor(ctx.inputs[0]->data().data(), geo.n, cin, q, xm.data());
                      MatMap<T> dwm(dw->data().data(), cin, geo.rows());
                      dwm.noalias() += xm * dcols.transpose();
                    }
                    if (ctx.input_grads.size() > 2 && ctx.input_grads[2]) {
                      accumulate_channel_sum(ctx.grad_out, *ctx.input_grads[2]);
                    }
                  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, std::optional<Var<T>> bias) {
  constexpr const char* op = "linear";
  Graph<T>& g = graph_of(op, {x, weight});
  if (bias) require_finite(op, bias->value());
  if (x.shape().size() < 2) throw ShapeError("linear: input must have a batch axis, got " + shape_str(x.shape()));
  require_rank(op, weight.shape(), 2, "weight");
  const std::int64_t n = x.shape()[0];
  const std::int64_t f = x.value().numel() / n;
  const std::int64_t o = weight.shape()[0];
  if (weight.shape()[1] != f) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " has " + std::to_string(f) +
                     " features, weight is " + shape_str(weight.shape()));
  }
  check_bias(op, bias, o);
  ConstMatMap<T> xm(x.value().data().data(), n, f);
  ConstMatMap<T> wm(weight.value().data().data(), o, f);
  Tensor<T> out(Shape{n, o});
  MatMap<T> om(out.data().data(), n, o);
  om.noalias() = xm * wm.transpose();
  if (bias) {
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t k = 0; k < o; ++k) om(i, k) += bias->value()[static_cast<std::size_t>(k)];
  }
  return g.record(op, with_optional<T>({x, weight}, bias), std::move(out),
                  [n, f, o](BackwardContext<T>& ctx) {
                    ConstMatMap<T> dy(ctx.grad_out.data().data(), n, o);
                    if (auto* dx = ctx.input_grads[0]) {
                      ConstMatMap<T> wm(ctx.inputs[1]->data().data(), o, f);
                      MatMap<T>(dx->data().data(), n, f).noalias() += dy * wm;
                    }
                    if (auto* dw = ctx.input_grads[1]) {
                      ConstMatMap<T> xm(ctx.inputs[0]->data().data(), n, f);
                      MatMap<T>(dw->data().data(), o, f).noalias() += dy.transpose() * xm;
                    }
                    if (ctx.input_grads.size() > 2 && ctx.input_grads[2]) {
                      auto& db = *ctx.input_grads[2];
                      for (std::int64_t k = 0; k < o; ++k) {
                        double s = 0.0;
                        for (std::int64_t i = 0; i < n; ++i) s += dy(i, k);
                        db[static_cast<std::size_t>(k)] += static_cast<T>(s);
                      }
                    }
                  });
}

template <typename T>
Var<T> instance_norm(Var<T> x, std::optional<Var<T>> gamma, std::optional<Var<T>> beta, double eps) {
  constexpr const char* op = "instance_norm";
  Graph<T>& g = graph_of(op, {x});
  require_rank(op, x.shape(), 4, "input");
  if (gamma.has_value() != beta.has_value()) {
    throw std::invalid_argument("instance_norm: gamma and beta must be given together");
  }
  const std::int64_t n = x.shape()[0], c = x.shape()[1];
  const std::int64_t p = x.shape()[2] * x.shape()[3];
  if (gamma) {
    require_finite(op, gamma->value());
    require_finite(op, beta->value());
    check_bias(op, gamma, c);
    check_bias(op, beta, c);
  }
  // Normalised activations and per-(n, c) inverse deviations are saved for
  // the backward pass.
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * c * p));
  auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * c));
  Tensor<T> out(x.shape());
  const T* xv = x.value().data().data();
  T* ov = out.data().data();
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T* row = xv + i * p;
    double mu = 0.0;
    for (std::int64_t q = 0; q < p; ++q) mu += row[q];
    mu /= static_cast<double>(p);
    double var = 0.0;
    for (std::int64_t q = 0; q < p; ++q) {
      const double d = row[q] - mu;
      var += d * d;
    }
    var /= static_cast<double>(p);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[static_cast<std::size_t>(i)] = is;
    const double gm = gamma ? static_cast<double>(gamma->value()[static_cast<std::size_t>(i % c)]) : 1.0;
    const double bt = beta ? static_cast<double>(beta->value()[static_cast<std::size_t>(i % c)]) : 0.0;
    for (std::int64_t q = 0; q < p; ++q) {
      const T xh = static_cast<T>((row[q] - mu) * is);
      (*xhat)[static_cast<std::size_t>(i * p + q)] = xh;
      ov[i * p + q] = static_cast<T>(gm * xh + bt);
    }
  }
  std::vector<Var<T>> inputs{x};
  if (gamma) {
    inputs.push_back(*gamma);
    inputs.push_back(*beta);
  }
  const bool affine = gamma.has_value();
  return g.record(op, inputs, std::move(out), [xhat, inv, n, c, p, affine](BackwardContext<T>& ctx) {
    const T* go = ctx.grad_out.data().data();
    const T* xh = xhat->data();
    if (affine) {
      auto* dgamma = ctx.input_grads[1];
      auto* dbeta = ctx.input_grads[2];
      for (std::int64_t k = 0; k < c; ++k) {
        double sg = 0.0, sb = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const std::int64_t base = (i * c + k) * p;
          for (std::int64_t q = 0; q < p; ++q) {
            sg += static_cast<double>(go[base + q]) * xh[base + q];
            sb += go[base + q];
          }
        }
        if (dgamma) (*dgamma)[static_cast<std::size_t>(k)] += static_cast<T>(sg);
        if (dbeta) (*dbeta)[static_cast<std::size_t>(k)] += static_cast<T>(sb);
      }
    }
    auto* dx = ctx.input_grads[0];
    if (!dx) return;
    T* d = dx->data().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
      const double gm = affine ? static_cast<double>((*ctx.inputs[1])[static_cast<std::size_t>(i % c)]) : 1.0;
      const std::int64_t base = i * p;
      double s1 = 0.0, s2 = 0.0;
      for (std::int64_t q = 0; q < p; ++q) {
        const double dxh = gm * go[base + q];
        s1 += dxh;
        s2 += dxh * xh[base + q];
      }
      const double is = (*inv)[static_cast<std::size_t>(i)];
      const double pp = static_cast<double>(p);
      for (std::int64_t q = 0; q < p; ++q) {
        const double dxh = gm * go[base + q];
        d[base + q] += static_cast<T>(is / pp * (pp * dxh - s1 - xh[base + q] * s2));
      }
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, double slope) {
  const T s = static_cast<T>(slope);
  return unary<T>(
      "leaky_relu", x, [s](T v) { return v > T(0) ? v : s * v; },
      [s](T v, T) { return v > T(0) ? T(1) : s; });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> abs(Var<T> x) {
  return unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> neg(Var<T> x) {
  return unary<T>(
      "neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> scale(Var<T> x, double factor) {
  const T f = static_cast<T>(factor);
  return unary<T>(
      "scale", x, [f](T v) { return f * v; }, [f](T, T) { return f; });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of("add", {a, b});
  require_same_shape("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const auto av = a.value().data(), bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  return g.record("add", {a, b}, std::move(out), [](BackwardContext<T>& ctx) {
    const auto go = ctx.grad_out.data();
    for (auto* d : ctx.input_grads) {
      if (!d) continue;
      auto dv = d->data();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += go[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add(a, neg(b));
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of("mul", {a, b});
  require_same_shape("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  const auto av = a.value().data(), bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  return g.record("mul", {a, b}, std::move(out), [](BackwardContext<T>& ctx) {
    const auto go = ctx.grad_out.data();
    const auto av = ctx.inputs[0]->data(), bv = ctx.inputs[1]->data();
    if (auto* da = ctx.input_grads[0]) {
      auto d = da->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * bv[i];
    }
    if (auto* db = ctx.input_grads[1]) {
      auto d = db->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * av[i];
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = graph_of("sum", {x});
  double s = 0.0;
  for (const T v : x.value().data()) s += v;
  return g.record("sum", {x}, Tensor<T>::scalar(static_cast<T>(s)), [](BackwardContext<T>& ctx) {
    if (auto* dx = ctx.input_grads[0]) {
      const T go = ctx.grad_out[0];
      for (auto& v : dx->data()) v += go;
    }
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  Graph<T>& g = graph_of("mean", {x});
  double s = 0.0;
  for (const T v : x.value().data()) s += v;
  const double count = static_cast<double>(x.value().numel());
  return g.record("mean", {x}, Tensor<T>::scalar(static_cast<T>(s / count)),
                  [count](BackwardContext<T>& ctx) {
                    if (auto* dx = ctx.input_grads[0]) {
                      const T go = static_cast<T>(ctx.grad_out[0] / count);
                      for (auto& v : dx->data()) v += go;
                    }
                  });
}

template <typename T>
Var<T> sample_mean(Var<T> x) {
  Graph<T>& g = graph_of("sample_mean", {x});
  if (x.shape().empty()) throw ShapeError("sample_mean: rank-0 input");
  const std::int64_t n = x.shape()[0];
  const std::int64_t per = x.value().numel() / n;
  Tensor<T> out(Shape{n});
  const T* xv = x.value().data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t q = 0; q < per; ++q) s += xv[i * per + q];
    out[static_cast<std::size_t>(i)] = static_cast<T>(s / static_cast<double>(per));
  }
  return g.record("sample_mean", {x}, std::move(out), [n, per](BackwardContext<T>& ctx) {
    if (auto* dx = ctx.input_grads[0]) {
      T* d = dx->data().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const T go = static_cast<T>(ctx.grad_out[static_cast<std::size_t>(i)] / static_cast<double>(per));
        for (std::int64_t q = 0; q < per; ++q) d[i * per + q] += go;
      }
    }
  });
}

template <typename T>
Var<T> flatten(Var<T> x) {
  Graph<T>& g = graph_of("flatten", {x});
  if (x.shape().empty()) throw ShapeError("flatten: rank-0 input");
  const std::int64_t n = x.shape()[0];
  Tensor<T> out = x.value().reshaped(Shape{n, x.value().numel() / n});
  return g.record("flatten", {x}, std::move(out), [](BackwardContext<T>& ctx) {
    if (auto* dx = ctx.input_grads[0]) {
      auto d = dx->data();
      const auto go = ctx.grad_out.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  constexpr const char* op = "concat";
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Graph<T>* g = parts[0].graph;
  std::int64_t channels = 0;
  for (const auto& v : parts) {
    graph_of(op, {parts[0], v});
    require_rank(op, v.shape(), 4, "input");
    const auto& s0 = parts[0].shape();
    const auto& s = v.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    }
    channels += s[1];
  }
  const auto& s0 = parts[0].shape();
  const std::int64_t n = s0[0], p = s0[2] * s0[3];
  Tensor<T> out(Shape{n, channels, s0[2], s0[3]});
  std::vector<std::int64_t> widths;
  std::int64_t offset = 0;
  for (const auto& v : parts) {
    const std::int64_t c = v.shape()[1];
    widths.push_back(c);
    const T* src = v.value().data().data();
    for (std::int64_t i = 0; i < n; ++i) {
      std::copy(src + i * c * p, src + (i + 1) * c * p, out.data().data() + (i * channels + offset) * p);
    }
    offset += c;
  }
  return g->record(op, parts, std::move(out), [widths, n, p, channels](BackwardContext<T>& ctx) {
    const T* go = ctx.grad_out.data().data();
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::int64_t c = widths[k];
      if (auto* d = ctx.input_grads[k]) {
        T* dv = d->data().data();
        for (std::int64_t i = 0; i < n; ++i) {
          const T* src = go + (i * channels + offset) * p;
          for (std::int64_t q = 0; q < c * p; ++q) dv[i * c * p + q] += src[q];
        }
      }
      offset += c;
    }
  });
}

template <typename T>
Var<T> tile_label(Var<T> label, std::int64_t height, std::int64_t width) {
  constexpr const char* op = "tile_label";
  Graph<T>& g = graph_of(op, {label});
  require_rank(op, label.shape(), 2, "label");
  if (height <= 0 || width <= 0) throw ShapeError("tile_label: non-positive map size");
  const std::int64_t n = label.shape()[0], k = label.shape()[1], p = height * width;
  Tensor<T> out(Shape{n, k, height, width});
  for (std::int64_t i = 0; i < n * k; ++i) {
    std::fill(out.data().data() + i * p, out.data().data() + (i + 1) * p, label.value()[static_cast<std::size_t>(i)]);
  }
  return g.record(op, {label}, std::move(out), [n, k, p](BackwardContext<T>& ctx) {
    if (auto* d = ctx.input_grads[0]) {
      const T* go = ctx.grad_out.data().data();
      for (std::int64_t i = 0; i < n * k; ++i) {
        double s = 0.0;
        for (std::int64_t q = 0; q < p; ++q) s += go[i * p + q];
        (*d)[static_cast<std::size_t>(i)] += static_cast<T>(s);
      }
    }
  });
}

template <typename T>
Var<T> interpolate(Var<T> a, Var<T> b, const Tensor<T>& u) {
  constexpr const char* op = "interpolate";
  Graph<T>& g = graph_of(op, {a, b});
  require_same_shape(op, a.shape(), b.shape());
  require_finite(op, u);
  if (a.shape().empty() || u.shape() != Shape{a.shape()[0]}) {
    throw ShapeError(std::string(op) + ": coefficients " + shape_str(u.shape()) + " vs input " +
                     shape_str(a.shape()));
  }
  const std::int64_t n = a.shape()[0], per = a.value().numel() / n;
  Tensor<T> out(a.shape());
  const T* av = a.value().data().data();
  const T* bv = b.value().data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T ui = u[static_cast<std::size_t>(i)];
    for (std::int64_t q = 0; q < per; ++q) {
      out[static_cast<std::size_t>(i * per + q)] = ui * av[i * per + q] + (T(1) - ui) * bv[i * per + q];
    }
  }
  return g.record(op, {a, b}, std::move(out), [u, n, per](BackwardContext<T>& ctx) {
    const T* go = ctx.grad_out.data().data();
    for (std::size_t k = 0; k < 2; ++k) {
      auto* d = ctx.input_grads[k];
      if (!d) continue;
      T* dv = d->data().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const T ui = u[static_cast<std::size_t>(i)];
        const T c = k == 0 ? ui : T(1) - ui;
        for (std::int64_t q = 0; q < per; ++q) dv[i * per + q] += c * go[i * per + q];
      }
    }
  });
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets) {
  constexpr const char* op = "bce_with_logits";
  Graph<T>& g = graph_of(op, {logits});
  require_same_shape(op, logits.shape(), targets.shape());
  for (const T t : targets.data()) {
    if (t != T(0) && t != T(1)) throw std::invalid_argument("bce_with_logits: targets must be 0 or 1");
  }
  const auto l = logits.value().data();
  const auto t = targets.data();
  double s = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    const double x = l[i];
    s += std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double count = static_cast<double>(l.size());
  return g.record(op, {logits}, Tensor<T>::scalar(static_cast<T>(s / count)),
                  [targets, count](BackwardContext<T>& ctx) {
                    auto* d = ctx.input_grads[0];
                    if (!d) return;
                    const auto l = ctx.inputs[0]->data();
                    const double go = ctx.grad_out[0];
                    auto dv = d->data();
                    for (std::size_t i = 0; i < dv.size(); ++i) {
                      const double x = l[i];
                      const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                      dv[i] += static_cast<T>(go * (sig - targets[i]) / count);
                    }
                  });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& targets) {
  constexpr const char* op = "softmax_cross_entropy";
  Graph<T>& g = graph_of(op, {logits});
  require_rank(op, logits.shape(), 2, "logits");
  require_same_shape(op, logits.shape(), targets.shape());
  require_finite(op, targets);
  const std::int64_t n = logits.shape()[0], k = logits.shape()[1];
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * k));
  const T* l = logits.value().data().data();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = l[i * k];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(l[i * k + j]));
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(l[i * k + j] - mx);
    const double lse = mx + std::log(z);
    for (std::int64_t j = 0; j < k; ++j) {
      (*probs)[static_cast<std::size_t>(i * k + j)] = std::exp(l[i * k + j] - lse);
      total -= targets[static_cast<std::size_t>(i * k + j)] * (l[i * k + j] - lse);
    }
  }
  return g.record(op, {logits}, Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n))),
                  [probs, targets, n](BackwardContext<T>& ctx) {
                    auto* d = ctx.input_grads[0];
                    if (!d) return;
                    const double go = ctx.grad_out[0] / static_cast<double>(n);
                    auto dv = d->data();
                    for (std::size_t i = 0; i < dv.size(); ++i) {
                      dv[i] += static_cast<T>(go * ((*probs)[i] - targets[i]));
                    }
                  });
}

std::vector<std::string> catalog() {
  return {"conv2d", "conv_transpose2d", "linear",      "instance_norm", "relu",       "leaky_relu",
          "tanh",   "add",              "sub",         "mul",           "neg",        "scale",
          "mean",   "sum",              "sample_mean", "abs",           "concat",     "tile_label",
          "interpolate", "flatten",     "bce_with_logits", "softmax_cross_entropy"};
}

#define MTAT_INSTANTIATE_OPS(T)                                                                    \
  template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>, Conv2dAttrs);                      \
  template Var<T> conv_transpose2d(Var<T>, Var<T>, std::optional<Var<T>>, Conv2dAttrs);            \
  template Var<T> linear(Var<T>, Var<T>, std::optional<Var<T>>);                                   \
  template Var<T> instance_norm(Var<T>, std::optional<Var<T>>, std::optional<Var<T>>, double);     \
  template Var<T> relu(Var<T>);                                                                    \
  template Var<T> leaky_relu(Var<T>, double);                                                      \
  template Var<T> tanh(Var<T>);                                                                    \
  template Var<T> abs(Var<T>);                                                                     \
  template Var<T> neg(Var<T>);                                                                     \
  template Var<T> scale(Var<T>, double);                                                           \
  template Var<T> add(Var<T>, Var<T>);                                                             \
  template Var<T> sub(Var<T>, Var<T>);                                                             \
  template Var<T> mul(Var<T>, Var<T>);                                                             \
  template Var<T> sum(Var<T>);                                                                     \
  template Var<T> mean(Var<T>);                                                                    \
  template Var<T> sample_mean(Var<T>);                                                             \
  template Var<T> flatten(Var<T>);                                                                 \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                     \
  template Var<T> tile_label(Var<T>, std::int64_t, std::int64_t);                                  \
  template Var<T> interpolate(Var<T>, Var<T>, const Tensor<T>&);                                   \
  template Var<T> bce_with_logits(Var<T>, const Tensor<T>&);                                       \
  template Var<T> softmax_cross_entropy(Var<T>, const Tensor<T>&);

MTAT_INSTANTIATE_OPS(float)
MTAT_INSTANTIATE_OPS(double)

#undef MTAT_INSTANTIATE_OPS

}  // namespace mtat::ops
