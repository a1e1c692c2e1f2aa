#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <optional>

#include "pcn/tensor.hpp"

namespace pcn {

namespace detail {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class Elementwise { Add, Sub, Mul, Div, Max, Neg, Sigmoid, Tanh, Exp, Log, Relu };

inline bool is_binary(Elementwise kind) {
  switch (kind) {
    case Elementwise::Add:
    case Elementwise::Sub:
    case Elementwise::Mul:
    case Elementwise::Div:
    case Elementwise::Max:
      return true;
    default:
      return false;
  }
}

/// Binary elementwise op. Shapes must match, or one side must hold a single
/// element which is broadcast. Max sends the gradient of a tie to `a`.
inline Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  if (!is_binary(kind)) throw std::invalid_argument("elementwise: unary kind given two operands");
  const std::size_t na = a.size(), nb = b.size();
  Shape shape;
  if (a.shape() == b.shape()) {
    shape = a.shape();
  } else if (nb == 1) {
    shape = a.shape();
  } else if (na == 1) {
    shape = b.shape();
  } else {
    throw ShapeError("elementwise: shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  const std::size_t n = numel(shape);
  const bool sa = na == 1 && n != 1, sb = nb == 1 && n != 1;
  auto av = a.data(), bv = b.data();
  auto at = [&](std::size_t i) { return av[sa ? 0 : i]; };
  auto bt = [&](std::size_t i) { return bv[sb ? 0 : i]; };

  RealVector out(n);
  switch (kind) {
    case Elementwise::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = at(i) + bt(i);
      break;
    case Elementwise::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = at(i) - bt(i);
      break;
    case Elementwise::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = at(i) * bt(i);
      break;
    case Elementwise::Div:
      for (std::size_t i = 0; i < n; ++i) {
        if (bt(i) == Real(0)) throw DomainError("elementwise div: division by zero");
        out[i] = at(i) / bt(i);
      }
      break;
    case Elementwise::Max:
      for (std::size_t i = 0; i < n; ++i) out[i] = at(i) >= bt(i) ? at(i) : bt(i);
      break;
    default:
      break;
  }

  return detail::make_result(
      std::move(shape), std::move(out), {a.node(), b.node()},
      [kind, n, sa, sb](detail::Node& self) {
        detail::Node& A = *self.inputs[0];
        detail::Node& B = *self.inputs[1];
        const Real* g = self.grad.data();
        const auto& x = A.value;
        const auto& y = B.value;
        auto xa = [&](std::size_t i) { return x[sa ? 0 : i]; };
        auto yb = [&](std::size_t i) { return y[sb ? 0 : i]; };
        Real* ga = A.requires_grad ? A.grad_buffer() : nullptr;
        Real* gb = B.requires_grad ? B.grad_buffer() : nullptr;
        for (std::size_t i = 0; i < n; ++i) {
          Real da = 0, db = 0;
          switch (kind) {
            case Elementwise::Add: da = g[i]; db = g[i]; break;
            case Elementwise::Sub: da = g[i]; db = -g[i]; break;
            case Elementwise::Mul: da = g[i] * yb(i); db = g[i] * xa(i); break;
            case Elementwise::Div:
              da = g[i] / yb(i);
              db = -g[i] * xa(i) / (yb(i) * yb(i));
              break;
            case Elementwise::Max:
              if (xa(i) >= yb(i)) da = g[i]; else db = g[i];
              break;
            default: break;
          }
          if (ga) ga[sa ? 0 : i] += da;
          if (gb) gb[sb ? 0 : i] += db;
        }
      });
}

/// Unary elementwise op.
inline Tensor elementwise(Elementwise kind, const Tensor& a) {
  if (is_binary(kind)) throw std::invalid_argument("elementwise: binary kind given one operand");
  const std::size_t n = a.size();
  auto x = a.data();
  RealVector out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real v = x[i];
    switch (kind) {
      case Elementwise::Neg: out[i] = -v; break;
      case Elementwise::Sigmoid:
        out[i] = v >= 0 ? Real(1) / (Real(1) + std::exp(-v))
                        : std::exp(v) / (Real(1) + std::exp(v));
        break;
      case Elementwise::Tanh: out[i] = std::tanh(v); break;
      case Elementwise::Exp: out[i] = std::exp(v); break;
      case Elementwise::Log:
        if (!(v > 0)) throw DomainError("elementwise log: argument must be positive");
        out[i] = std::log(v);
        break;
      case Elementwise::Relu: out[i] = v > 0 ? v : Real(0); break;
      default: break;
    }
  }
  return detail::make_result(a.shape(), std::move(out), {a.node()}, [kind, n](detail::Node& self) {
    detail::Node& A = *self.inputs[0];
    const Real* g = self.grad.data();
    const auto& x = A.value;
    const auto& y = self.value;
    Real* ga = A.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      switch (kind) {
        case Elementwise::Neg: ga[i] -= g[i]; break;
        case Elementwise::Sigmoid: ga[i] += g[i] * y[i] * (Real(1) - y[i]); break;
        case Elementwise::Tanh: ga[i] += g[i] * (Real(1) - y[i] * y[i]); break;
        case Elementwise::Exp: ga[i] += g[i] * y[i]; break;
        case Elementwise::Log: ga[i] += g[i] / x[i]; break;
        case Elementwise::Relu: ga[i] += x[i] > 0 ? g[i] : Real(0); break;
        default: break;
      }
    }
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::Add, a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::Sub, a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::Mul, a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::Div, a, b); }
inline Tensor operator-(const Tensor& a) { return elementwise(Elementwise::Neg, a); }
inline Tensor operator*(const Tensor& a, Real s) { return a * Tensor::scalar(s); }
inline Tensor operator*(Real s, const Tensor& a) { return a * Tensor::scalar(s); }
inline Tensor maximum(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::Max, a, b); }
inline Tensor sigmoid(const Tensor& a) { return elementwise(Elementwise::Sigmoid, a); }
inline Tensor tanh(const Tensor& a) { return elementwise(Elementwise::Tanh, a); }
inline Tensor exp(const Tensor& a) { return elementwise(Elementwise::Exp, a); }
inline Tensor log(const Tensor& a) { return elementwise(Elementwise::Log, a); }
inline Tensor relu(const Tensor& a) { return elementwise(Elementwise::Relu, a); }

inline Tensor zeros_like(const Tensor& a) { return Tensor::zeros(a.shape()); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be 2-D");
  detail::require(a.dim(1) == b.dim(0), "matmul: inner dimensions differ, " +
                                            to_string(a.shape()) + " x " + to_string(b.shape()));
  const Eigen::Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  RealVector out(m * n);
  detail::MatrixMap(out.data(), m, n).noalias() =
      detail::ConstMatrixMap(a.data().data(), m, k) * detail::ConstMatrixMap(b.data().data(), k, n);
  return detail::make_result({std::size_t(m), std::size_t(n)}, std::move(out), {a.node(), b.node()},
                             [m, k, n](detail::Node& self) {
                               detail::Node& A = *self.inputs[0];
                               detail::Node& B = *self.inputs[1];
                               detail::ConstMatrixMap g(self.grad.data(), m, n);
                               if (A.requires_grad) {
                                 detail::MatrixMap(A.grad_buffer(), m, k).noalias() +=
                                     g * detail::ConstMatrixMap(B.value.data(), k, n).transpose();
                               }
                               if (B.requires_grad) {
                                 detail::MatrixMap(B.grad_buffer(), k, n).noalias() +=
                                     detail::ConstMatrixMap(A.value.data(), m, k).transpose() * g;
                               }
                             });
}

/// Adds `bias` (1-D, length x.dim(axis)) along `axis` of `x`.
inline Tensor add_bias(const Tensor& x, const Tensor& bias, std::size_t axis) {
  detail::require(axis < x.rank(), "add_bias: axis out of range");
  detail::require(bias.rank() == 1 && bias.dim(0) == x.dim(axis),
                  "add_bias: bias " + to_string(bias.shape()) + " does not fit axis " +
                      std::to_string(axis) + " of " + to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t c = x.dim(axis);
  RealVector out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < c; ++j) {
      Real* p = out.data() + (o * c + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[j];
    }
  return detail::make_result(x.shape(), std::move(out), {x.node(), bias.node()},
                             [outer, inner, c](detail::Node& self) {
                               detail::Node& X = *self.inputs[0];
                               detail::Node& B = *self.inputs[1];
                               const Real* g = self.grad.data();
                               if (X.requires_grad) {
                                 Real* gx = X.grad_buffer();
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i];
                               }
                               if (B.requires_grad) {
                                 Real* gb = B.grad_buffer();
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t j = 0; j < c; ++j) {
                                     const Real* p = g + (o * c + j) * inner;
                                     Real s = 0;
                                     for (std::size_t i = 0; i < inner; ++i) s += p[i];
                                     gb[j] += s;
                                   }
                               }
                             });
}

/// x[N x in] * w[in x out] + b[out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b, 1);
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
};

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width, filters, kh, kw, out_h, out_w;
  ConvOptions opt;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

inline void im2col(const Real* img, const ConvGeometry& g, Real* cols) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Real* row = cols + ((c * g.kh + ki) * g.kw + kj) * P;
        const Real* plane = img + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = long(oy * g.opt.stride + ki * g.opt.dilation) - long(g.opt.pad);
          Real* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= long(g.height)) {
            std::fill(dst, dst + g.out_w, Real(0));
            continue;
          }
          const Real* src = plane + std::size_t(iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = long(ox * g.opt.stride + kj * g.opt.dilation) - long(g.opt.pad);
            dst[ox] = (ix < 0 || ix >= long(g.width)) ? Real(0) : src[ix];
          }
        }
      }
}

inline void col2im(const Real* cols, const ConvGeometry& g, Real* img) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Real* row = cols + ((c * g.kh + ki) * g.kw + kj) * P;
        Real* plane = img + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = long(oy * g.opt.stride + ki * g.opt.dilation) - long(g.opt.pad);
          if (iy < 0 || iy >= long(g.height)) continue;
          Real* dst = plane + std::size_t(iy) * g.width;
          const Real* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = long(ox * g.opt.stride + kj * g.opt.dilation) - long(g.opt.pad);
            if (ix >= 0 && ix < long(g.width)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution (cross-correlation) of a [C,H,W] or [N,C,H,W] input with
/// [F,C,kh,kw] kernels. Dilation > 1 gives the "holes" variant.
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, ConvOptions opt = {}) {
  detail::require(input.rank() == 3 || input.rank() == 4, "conv2d: input must be [C,H,W] or [N,C,H,W]");
  detail::require(kernels.rank() == 4, "conv2d: kernels must be [F,C,kh,kw]");
  if (opt.stride < 1 || opt.dilation < 1) throw std::invalid_argument("conv2d: stride and dilation must be >= 1");
  const bool batched = input.rank() == 4;
  const std::size_t N = batched ? input.dim(0) : 1;
  const std::size_t off = batched ? 1 : 0;
  detail::ConvGeometry g{};
  g.channels = input.dim(off);
  g.height = input.dim(off + 1);
  g.width = input.dim(off + 2);
  g.filters = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  g.opt = opt;
  detail::require(kernels.dim(1) == g.channels, "conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                                                    " != input channels " + std::to_string(g.channels));
  const long span_h = long(opt.dilation * (g.kh - 1) + 1), span_w = long(opt.dilation * (g.kw - 1) + 1);
  const long oh = (long(g.height + 2 * opt.pad) - span_h) / long(opt.stride) + 1;
  const long ow = (long(g.width + 2 * opt.pad) - span_w) / long(opt.stride) + 1;
  if (long(g.height + 2 * opt.pad) < span_h || long(g.width + 2 * opt.pad) < span_w || oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: output dimension <= 0 for input " + to_string(input.shape()) + " and kernel " +
                     to_string(kernels.shape()));
  }
  g.out_h = std::size_t(oh);
  g.out_w = std::size_t(ow);

  const std::size_t K = g.patch(), P = g.positions(), F = g.filters;
  const std::size_t in_len = g.channels * g.height * g.width, out_len = F * P;
  auto cols = std::make_shared<RealVector>(N * K * P);
  RealVector out(N * out_len);
  detail::ConstMatrixMap W(kernels.data().data(), F, K);
  for (std::size_t n = 0; n < N; ++n) {
    Real* c = cols->data() + n * K * P;
    detail::im2col(input.data().data() + n * in_len, g, c);
    detail::MatrixMap(out.data() + n * out_len, F, P).noalias() = W * detail::ConstMatrixMap(c, K, P);
  }
  Shape shape = batched ? Shape{N, F, g.out_h, g.out_w} : Shape{F, g.out_h, g.out_w};
  return detail::make_result(
      std::move(shape), std::move(out), {input.node(), kernels.node()},
      [g, N, K, P, F, in_len, out_len, cols](detail::Node& self) {
        detail::Node& X = *self.inputs[0];
        detail::Node& Wn = *self.inputs[1];
        detail::ConstMatrixMap W(Wn.value.data(), F, K);
        RealVector dcols(X.requires_grad ? K * P : 0);
        for (std::size_t n = 0; n < N; ++n) {
          detail::ConstMatrixMap G(self.grad.data() + n * out_len, F, P);
          if (Wn.requires_grad) {
            detail::MatrixMap(Wn.grad_buffer(), F, K).noalias() +=
                G * detail::ConstMatrixMap(cols->data() + n * K * P, K, P).transpose();
          }
          if (X.requires_grad) {
            detail::MatrixMap(dcols.data(), K, P).noalias() = W.transpose() * G;
            detail::col2im(dcols.data(), g, X.grad_buffer() + n * in_len);
          }
        }
      });
}

/// conv2d followed by a per-filter bias.
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, ConvOptions opt = {}) {
  Tensor y = conv2d(input, kernels, opt);
  return add_bias(y, bias, y.rank() == 4 ? 1 : 0);
}

/// Max pooling over the two trailing axes of [C,H,W] or [N,C,H,W]; floor mode.
inline Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  detail::require(x.rank() == 3 || x.rank() == 4, "max_pool2d: input must be 3-D or 4-D");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  detail::require(kernel >= 1 && stride >= 1 && H >= kernel && W >= kernel, "max_pool2d: window larger than input");
  const std::size_t oh = (H - kernel) / stride + 1, ow = (W - kernel) / stride + 1;
  const std::size_t planes = x.size() / (H * W);
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  RealVector out(planes * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  auto v = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * H * W + oy * stride * W + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = p * H * W + (oy * stride + ky) * W + ox * stride + kx;
            if (v[idx] > v[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = v[best];
        (*argmax)[o] = best;
      }
  return detail::make_result(std::move(shape), std::move(out), {x.node()}, [argmax](detail::Node& self) {
    Real* gx = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax->size(); ++o) gx[(*argmax)[o]] += self.grad[o];
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class Reduce { Sum, Mean, Max };

/// Reduces over `axis` (removing it), or over every element when no axis is
/// given. Max routes the gradient to the first maximal element.
inline Tensor reduce(Reduce kind, const Tensor& x, std::optional<std::size_t> axis = std::nullopt) {
  std::size_t outer = 1, len = x.size(), inner = 1;
  Shape shape;
  if (axis) {
    if (*axis >= x.rank()) {
      throw ShapeError("reduce: axis " + std::to_string(*axis) + " invalid for " + to_string(x.shape()));
    }
    for (std::size_t i = 0; i < *axis; ++i) outer *= x.dim(i);
    len = x.dim(*axis);
    for (std::size_t i = *axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    shape = x.shape();
    shape.erase(shape.begin() + long(*axis));
  }
  if (len == 0) throw ShapeError("reduce: empty axis");
  auto v = x.data();
  RealVector out(outer * inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(kind == Reduce::Max ? out.size() : 0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      Real acc = kind == Reduce::Max ? v[base] : Real(0);
      std::size_t best = base;
      for (std::size_t j = 0; j < len; ++j) {
        const Real e = v[base + j * inner];
        if (kind == Reduce::Max) {
          if (e > acc) { acc = e; best = base + j * inner; }
        } else {
          acc += e;
        }
      }
      if (kind == Reduce::Mean) acc /= Real(len);
      out[o * inner + i] = acc;
      if (kind == Reduce::Max) (*arg)[o * inner + i] = best;
    }
  return detail::make_result(std::move(shape), std::move(out), {x.node()},
                             [kind, outer, len, inner, arg](detail::Node& self) {
                               Real* gx = self.inputs[0]->grad_buffer();
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < inner; ++i) {
                                   const Real g = self.grad[o * inner + i];
                                   if (kind == Reduce::Max) {
                                     gx[(*arg)[o * inner + i]] += g;
                                     continue;
                                   }
                                   const Real share = kind == Reduce::Mean ? g / Real(len) : g;
                                   const std::size_t base = o * len * inner + i;
                                   for (std::size_t j = 0; j < len; ++j) gx[base + j * inner] += share;
                                 }
                             });
}

inline Tensor sum(const Tensor& x) { return reduce(Reduce::Sum, x); }
inline Tensor mean(const Tensor& x) { return reduce(Reduce::Mean, x); }

// ---------------------------------------------------------------------------
// Rearrangements: every one is a bijection (or a projection for select/slice)
// described by a source-index map; backward scatters through the same map.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor gather_op(const Tensor& x, Shape shape, std::shared_ptr<std::vector<std::size_t>> source) {
  auto v = x.data();
  RealVector out(source->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[(*source)[i]];
  return make_result(std::move(shape), std::move(out), {x.node()}, [source](Node& self) {
    Real* gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < source->size(); ++i) gx[(*source)[i]] += self.grad[i];
  });
}

}  // namespace detail

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  RealVector out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), {x.node()}, [](detail::Node& self) {
    Real* gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Output axis i is input axis axes[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  detail::require(axes.size() == r, "permute: axis list length must equal rank");
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    detail::require(a < r && !seen[a], "permute: axes must be a permutation");
    seen[a] = true;
  }
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) shape[i] = x.dim(axes[i]);
  const auto in_strides = detail::strides_of(x.shape());
  auto source = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < x.size(); ++o) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < r; ++i) s += idx[i] * in_strides[axes[i]];
    (*source)[o] = s;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  return detail::gather_op(x, std::move(shape), std::move(source));
}

/// Reverses the listed axes.
inline Tensor flip(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  std::vector<bool> flipped(r, false);
  for (auto a : axes) {
    detail::require(a < r, "flip: axis out of range");
    flipped[a] = true;
  }
  const auto strides = detail::strides_of(x.shape());
  auto source = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < x.size(); ++o) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < r; ++i) s += (flipped[i] ? x.dim(i) - 1 - idx[i] : idx[i]) * strides[i];
    (*source)[o] = s;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < x.dim(i)) break;
      idx[i] = 0;
    }
  }
  return detail::gather_op(x, x.shape(), std::move(source));
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::require(axis < x.rank() && begin < end && end <= x.dim(axis), "slice: bad range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis), n = end - begin;
  Shape shape = x.shape();
  shape[axis] = n;
  auto source = std::make_shared<std::vector<std::size_t>>(outer * n * inner);
  std::size_t o = 0;
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t j = begin; j < end; ++j)
      for (std::size_t i = 0; i < inner; ++i) (*source)[o++] = (a * len + j) * inner + i;
  return detail::gather_op(x, std::move(shape), std::move(source));
}

/// Index `index` along `axis`, removing that axis.
inline Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  detail::require(axis < x.rank() && index < x.dim(axis), "select: index out of range");
  Shape shape = x.shape();
  shape.erase(shape.begin() + long(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  auto source = std::make_shared<std::vector<std::size_t>>(outer * inner);
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t i = 0; i < inner; ++i) (*source)[a * inner + i] = (a * x.dim(axis) + index) * inner + i;
  return detail::gather_op(x, std::move(shape), std::move(source));
}

/// Rows of a [N, ...] tensor picked by index (repeats allowed).
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  detail::require(x.rank() >= 1, "gather_rows: scalar input");
  const std::size_t row_len = x.size() / std::max<std::size_t>(x.dim(0), 1);
  Shape shape = x.shape();
  shape[0] = rows.size();
  auto source = std::make_shared<std::vector<std::size_t>>(rows.size() * row_len);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::require(rows[r] < x.dim(0), "gather_rows: row index out of range");
    for (std::size_t i = 0; i < row_len; ++i) (*source)[r * row_len + i] = rows[r] * row_len + i;
  }
  return detail::gather_op(x, std::move(shape), std::move(source));
}

/// Joins equally shaped tensors along a new axis.
inline Tensor stack(const std::vector<Tensor>& parts, std::size_t axis = 0) {
  detail::require(!parts.empty(), "stack: no inputs");
  const Shape& base = parts[0].shape();
  detail::require(axis <= base.size(), "stack: axis out of range");
  for (const auto& p : parts) {
    detail::require(p.shape() == base, "stack: shape mismatch " + to_string(p.shape()) + " vs " + to_string(base));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
  for (std::size_t i = axis; i < base.size(); ++i) inner *= base[i];
  const std::size_t k = parts.size();
  Shape shape = base;
  shape.insert(shape.begin() + long(axis), k);
  RealVector out(outer * k * inner);
  std::vector<detail::NodePtr> inputs;
  for (std::size_t j = 0; j < k; ++j) {
    auto v = parts[j].data();
    for (std::size_t a = 0; a < outer; ++a)
      std::copy_n(v.data() + a * inner, inner, out.data() + (a * k + j) * inner);
    inputs.push_back(parts[j].node());
  }
  return detail::make_result(std::move(shape), std::move(out), std::move(inputs),
                             [outer, inner, k](detail::Node& self) {
                               for (std::size_t j = 0; j < k; ++j) {
                                 detail::Node& in = *self.inputs[j];
                                 if (!in.requires_grad) continue;
                                 Real* g = in.grad_buffer();
                                 for (std::size_t a = 0; a < outer; ++a) {
                                   const Real* src = self.grad.data() + (a * k + j) * inner;
                                   for (std::size_t i = 0; i < inner; ++i) g[a * inner + i] += src[i];
                                 }
                               }
                             });
}

/// Concatenates along an existing axis.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& base = parts[0].shape();
  detail::require(axis < base.size(), "concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= base[i];
  for (std::size_t i = axis + 1; i < base.size(); ++i) inner *= base[i];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = base;
    detail::require(a.size() == b.size(), "concat: rank mismatch");
    a[axis] = b[axis] = 0;
    detail::require(a == b, "concat: shape mismatch off the concat axis");
    lens.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape shape = base;
  shape[axis] = total;
  RealVector out(outer * total * inner);
  std::vector<detail::NodePtr> inputs;
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    auto v = parts[j].data();
    const std::size_t chunk = lens[j] * inner;
    for (std::size_t a = 0; a < outer; ++a)
      std::copy_n(v.data() + a * chunk, chunk, out.data() + a * total * inner + offset * inner);
    offset += lens[j];
    inputs.push_back(parts[j].node());
  }
  return detail::make_result(std::move(shape), std::move(out), std::move(inputs),
                             [outer, inner, total, lens](detail::Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t j = 0; j < lens.size(); ++j) {
                                 detail::Node& in = *self.inputs[j];
                                 const std::size_t chunk = lens[j] * inner;
                                 if (in.requires_grad) {
                                   Real* g = in.grad_buffer();
                                   for (std::size_t a = 0; a < outer; ++a) {
                                     const Real* src = self.grad.data() + a * total * inner + offset * inner;
                                     for (std::size_t i = 0; i < chunk; ++i) g[a * chunk + i] += src[i];
                                   }
                                 }
                                 offset += lens[j];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
  detail::require(x.rank() >= 1, "softmax: scalar input");
  const std::size_t c = x.dim(x.rank() - 1), rows = x.size() / c;
  auto v = x.data();
  RealVector out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = v.data() + r * c;
    Real* o = out.data() + r * c;
    const Real mx = *std::max_element(in, in + c);
    Real z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  return detail::make_result(x.shape(), std::move(out), {x.node()}, [rows, c](detail::Node& self) {
    Real* gx = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = self.value.data() + r * c;
      const Real* g = self.grad.data() + r * c;
      Real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += y[j] * (g[j] - dot);
    }
  });
}

}  // namespace pcn
