#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <type_traits>
#include <vector>

#include "svdnas/tensor.hpp"

namespace svdnas {

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops accept equal shapes or a scalar operand.

namespace detail {

template <typename T>
NdArray<T> reduce_to(const NdArray<T>& g, const Shape& shape) {
  if (shape_numel(shape) == g.numel()) return NdArray<T>(shape, g.data());
  return NdArray<T>::constant(shape, g.data().sum());
}

inline void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b || shape_numel(a) == 1 || shape_numel(b) == 1) return;
  if (shape_numel(a) == shape_numel(b)) return;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <typename T>
VectorX<T> bcast(const NdArray<T>& a, Index n) {
  if (a.numel() == n) return a.data();
  return VectorX<T>::Constant(n, a[0]);
}

template <typename T>
const Shape& result_shape(const NdArray<T>& a, const NdArray<T>& b) {
  return a.numel() >= b.numel() ? a.shape() : b.shape();
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast(a.shape(), b.shape(), "add");
  const Shape shape = detail::result_shape(a.value(), b.value());
  const Index n = shape_numel(shape);
  NdArray<T> out(shape, (detail::bcast(a.value(), n) + detail::bcast(b.value(), n)).eval());
  return Tensor<T>::from_op(std::move(out), {a, b}, [a, b](const NdArray<T>& g) {
    a.accumulate(detail::reduce_to(g, a.shape()));
    b.accumulate(detail::reduce_to(g, b.shape()));
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast(a.shape(), b.shape(), "sub");
  const Shape shape = detail::result_shape(a.value(), b.value());
  const Index n = shape_numel(shape);
  NdArray<T> out(shape, (detail::bcast(a.value(), n) - detail::bcast(b.value(), n)).eval());
  return Tensor<T>::from_op(std::move(out), {a, b}, [a, b](const NdArray<T>& g) {
    a.accumulate(detail::reduce_to(g, a.shape()));
    NdArray<T> neg(g.shape(), (-g.data()).eval());
    b.accumulate(detail::reduce_to(neg, b.shape()));
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast(a.shape(), b.shape(), "mul");
  const Shape shape = detail::result_shape(a.value(), b.value());
  const Index n = shape_numel(shape);
  NdArray<T> out(shape, (detail::bcast(a.value(), n) * detail::bcast(b.value(), n)).eval());
  return Tensor<T>::from_op(std::move(out), {a, b}, [a, b, n, shape](const NdArray<T>& g) {
    if (a.requires_grad())
      a.accumulate(detail::reduce_to(NdArray<T>(shape, (g.data() * detail::bcast(b.value(), n)).eval()), a.shape()));
    if (b.requires_grad())
      b.accumulate(detail::reduce_to(NdArray<T>(shape, (g.data() * detail::bcast(a.value(), n)).eval()), b.shape()));
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast(a.shape(), b.shape(), "div");
  const Shape shape = detail::result_shape(a.value(), b.value());
  const Index n = shape_numel(shape);
  NdArray<T> out(shape, (detail::bcast(a.value(), n) / detail::bcast(b.value(), n)).eval());
  return Tensor<T>::from_op(std::move(out), {a, b}, [a, b, n, shape](const NdArray<T>& g) {
    const VectorX<T> bv = detail::bcast(b.value(), n);
    if (a.requires_grad()) a.accumulate(detail::reduce_to(NdArray<T>(shape, (g.data() / bv).eval()), a.shape()));
    if (b.requires_grad()) {
      const VectorX<T> av = detail::bcast(a.value(), n);
      b.accumulate(detail::reduce_to(NdArray<T>(shape, (-g.data() * av / (bv * bv)).eval()), b.shape()));
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  NdArray<T> out(a.shape(), (a.value().data() * factor).eval());
  return Tensor<T>::from_op(std::move(out), {a}, [a, factor](const NdArray<T>& g) {
    a.accumulate(NdArray<T>(g.shape(), (g.data() * factor).eval()));
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  NdArray<T> out(a.shape(), (a.value().data() + c).eval());
  return Tensor<T>::from_op(std::move(out), {a}, [a](const NdArray<T>& g) { a.accumulate(g); });
}

// a + c where c is a constant array of the same shape.
template <typename T>
Tensor<T> add_constant(const Tensor<T>& a, const NdArray<T>& c) {
  if (c.numel() != a.numel()) throw DimensionError("add_constant: shape mismatch");
  NdArray<T> out(a.shape(), (a.value().data() + c.data()).eval());
  return Tensor<T>::from_op(std::move(out), {a}, [a](const NdArray<T>& g) { a.accumulate(g); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  NdArray<T> out(a.shape(), a.value().data().square().eval());
  return Tensor<T>::from_op(std::move(out), {a}, [a](const NdArray<T>& g) {
    a.accumulate(NdArray<T>(g.shape(), (g.data() * a.value().data() * T(2)).eval()));
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  NdArray<T> out(a.shape(), a.value().data().log().eval());
  return Tensor<T>::from_op(std::move(out), {a}, [a](const NdArray<T>& g) {
    a.accumulate(NdArray<T>(g.shape(), (g.data() / a.value().data()).eval()));
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  NdArray<T> out(a.shape(), a.value().data().exp().eval());
  auto y = out;
  return Tensor<T>::from_op(std::move(out), {a}, [a, y](const NdArray<T>& g) {
    a.accumulate(NdArray<T>(g.shape(), (g.data() * y.data()).eval()));
  });
}

// x^p for a constant exponent.
template <typename T>
Tensor<T> pow(const Tensor<T>& a, T p) {
  NdArray<T> out(a.shape(), a.value().data().pow(p).eval());
  return Tensor<T>::from_op(std::move(out), {a}, [a, p](const NdArray<T>& g) {
    const auto& x = a.value().data();
    VectorX<T> d = (p == T(0)) ? VectorX<T>::Zero(x.size()).eval() : (p * x.pow(p - T(1))).eval();
    a.accumulate(NdArray<T>(g.shape(), (g.data() * d).eval()));
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  NdArray<T> out(a.shape(), a.value().data().max(T(0)).eval());
  return Tensor<T>::from_op(std::move(out), {a}, [a](const NdArray<T>& g) {
    a.accumulate(NdArray<T>(g.shape(), (a.value().data() > T(0)).select(g.data(), T(0)).eval()));
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  return Tensor<T>::from_op(NdArray<T>::scalar(a.value().data().sum()), {a}, [a](const NdArray<T>& g) {
    a.accumulate(NdArray<T>::constant(a.shape(), g[0]));
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T n = static_cast<T>(a.numel());
  return Tensor<T>::from_op(NdArray<T>::scalar(a.value().data().sum() / n), {a}, [a, n](const NdArray<T>& g) {
    a.accumulate(NdArray<T>::constant(a.shape(), g[0] / n));
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  NdArray<T> out = a.value().reshaped(std::move(shape));
  return Tensor<T>::from_op(std::move(out), {a}, [a](const NdArray<T>& g) {
    a.accumulate(NdArray<T>(a.shape(), g.data()));
  });
}

// Picks entries of a 1-d tensor.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::vector<Index> idx) {
  NdArray<T> out(Shape{static_cast<Index>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.numel()) throw DimensionError("gather: index out of range");
    out[i] = a.value()[idx[i]];
  }
  return Tensor<T>::from_op(std::move(out), {a}, [a, idx](const NdArray<T>& g) {
    NdArray<T> d(a.shape());
    for (std::size_t i = 0; i < idx.size(); ++i) d[idx[i]] += g[i];
    a.accumulate(d);
  });
}

// Weighted sum of a 1-d tensor against constant coefficients: sum_i w_i c_i.
template <typename T>
Tensor<T> dot_constant(const Tensor<T>& w, const VectorX<T>& c) {
  if (w.numel() != c.size()) throw DimensionError("dot_constant: length mismatch");
  return Tensor<T>::from_op(NdArray<T>::scalar((w.value().data() * c).sum()), {w}, [w, c](const NdArray<T>& g) {
    w.accumulate(NdArray<T>(w.shape(), (c * g[0]).eval()));
  });
}

// Numerically stable softmax over a 1-d tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const auto& x = a.value().data();
  VectorX<T> e = (x - x.maxCoeff()).exp();
  NdArray<T> out(a.shape(), (e / e.sum()).eval());
  auto y = out;
  return Tensor<T>::from_op(std::move(out), {a}, [a, y](const NdArray<T>& g) {
    const T dotp = (g.data() * y.data()).sum();
    a.accumulate(NdArray<T>(g.shape(), (y.data() * (g.data() - dotp)).eval()));
  });
}

// ---------------------------------------------------------------------------
// Convolution.

struct Conv2dOptions {
  Index stride_h = 1;
  Index stride_w = 1;
  Index pad_h = 0;
  Index pad_w = 0;
  Index groups = 1;
};

inline Index conv_out_extent(Index in, Index kernel, Index stride, Index pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  Index n, c, h, w;       // input
  Index f, cg, kh, kw;    // weight
  Index oh, ow, groups;   // output
  Index fg() const { return f / groups; }
  Index k() const { return cg * kh * kw; }
  Index p() const { return oh * ow; }
};

inline ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, const Conv2dOptions& o) {
  if (xs.size() != 4) throw DimensionError("conv2d: input must be NCHW, got " + shape_str(xs));
  if (ws.size() != 4) throw DimensionError("conv2d: weight must be (F,C/g,kh,kw), got " + shape_str(ws));
  if (o.groups < 1 || o.stride_h < 1 || o.stride_w < 1 || o.pad_h < 0 || o.pad_w < 0)
    throw DimensionError("conv2d: invalid stride/padding/groups");
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[1], ws[2], ws[3], 0, 0, o.groups};
  if (g.c % o.groups != 0) throw DimensionError("conv2d: channels " + std::to_string(g.c) + " not divisible by groups " + std::to_string(o.groups));
  if (g.f % o.groups != 0) throw DimensionError("conv2d: filters " + std::to_string(g.f) + " not divisible by groups " + std::to_string(o.groups));
  if (g.cg != g.c / o.groups)
    throw DimensionError("conv2d: weight channel extent " + std::to_string(g.cg) + " != C/groups = " + std::to_string(g.c / o.groups));
  g.oh = conv_out_extent(g.h, g.kh, o.stride_h, o.pad_h);
  g.ow = conv_out_extent(g.w, g.kw, o.stride_w, o.pad_w);
  if (g.oh < 1 || g.ow < 1) throw DimensionError("conv2d: empty output for input " + shape_str(xs) + " weight " + shape_str(ws));
  return g;
}

// cols is row-major (K x N*P) for one group.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, const Conv2dOptions& o, Index group, RowMatrixX<T>& cols) {
  const Index P = g.p(), NP = g.n * P;
  cols.resize(g.k(), NP);
  for (Index ci = 0; ci < g.cg; ++ci) {
    const Index c = group * g.cg + ci;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        T* dst = cols.data() + ((ci * g.kh + i) * g.kw + j) * NP;
        for (Index n = 0; n < g.n; ++n) {
          const T* src = x + (n * g.c + c) * g.h * g.w;
          for (Index oy = 0; oy < g.oh; ++oy) {
            const Index iy = oy * o.stride_h - o.pad_h + i;
            T* row = dst + n * P + oy * g.ow;
            if (iy < 0 || iy >= g.h) {
              std::fill(row, row + g.ow, T(0));
              continue;
            }
            for (Index ox = 0; ox < g.ow; ++ox) {
              const Index ix = ox * o.stride_w - o.pad_w + j;
              row[ox] = (ix >= 0 && ix < g.w) ? src[iy * g.w + ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const RowMatrixX<T>& cols, const ConvGeometry& g, const Conv2dOptions& o, Index group, T* dx) {
  const Index P = g.p(), NP = g.n * P;
  for (Index ci = 0; ci < g.cg; ++ci) {
    const Index c = group * g.cg + ci;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const T* src = cols.data() + ((ci * g.kh + i) * g.kw + j) * NP;
        for (Index n = 0; n < g.n; ++n) {
          T* dst = dx + (n * g.c + c) * g.h * g.w;
          for (Index oy = 0; oy < g.oh; ++oy) {
            const Index iy = oy * o.stride_h - o.pad_h + i;
            if (iy < 0 || iy >= g.h) continue;
            const T* row = src + n * P + oy * g.ow;
            for (Index ox = 0; ox < g.ow; ++ox) {
              const Index ix = ox * o.stride_w - o.pad_w + j;
              if (ix >= 0 && ix < g.w) dst[iy * g.w + ix] += row[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Grouped 2-d cross-correlation. x: (N,C,H,W); w: (F, C/groups, kh, kw).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<std::type_identity_t<Tensor<T>>>& bias,
                 const Conv2dOptions& opt) {
  const detail::ConvGeometry g = detail::conv_geometry(x.shape(), w.shape(), opt);
  if (bias && bias->numel() != g.f) throw DimensionError("conv2d: bias length must equal filters");
  const Index P = g.p(), NP = g.n * P, Fg = g.fg(), K = g.k();

  NdArray<T> out(Shape{g.n, g.f, g.oh, g.ow});
  RowMatrixX<T> cols, res;
  for (Index grp = 0; grp < g.groups; ++grp) {
    detail::im2col(x.value().ptr(), g, opt, grp, cols);
    Eigen::Map<const RowMatrixX<T>> wg(w.value().ptr() + grp * Fg * K, Fg, K);
    res.noalias() = wg * cols;
    for (Index f = 0; f < Fg; ++f) {
      const Index fo = grp * Fg + f;
      for (Index n = 0; n < g.n; ++n) {
        T* dst = out.ptr() + (n * g.f + fo) * P;
        const T* src = res.data() + f * NP + n * P;
        const T b = bias ? bias->value()[fo] : T(0);
        for (Index p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
    }
  }

  std::vector<Tensor<T>> parents{x, w};
  if (bias) parents.push_back(*bias);
  return Tensor<T>::from_op(std::move(out), parents, [x, w, bias, opt, g](const NdArray<T>& gy) {
    const Index P = g.p(), NP = g.n * P, Fg = g.fg(), K = g.k();
    NdArray<T> dx = x.requires_grad() ? NdArray<T>(x.shape()) : NdArray<T>();
    NdArray<T> dw = w.requires_grad() ? NdArray<T>(w.shape()) : NdArray<T>();
    RowMatrixX<T> gout(Fg, NP), cols, dcols;
    for (Index grp = 0; grp < g.groups; ++grp) {
      for (Index f = 0; f < Fg; ++f) {
        const Index fo = grp * Fg + f;
        for (Index n = 0; n < g.n; ++n)
          std::copy_n(gy.ptr() + (n * g.f + fo) * P, P, gout.data() + f * NP + n * P);
      }
      Eigen::Map<const RowMatrixX<T>> wg(w.value().ptr() + grp * Fg * K, Fg, K);
      if (w.requires_grad()) {
        detail::im2col(x.value().ptr(), g, opt, grp, cols);
        Eigen::Map<RowMatrixX<T>> dwg(dw.ptr() + grp * Fg * K, Fg, K);
        dwg.noalias() += gout * cols.transpose();
      }
      if (x.requires_grad()) {
        dcols.noalias() = wg.transpose() * gout;
        detail::col2im_add(dcols, g, opt, grp, dx.ptr());
      }
    }
    if (x.requires_grad()) x.accumulate(dx);
    if (w.requires_grad()) w.accumulate(dw);
    if (bias && bias->requires_grad()) {
      NdArray<T> db(bias->shape());
      for (Index n = 0; n < g.n; ++n)
        for (Index f = 0; f < g.f; ++f)
          db[f] += Eigen::Map<const VectorX<T>>(gy.ptr() + (n * g.f + f) * P, P).sum();
      bias->accumulate(db);
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization.

inline constexpr double kBatchNormEps = 1e-5;

template <typename T>
struct BatchNormResult {
  Tensor<T> output;
  NdArray<T> batch_mean;  // per channel
  NdArray<T> batch_var;   // per channel, population denominator
};

namespace detail {

template <typename T>
void channel_moments(const NdArray<T>& x, VectorX<T>& mean, VectorX<T>& var) {
  const Index N = x.dim(0), C = x.dim(1), HW = x.numel() / (N * C);
  const double m = static_cast<double>(N * HW);
  Eigen::ArrayXd mu = Eigen::ArrayXd::Zero(C), v = Eigen::ArrayXd::Zero(C);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      mu[c] += Eigen::Map<const VectorX<T>>(x.ptr() + (n * C + c) * HW, HW).template cast<double>().sum();
  mu /= m;
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      v[c] += (Eigen::Map<const VectorX<T>>(x.ptr() + (n * C + c) * HW, HW).template cast<double>() - mu[c]).square().sum();
  v /= m;
  mean = mu.cast<T>();
  var = v.cast<T>();
}

inline void check_bn(const Shape& xs, Index channels) {
  if (xs.size() < 2) throw DimensionError("batch_norm: input must be (N,C,...)");
  if (xs[1] != channels)
    throw DimensionError("batch_norm: channel extent " + std::to_string(xs[1]) + " != state length " + std::to_string(channels));
}

}  // namespace detail

// Normalizes with the statistics of the current batch.
template <typename T>
BatchNormResult<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  detail::check_bn(x.shape(), gamma.numel());
  const Index N = x.dim(0), C = x.dim(1), HW = x.numel() / (N * C);
  VectorX<T> mean, var;
  detail::channel_moments(x.value(), mean, var);
  const VectorX<T> inv = (var + T(kBatchNormEps)).rsqrt();

  NdArray<T> xhat(x.shape()), out(x.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Index off = (n * C + c) * HW;
      auto xh = Eigen::Map<VectorX<T>>(xhat.ptr() + off, HW);
      xh = (Eigen::Map<const VectorX<T>>(x.value().ptr() + off, HW) - mean[c]) * inv[c];
      Eigen::Map<VectorX<T>>(out.ptr() + off, HW) = xh * gamma.value()[c] + beta.value()[c];
    }

  BatchNormResult<T> r{Tensor<T>(), NdArray<T>(Shape{C}, mean), NdArray<T>(Shape{C}, var)};
  r.output = Tensor<T>::from_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv, N, C, HW](const NdArray<T>& g) {
    const T m = static_cast<T>(N * HW);
    VectorX<T> sum_g = VectorX<T>::Zero(C), sum_gx = VectorX<T>::Zero(C);
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c) {
        const Index off = (n * C + c) * HW;
        auto gv = Eigen::Map<const VectorX<T>>(g.ptr() + off, HW);
        sum_g[c] += gv.sum();
        sum_gx[c] += (gv * Eigen::Map<const VectorX<T>>(xhat.ptr() + off, HW)).sum();
      }
    if (gamma.requires_grad()) gamma.accumulate(NdArray<T>(gamma.shape(), sum_gx));
    if (beta.requires_grad()) beta.accumulate(NdArray<T>(beta.shape(), sum_g));
    if (x.requires_grad()) {
      NdArray<T> dx(x.shape());
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c) {
          const Index off = (n * C + c) * HW;
          const T k = gamma.value()[c] * inv[c] / m;
          Eigen::Map<VectorX<T>>(dx.ptr() + off, HW) =
              k * (m * Eigen::Map<const VectorX<T>>(g.ptr() + off, HW) - sum_g[c] -
                   Eigen::Map<const VectorX<T>>(xhat.ptr() + off, HW) * sum_gx[c]);
        }
      x.accumulate(dx);
    }
  });
  return r;
}

// Normalizes with stored running statistics.
template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const NdArray<T>& running_mean, const NdArray<T>& running_var) {
  detail::check_bn(x.shape(), gamma.numel());
  if (running_mean.numel() != gamma.numel() || running_var.numel() != gamma.numel())
    throw DimensionError("batch_norm: running statistics length mismatch");
  const Index N = x.dim(0), C = x.dim(1), HW = x.numel() / (N * C);
  const VectorX<T> inv = (running_var.data() + T(kBatchNormEps)).rsqrt();
  NdArray<T> xhat(x.shape()), out(x.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Index off = (n * C + c) * HW;
      auto xh = Eigen::Map<VectorX<T>>(xhat.ptr() + off, HW);
      xh = (Eigen::Map<const VectorX<T>>(x.value().ptr() + off, HW) - running_mean[c]) * inv[c];
      Eigen::Map<VectorX<T>>(out.ptr() + off, HW) = xh * gamma.value()[c] + beta.value()[c];
    }
  return Tensor<T>::from_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv, N, C, HW](const NdArray<T>& g) {
    VectorX<T> sum_g = VectorX<T>::Zero(C), sum_gx = VectorX<T>::Zero(C);
    NdArray<T> dx = x.requires_grad() ? NdArray<T>(x.shape()) : NdArray<T>();
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c) {
        const Index off = (n * C + c) * HW;
        auto gv = Eigen::Map<const VectorX<T>>(g.ptr() + off, HW);
        sum_g[c] += gv.sum();
        sum_gx[c] += (gv * Eigen::Map<const VectorX<T>>(xhat.ptr() + off, HW)).sum();
        if (x.requires_grad()) Eigen::Map<VectorX<T>>(dx.ptr() + off, HW) = gv * (gamma.value()[c] * inv[c]);
      }
    if (gamma.requires_grad()) gamma.accumulate(NdArray<T>(gamma.shape(), sum_gx));
    if (beta.requires_grad()) beta.accumulate(NdArray<T>(beta.shape(), sum_g));
    if (x.requires_grad()) x.accumulate(dx);
  });
}

// Per-channel mean over (N,H,W) of an NCHW tensor, differentiable.
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const Index N = x.dim(0), C = x.dim(1), HW = x.numel() / (N * C);
  VectorX<T> mean, var;
  detail::channel_moments(x.value(), mean, var);
  return Tensor<T>::from_op(NdArray<T>(Shape{C}, mean), {x}, [x, N, C, HW](const NdArray<T>& g) {
    NdArray<T> dx(x.shape());
    const T m = static_cast<T>(N * HW);
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c) Eigen::Map<VectorX<T>>(dx.ptr() + (n * C + c) * HW, HW).setConstant(g[c] / m);
    x.accumulate(dx);
  });
}

// Per-channel population standard deviation over (N,H,W). The gradient of a
// zero-spread channel is taken as zero.
template <typename T>
Tensor<T> channel_std(const Tensor<T>& x) {
  const Index N = x.dim(0), C = x.dim(1), HW = x.numel() / (N * C);
  VectorX<T> mean, var;
  detail::channel_moments(x.value(), mean, var);
  VectorX<T> sd = var.sqrt();
  return Tensor<T>::from_op(NdArray<T>(Shape{C}, sd), {x}, [x, N, C, HW, mean, sd](const NdArray<T>& g) {
    NdArray<T> dx(x.shape());
    const T m = static_cast<T>(N * HW);
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c) {
        if (sd[c] <= T(0)) continue;
        const Index off = (n * C + c) * HW;
        Eigen::Map<VectorX<T>>(dx.ptr() + off, HW) =
            (Eigen::Map<const VectorX<T>>(x.value().ptr() + off, HW) - mean[c]) * (g[c] / (m * sd[c]));
      }
    x.accumulate(dx);
  });
}

// Mean and population std over every element, as two scalars.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> global_moments(const Tensor<T>& x) {
  Tensor<T> flat = reshape(x, Shape{1, 1, x.numel(), 1});
  return {reshape(channel_mean(flat), Shape{1}), reshape(channel_std(flat), Shape{1})};
}

// ---------------------------------------------------------------------------
// Pooling, linear layers.

enum class PoolKind { kMax, kAvg };

template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, Index kernel, Index stride) {
  if (x.shape().size() != 4) throw DimensionError("pool2d: input must be NCHW");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel < 1 || stride < 1 || kernel > H || kernel > W) throw DimensionError("pool2d: kernel exceeds input " + shape_str(x.shape()));
  const Index OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  NdArray<T> out(Shape{N, C, OH, OW});
  std::vector<Index> argmax(kind == PoolKind::kMax ? out.numel() : 0);
  const T* xv = x.value().ptr();
  for (Index nc = 0; nc < N * C; ++nc)
    for (Index oy = 0; oy < OH; ++oy)
      for (Index ox = 0; ox < OW; ++ox) {
        const Index o = (nc * OH + oy) * OW + ox;
        T acc = kind == PoolKind::kMax ? -std::numeric_limits<T>::infinity() : T(0);
        Index best = 0;
        for (Index i = 0; i < kernel; ++i)
          for (Index j = 0; j < kernel; ++j) {
            const Index src = (nc * H + oy * stride + i) * W + ox * stride + j;
            if (kind == PoolKind::kMax) {
              if (xv[src] > acc) {
                acc = xv[src];
                best = src;
              }
            } else {
              acc += xv[src];
            }
          }
        if (kind == PoolKind::kMax) {
          out[o] = acc;
          argmax[o] = best;
        } else {
          out[o] = acc / static_cast<T>(kernel * kernel);
        }
      }
  return Tensor<T>::from_op(std::move(out), {x}, [x, kind, kernel, stride, argmax, N, C, H, W, OH, OW](const NdArray<T>& g) {
    NdArray<T> dx(x.shape());
    const T inv = T(1) / static_cast<T>(kernel * kernel);
    for (Index nc = 0; nc < N * C; ++nc)
      for (Index oy = 0; oy < OH; ++oy)
        for (Index ox = 0; ox < OW; ++ox) {
          const Index o = (nc * OH + oy) * OW + ox;
          if (kind == PoolKind::kMax) {
            dx[argmax[o]] += g[o];
          } else {
            for (Index i = 0; i < kernel; ++i)
              for (Index j = 0; j < kernel; ++j) dx[(nc * H + oy * stride + i) * W + ox * stride + j] += g[o] * inv;
          }
        }
    x.accumulate(dx);
  });
}

// x: (N, in); w: (out, in); b: (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<std::type_identity_t<Tensor<T>>>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  NdArray<T> out(Shape{x.dim(0), w.dim(0)});
  out.matrix().noalias() = x.value().matrix() * w.value().matrix().transpose();
  if (b) out.matrix().rowwise() += b->value().data().matrix().transpose();
  std::vector<Tensor<T>> parents{x, w};
  if (b) parents.push_back(*b);
  return Tensor<T>::from_op(std::move(out), parents, [x, w, b](const NdArray<T>& g) {
    if (x.requires_grad()) {
      NdArray<T> dx(x.shape());
      dx.matrix().noalias() = g.matrix() * w.value().matrix();
      x.accumulate(dx);
    }
    if (w.requires_grad()) {
      NdArray<T> dw(w.shape());
      dw.matrix().noalias() = g.matrix().transpose() * x.value().matrix();
      w.accumulate(dw);
    }
    if (b && b->requires_grad()) b->accumulate(NdArray<T>(b->shape(), g.matrix().colwise().sum().transpose().array().eval()));
  });
}

// ---------------------------------------------------------------------------
// Losses over logits (N, K).

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& logits) {
  if (logits.shape().size() != 2) throw DimensionError("log_softmax: logits must be (N,K)");
  const Index N = logits.dim(0), K = logits.dim(1);
  NdArray<T> out(logits.shape());
  for (Index n = 0; n < N; ++n) {
    auto row = Eigen::Map<const VectorX<T>>(logits.value().ptr() + n * K, K);
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row - mx).exp().sum());
    Eigen::Map<VectorX<T>>(out.ptr() + n * K, K) = row - lse;
  }
  auto y = out;
  return Tensor<T>::from_op(std::move(out), {logits}, [logits, y, N, K](const NdArray<T>& g) {
    NdArray<T> d(logits.shape());
    for (Index n = 0; n < N; ++n) {
      auto gr = Eigen::Map<const VectorX<T>>(g.ptr() + n * K, K);
      auto p = Eigen::Map<const VectorX<T>>(y.ptr() + n * K, K).exp();
      Eigen::Map<VectorX<T>>(d.ptr() + n * K, K) = gr - p * gr.sum();
    }
    logits.accumulate(d);
  });
}

// Mean negative log-likelihood of integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2 || static_cast<Index>(labels.size()) != logits.dim(0))
    throw DimensionError("cross_entropy: label count must equal batch size");
  const Index N = logits.dim(0), K = logits.dim(1);
  NdArray<T> mask(logits.shape());
  for (Index n = 0; n < N; ++n) {
    if (labels[n] < 0 || labels[n] >= K) throw ContractError("cross_entropy: label out of range");
    mask[n * K + labels[n]] = T(-1) / static_cast<T>(N);
  }
  return sum(mul(log_softmax_rows(logits), Tensor<T>(mask)));
}

// KL(softmax(teacher/T) || softmax(student/T)), averaged over the batch.
// The teacher side is a constant.
template <typename T>
Tensor<T> kl_div_softened(const NdArray<T>& teacher_logits, const Tensor<T>& student_logits, T temperature) {
  if (teacher_logits.shape() != student_logits.shape())
    throw DimensionError("kl_div: teacher/student logits shape mismatch");
  const Index N = teacher_logits.dim(0), K = teacher_logits.dim(1);
  NdArray<T> p(teacher_logits.shape());
  T const_term = 0;
  for (Index n = 0; n < N; ++n) {
    VectorX<T> row = Eigen::Map<const VectorX<T>>(teacher_logits.ptr() + n * K, K) / temperature;
    const T mx = row.maxCoeff();
    VectorX<T> logp = row - (mx + std::log((row - mx).exp().sum()));
    VectorX<T> pr = logp.exp();
    Eigen::Map<VectorX<T>>(p.ptr() + n * K, K) = pr;
    const_term += (pr * logp).sum();
  }
  Tensor<T> log_q = log_softmax_rows(scale(student_logits, T(1) / temperature));
  Tensor<T> cross = sum(mul(log_q, Tensor<T>(p)));
  return scale(add_scalar(scale(cross, T(-1)), const_term), T(1) / static_cast<T>(N));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) throw DimensionError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return mean(square(sub(a, b)));
}

}  // namespace svdnas
