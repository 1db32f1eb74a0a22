#pragma once

// Shared test helpers: finite-difference gradient oracle and naive reference
// kernels that stay independent of the production code paths.

#include <cmath>
#include <functional>
#include <vector>

#include "svdnas/ops.hpp"
#include "svdnas/random.hpp"

namespace svdnas::testing {

// Central-difference gradient of a scalar function of one array.
inline NdArray<double> numeric_gradient(const std::function<double(const NdArray<double>&)>& f,
                                        const NdArray<double>& at, double h = 1e-3) {
  NdArray<double> g(at.shape());
  NdArray<double> probe = at;
  for (Index i = 0; i < at.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

// Norm-wise relative error between analytic and numeric gradients.
inline double relative_error(const NdArray<double>& a, const NdArray<double>& b) {
  const double denom = std::max({a.data().matrix().norm(), b.data().matrix().norm(), 1e-12});
  return (a.data() - b.data()).matrix().norm() / denom;
}

// Checks d(loss)/d(inputs[k]) against central differences for every k.
// `loss` builds the scalar from leaf tensors.
inline double max_gradient_error(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss,
                                 const std::vector<NdArray<double>>& inputs, double h = 1e-3) {
  std::vector<Tensor<double>> leaves;
  for (const auto& v : inputs) leaves.emplace_back(v, true);
  backward(loss(leaves));
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const NdArray<double>& probe) {
      std::vector<Tensor<double>> args;
      for (std::size_t j = 0; j < inputs.size(); ++j) args.emplace_back(j == k ? probe : inputs[j], false);
      return loss(args).item();
    };
    worst = std::max(worst, relative_error(leaves[k].grad(), numeric_gradient(f, inputs[k], h)));
  }
  return worst;
}

// Seven-nested-loop grouped convolution.
template <typename T>
NdArray<T> naive_conv2d(const NdArray<T>& x, const NdArray<T>& w, const Conv2dOptions& o) {
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index F = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const Index OH = (H + 2 * o.pad_h - KH) / o.stride_h + 1, OW = (W + 2 * o.pad_w - KW) / o.stride_w + 1;
  const Index Fg = F / o.groups;
  NdArray<T> y(Shape{N, F, OH, OW});
  for (Index n = 0; n < N; ++n)
    for (Index f = 0; f < F; ++f)
      for (Index oy = 0; oy < OH; ++oy)
        for (Index ox = 0; ox < OW; ++ox) {
          double acc = 0;
          const Index g = f / Fg;
          for (Index ci = 0; ci < Cg; ++ci)
            for (Index i = 0; i < KH; ++i)
              for (Index j = 0; j < KW; ++j) {
                const Index iy = oy * o.stride_h - o.pad_h + i, ix = ox * o.stride_w - o.pad_w + j;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += double(x.at(n, g * Cg + ci, iy, ix)) * double(w.at(f, ci, i, j));
              }
          y.at(n, f, oy, ox) = static_cast<T>(acc);
        }
  (void)C;
  return y;
}

template <typename T>
double max_abs_diff(const NdArray<T>& a, const NdArray<T>& b) {
  if (a.numel() != b.numel()) return INFINITY;
  return (a.data().template cast<double>() - b.data().template cast<double>()).abs().maxCoeff();
}

template <typename T>
double rel_frobenius(const NdArray<T>& a, const NdArray<T>& ref) {
  const double num = (a.data().template cast<double>() - ref.data().template cast<double>()).matrix().norm();
  const double den = std::max(ref.data().template cast<double>().matrix().norm(), 1e-30);
  return num / den;
}

}  // namespace svdnas::testing
