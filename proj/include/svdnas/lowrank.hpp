#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "svdnas/block_config.hpp"
#include "svdnas/svd.hpp"

namespace svdnas {

// Weights of one low-rank branch. `first` is (R, c/g0, first_h, first_w) and
// `second` is (f, R/g1, second_h, second_w) with R = rank * max(g0, g1).
template <typename T>
struct LowRankFactors {
  BlockConfig cfg;
  NdArray<T> first;
  NdArray<T> second;
};

namespace detail {

struct SliceLayout {
  Index f, c, k;
  Index fs, cs;          // filters / channels per slice
  Index rows, cols;      // slice matrix extents
  Index slices;          // g0 * g1
  Index mid;             // R
};

inline SliceLayout slice_layout(const BlockConfig& cfg, Index f, Index c, Index k) {
  const KernelSplit& s = cfg.split;
  if (std::min(s.first_h, s.second_h) != 1 || std::min(s.first_w, s.second_w) != 1)
    throw ContractError("kernel split " + s.str() + " is not separable into a k x 1 / 1 x k pair");
  SliceLayout l{};
  l.f = f;
  l.c = c;
  l.k = k;
  l.fs = f / cfg.g1;
  l.cs = c / cfg.g0;
  l.rows = l.fs * s.second_h * s.second_w;
  l.cols = l.cs * s.first_h * s.first_w;
  l.slices = cfg.g0 * cfg.g1;
  l.mid = cfg.intermediate_channels();
  return l;
}

// Slice s = q * g0 + p holds filters of group q and channels of group p,
// reshaped so rows run over (filter, second-kernel position) and columns over
// (channel, first-kernel position).
template <typename T>
MatrixX<T> slice_matrix(const NdArray<T>& w, const BlockConfig& cfg, const SliceLayout& l, Index s) {
  const KernelSplit& ks = cfg.split;
  const Index q = s / cfg.g0, p = s % cfg.g0;
  MatrixX<T> m(l.rows, l.cols);
  for (Index fo = 0; fo < l.fs; ++fo)
    for (Index y1 = 0; y1 < ks.second_h; ++y1)
      for (Index x1 = 0; x1 < ks.second_w; ++x1) {
        const Index row = (fo * ks.second_h + y1) * ks.second_w + x1;
        for (Index ci = 0; ci < l.cs; ++ci)
          for (Index y0 = 0; y0 < ks.first_h; ++y0)
            for (Index x0 = 0; x0 < ks.first_w; ++x0) {
              const Index col = (ci * ks.first_h + y0) * ks.first_w + x0;
              m(row, col) = w.at(q * l.fs + fo, p * l.cs + ci, y0 + y1, x0 + x1);
            }
      }
  return m;
}

inline void check_weight(const Shape& ws, const char* who) {
  if (ws.size() != 4 || ws[2] != ws[3])
    throw DimensionError(std::string(who) + ": expected a (f, c, k, k) weight, got " + shape_str(ws));
}

}  // namespace detail

// Every g0*g1 slice matrix of w under cfg, in slice order (p fastest).
template <typename T>
std::vector<MatrixX<T>> slice_matrices(const NdArray<T>& w, const BlockConfig& cfg) {
  detail::check_weight(w.shape(), "slice_matrices");
  const auto l = detail::slice_layout(cfg, w.dim(0), w.dim(1), w.dim(2));
  std::vector<MatrixX<T>> out;
  for (Index s = 0; s < l.slices; ++s) out.push_back(detail::slice_matrix(w, cfg, l, s));
  return out;
}

// Data-free low-rank factors of w: per-slice SVD truncated at cfg.rank with
// sqrt(s) absorbed into both sides, stacked group-major.
template <typename T>
LowRankFactors<T> derive_weights(const NdArray<T>& w, const BlockConfig& cfg) {
  detail::check_weight(w.shape(), "derive_weights");
  const Index f = w.dim(0), c = w.dim(1), k = w.dim(2);
  // Structural checks only: a full-rank factorization may exceed the weight budget.
  const KernelSplit& sp = cfg.split;
  if (sp.first_h * sp.second_h != k || sp.first_w * sp.second_w != k || std::min(cfg.g0, cfg.g1) != 1 ||
      cfg.g0 < 1 || cfg.g1 < 1 || c % cfg.g0 != 0 || f % cfg.g1 != 0 || cfg.rank < 1 ||
      cfg.rank > rank_bound(cfg, f, c))
    throw ContractError("derive_weights: " + cfg.str() + " does not fit a " + shape_str(w.shape()) + " weight");
  const auto l = detail::slice_layout(cfg, f, c, k);
  const KernelSplit& ks = cfg.split;
  const Index r = cfg.rank;

  LowRankFactors<T> out{cfg, NdArray<T>({l.mid, l.cs, ks.first_h, ks.first_w}),
                        NdArray<T>({f, l.mid / cfg.g1, ks.second_h, ks.second_w})};
  for (Index s = 0; s < l.slices; ++s) {
    const Index q = s / cfg.g0;
    const auto dec = svd<T>(detail::slice_matrix(w, cfg, l, s));
    for (Index j = 0; j < r; ++j) {
      const T root = std::sqrt(dec.s[j]);
      const Index m = s * r + j;
      for (Index col = 0; col < l.cols; ++col) out.first[m * l.cols + col] = root * dec.v(j, col);
      const Index local = m - q * (l.mid / cfg.g1);
      for (Index fo = 0; fo < l.fs; ++fo)
        for (Index y1 = 0; y1 < ks.second_h; ++y1)
          for (Index x1 = 0; x1 < ks.second_w; ++x1) {
            const Index row = (fo * ks.second_h + y1) * ks.second_w + x1;
            out.second.at(q * l.fs + fo, local, y1, x1) = root * dec.u(row, j);
          }
    }
  }
  return out;
}

// Dense (f, c, k, k) weight whose single convolution equals the two-stage one.
template <typename T>
NdArray<T> reconstruct(const LowRankFactors<T>& fac) {
  const BlockConfig& cfg = fac.cfg;
  const KernelSplit& ks = cfg.split;
  const Shape& s0 = fac.first.shape();
  const Shape& s1 = fac.second.shape();
  if (s0.size() != 4 || s1.size() != 4) throw ContractError("reconstruct: factors must be 4-d");
  const Index mid = cfg.intermediate_channels();
  const Index f = s1[0], cs = s0[1];
  if (s0[0] != mid || s0[2] != ks.first_h || s0[3] != ks.first_w || s1[1] * cfg.g1 != mid || s1[2] != ks.second_h ||
      s1[3] != ks.second_w || f % cfg.g1 != 0 || mid % cfg.g0 != 0)
    throw ContractError("reconstruct: factor shapes " + shape_str(s0) + " / " + shape_str(s1) + " disagree with " +
                        cfg.str());
  const Index c = cs * cfg.g0;
  const Index kh = ks.first_h + ks.second_h - 1, kw = ks.first_w + ks.second_w - 1;
  const Index mid_in = mid / cfg.g1, mid_out = mid / cfg.g0, fs = f / cfg.g1;

  NdArray<T> w({f, c, kh, kw});
  for (Index fo = 0; fo < f; ++fo) {
    const Index q = fo / fs;
    for (Index ml = 0; ml < mid_in; ++ml) {
      const Index m = q * mid_in + ml;
      const Index p = m / mid_out;
      for (Index y1 = 0; y1 < ks.second_h; ++y1)
        for (Index x1 = 0; x1 < ks.second_w; ++x1) {
          const T a = fac.second.at(fo, ml, y1, x1);
          if (a == T(0)) continue;
          for (Index ci = 0; ci < cs; ++ci)
            for (Index y0 = 0; y0 < ks.first_h; ++y0)
              for (Index x0 = 0; x0 < ks.first_w; ++x0)
                w.at(fo, p * cs + ci, y0 + y1, x0 + x1) += a * fac.first.at(m, ci, y0, x0);
        }
    }
  }
  return w;
}

// E = W - F(branch 0).
template <typename T>
NdArray<T> residual_error(const NdArray<T>& w, const LowRankFactors<T>& branch0) {
  NdArray<T> rec = reconstruct(branch0);
  if (rec.shape() != w.shape())
    throw ContractError("residual_error: branch reconstructs " + shape_str(rec.shape()) + ", weight is " +
                        shape_str(w.shape()));
  return NdArray<T>(w.shape(), VectorX<T>(w.data() - rec.data()));
}

// Keeps the leading `rank` factors of every slice. Under the sqrt split this
// equals re-deriving the factors at the lower rank.
template <typename T>
LowRankFactors<T> truncate_rank(const LowRankFactors<T>& fac, Index rank) {
  const BlockConfig& cfg = fac.cfg;
  if (rank < 1 || rank > cfg.rank) throw ContractError("truncate_rank: rank out of [1, " + std::to_string(cfg.rank) + "]");
  BlockConfig nc = cfg;
  nc.rank = rank;
  const Index G = cfg.max_groups(), slices = cfg.g0 * cfg.g1;
  const Shape& s0 = fac.first.shape();
  const Shape& s1 = fac.second.shape();
  const Index per0 = s0[1] * s0[2] * s0[3];
  const Index f = s1[0], kk1 = s1[2] * s1[3];
  const Index old_in = cfg.rank * G / cfg.g1, new_in = rank * G / cfg.g1, fs = f / cfg.g1;
  LowRankFactors<T> out{nc, NdArray<T>({rank * G, s0[1], s0[2], s0[3]}), NdArray<T>({f, new_in, s1[2], s1[3]})};
  for (Index s = 0; s < slices; ++s) {
    const Index q = s / cfg.g0;
    for (Index j = 0; j < rank; ++j) {
      const Index om = s * cfg.rank + j, nm = s * rank + j;
      out.first.data().segment(nm * per0, per0) = fac.first.data().segment(om * per0, per0);
      const Index ol = om - q * old_in, nl = nm - q * new_in;
      for (Index fo = q * fs; fo < (q + 1) * fs; ++fo)
        out.second.data().segment((fo * new_in + nl) * kk1, kk1) =
            fac.second.data().segment((fo * old_in + ol) * kk1, kk1);
    }
  }
  return out;
}

}  // namespace svdnas
