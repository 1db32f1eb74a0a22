#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "svdnas/ndarray.hpp"

namespace svdnas {

// Thin SVD: input ~= u * diag(s) * v with u (rows x k), v (k x cols),
// k = min(rows, cols), s descending and non-negative.
template <typename T>
struct SvdResult {
  MatrixX<T> u;
  VectorX<T> s;
  MatrixX<T> v;

  Index rank_bound() const { return s.size(); }

  // Rank-r truncation u_r * diag(s_r) * v_r.
  MatrixX<T> truncated(Index r) const {
    r = std::min<Index>(r, s.size());
    return u.leftCols(r) * s.head(r).matrix().asDiagonal() * v.topRows(r);
  }
};

namespace detail {

// One-sided (Hestenes) Jacobi on the columns of a (m >= n). On return a holds
// U * diag(s) column-wise and vt accumulates the right rotations.
inline void hestenes_jacobi(MatrixX<double>& a, MatrixX<double>& vmat) {
  const Index n = a.cols();
  vmat = MatrixX<double>::Identity(n, n);
  constexpr double tol = 1e-15;
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (Index p = 0; p + 1 < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double alpha = a.col(p).squaredNorm();
        const double beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Index i = 0; i < a.rows(); ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        for (Index i = 0; i < n; ++i) {
          const double vp = vmat(i, p), vq = vmat(i, q);
          vmat(i, p) = c * vp - s * vq;
          vmat(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
}

// Fills columns [from, k) of u with an orthonormal completion of the first
// `from` columns using Gram-Schmidt over the standard basis.
inline void complete_orthonormal(MatrixX<double>& u, Index from) {
  const Index m = u.rows();
  Index col = from;
  for (Index e = 0; e < m && col < u.cols(); ++e) {
    Eigen::VectorXd cand = Eigen::VectorXd::Unit(m, e);
    for (int pass = 0; pass < 2; ++pass)
      for (Index j = 0; j < col; ++j) cand -= u.col(j).dot(cand) * u.col(j);
    const double nrm = cand.norm();
    if (nrm > 1e-6) u.col(col++) = cand / nrm;
  }
}

}  // namespace detail

// SVD by one-sided Jacobi, computed in double precision. Sign convention: the
// largest-magnitude entry of every left singular vector is non-negative.
template <typename T>
SvdResult<T> svd(const Eigen::Ref<const MatrixX<T>>& matrix) {
  const Index rows = matrix.rows(), cols = matrix.cols();
  if (rows < 1 || cols < 1) throw DimensionError("svd: empty matrix");
  if (!matrix.allFinite()) throw NumericError("svd: non-finite input");

  const bool transposed = rows < cols;
  MatrixX<double> a;
  if (transposed)
    a = matrix.transpose().template cast<double>();
  else
    a = matrix.template cast<double>();
  const Index m = a.rows(), k = a.cols();
  MatrixX<double> right;
  detail::hestenes_jacobi(a, right);

  Eigen::VectorXd sv(k);
  for (Index j = 0; j < k; ++j) sv[j] = a.col(j).norm();
  std::vector<Index> order(k);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) { return sv[x] > sv[y]; });

  MatrixX<double> left(m, k), rightv(k, k);
  Eigen::VectorXd s(k);
  const double cutoff = (sv.size() ? sv.maxCoeff() : 0.0) * static_cast<double>(std::max(m, k)) *
                        std::numeric_limits<double>::epsilon();
  Index nonzero = 0;
  for (Index j = 0; j < k; ++j) {
    const Index src = order[j];
    s[j] = sv[src];
    rightv.col(j) = right.col(src);
    if (s[j] > cutoff && s[j] > 0) {
      left.col(j) = a.col(src) / s[j];
      nonzero = j + 1;
    }
  }
  if (nonzero < k) detail::complete_orthonormal(left, nonzero);

  for (Index j = 0; j < k; ++j) {
    Index arg = 0;
    left.col(j).cwiseAbs().maxCoeff(&arg);
    if (left(arg, j) < 0) {
      left.col(j) *= -1.0;
      rightv.col(j) *= -1.0;
    }
  }

  SvdResult<T> r;
  r.s = s.array().template cast<T>();
  if (!transposed) {
    r.u = left.template cast<T>();
    r.v = rightv.transpose().template cast<T>();
  } else {
    // matrix^T = left * S * rightv^T  =>  matrix = rightv * S * left^T.
    // Re-apply the sign convention on the new left factor.
    MatrixX<double> u2 = rightv, v2 = left.transpose();
    for (Index j = 0; j < k; ++j) {
      Index arg = 0;
      u2.col(j).cwiseAbs().maxCoeff(&arg);
      if (u2(arg, j) < 0) {
        u2.col(j) *= -1.0;
        v2.row(j) *= -1.0;
      }
    }
    r.u = u2.template cast<T>();
    r.v = v2.template cast<T>();
  }
  return r;
}

}  // namespace svdnas
