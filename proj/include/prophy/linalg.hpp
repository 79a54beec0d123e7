// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include "prophy/tensor.hpp"

namespace prophy::linalg {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::VectorXd;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

/// View a tensor's flat storage as a rows x cols row-major matrix.
inline CMap as_mat(const Tensor& t, std::int64_t rows, std::int64_t cols) {
  require(rows * cols == t.numel(), "linalg: view does not cover tensor");
  return CMap(t.data(), rows, cols);
}

inline Map as_mat(Tensor& t, std::int64_t rows, std::int64_t cols) {
  require(rows * cols == t.numel(), "linalg: view does not cover tensor");
  return Map(t.data(), rows, cols);
}

/// View a 2-d tensor with its own shape.
inline CMap as_mat(const Tensor& t) {
  require(t.ndim() == 2, "linalg: expected a 2-d tensor, got " + shape_str(t.shape()));
  return CMap(t.data(), t.dim(0), t.dim(1));
}

inline Map as_mat(Tensor& t) {
  require(t.ndim() == 2, "linalg: expected a 2-d tensor, got " + shape_str(t.shape()));
  return Map(t.data(), t.dim(0), t.dim(1));
}

/// c = a * b for 2-d tensors.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "linalg: matmul expects 2-d tensors");
  require(a.dim(1) == b.dim(0), "linalg: matmul inner dims " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  Tensor c({a.dim(0), b.dim(1)});
  as_mat(c).noalias() = as_mat(a) * as_mat(b);
  return c;
}

/// y = x * w^T + b with x [m, in], w [out, in], b [out] (b may be empty).
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 2 && w.ndim() == 2, "linalg: affine expects 2-d x and w");
  require(x.dim(1) == w.dim(1),
          "linalg: affine fan-in mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  Tensor y({x.dim(0), w.dim(0)});
  as_mat(y).noalias() = as_mat(x) * as_mat(w).transpose();
  if (!b.empty()) {
    require(b.numel() == w.dim(0), "linalg: affine bias size mismatch");
    as_mat(y).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), b.numel());
  }
  return y;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "linalg: dot");
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Tensor& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * a[i];
  return std::sqrt(s);
}

}  // namespace prophy::linalg
