// SPDX-License-Identifier: Apache-2.0
//
// Dense vector/matrix types and the reductions used on every numeric path.
//
// Storage is Eigen. The reductions below are written as plain index-order
// loops instead of Eigen's vectorized kernels: results must not depend on
// packet width or on how work is split across threads, and dot(a, b) must
// equal dot(b, a) bit for bit.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "zobridge/errors.hpp"

namespace zobridge {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vec = VectorX<double>;
using Mat = MatrixX<double>;

namespace detail {
inline void require(bool cond, const char* what) {
  if (!cond) throw InvalidArgument(what);
}
}  // namespace detail

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar dot(const Eigen::MatrixBase<DerivedA>& a,
                              const Eigen::MatrixBase<DerivedB>& b) {
  detail::require(a.size() == b.size(), "dot: length mismatch");
  typename DerivedA::Scalar acc(0);
  for (Index i = 0; i < a.size(); ++i) acc += a(i) * b(i);
  return acc;
}

/// y += alpha * x
template <typename DerivedX, typename DerivedY>
void axpy(typename DerivedX::Scalar alpha, const Eigen::MatrixBase<DerivedX>& x,
          Eigen::MatrixBase<DerivedY>& y) {
  detail::require(x.size() == y.size(), "axpy: length mismatch");
  for (Index i = 0; i < x.size(); ++i) y(i) += alpha * x(i);
}

template <typename DerivedA, typename DerivedX>
VectorX<typename DerivedA::Scalar> matvec(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedX>& x) {
  detail::require(a.cols() == x.size(), "matvec: shape mismatch");
  VectorX<typename DerivedA::Scalar> y(a.rows());
  for (Index r = 0; r < a.rows(); ++r) {
    typename DerivedA::Scalar acc(0);
    for (Index c = 0; c < a.cols(); ++c) acc += a(r, c) * x(c);
    y(r) = acc;
  }
  return y;
}

/// Aᵀg with the same accumulation order matvec uses on Aᵀ.
template <typename DerivedA, typename DerivedG>
VectorX<typename DerivedA::Scalar> matTvec(const Eigen::MatrixBase<DerivedA>& a,
                                           const Eigen::MatrixBase<DerivedG>& g) {
  detail::require(a.rows() == g.size(), "matTvec: shape mismatch");
  VectorX<typename DerivedA::Scalar> y(a.cols());
  for (Index c = 0; c < a.cols(); ++c) {
    typename DerivedA::Scalar acc(0);
    for (Index r = 0; r < a.rows(); ++r) acc += a(r, c) * g(r);
    y(c) = acc;
  }
  return y;
}

template <typename Derived>
typename Derived::Scalar norm2(const Eigen::MatrixBase<Derived>& v) {
  using std::sqrt;
  return sqrt(dot(v, v));
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& v) {
  for (Index i = 0; i < v.size(); ++i)
    if (!std::isfinite(static_cast<double>(v(i)))) return false;
  return true;
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& v, const std::string& where) {
  if (!all_finite(v)) throw InvalidArgument(where + ": non-finite value");
}

/// ‖a − b‖ / max(‖b‖, floor). `b` is the reference.
template <typename DerivedA, typename DerivedB>
double relative_error(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                      double floor = 1e-300) {
  detail::require(a.size() == b.size(), "relative_error: length mismatch");
  Vec diff(a.size());
  for (Index i = 0; i < a.size(); ++i) diff(i) = a(i) - b(i);
  const double denom = std::max(norm2(b.template cast<double>().eval()), floor);
  return norm2(diff) / denom;
}

/// 64-bit FNV-1a over the raw bytes of the elements.
std::uint64_t hash_values(const Vec& v) noexcept;

}  // namespace zobridge
