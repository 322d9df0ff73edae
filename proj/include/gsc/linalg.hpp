#ifndef GSC_LINALG_HPP
#define GSC_LINALG_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "gsc/error.hpp"

namespace gsc {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
inline constexpr Scalar kLog2Pi = Scalar(1.8378770664093454835606594728112);

/// Relative jitter levels tried in order; the absolute jitter added to the
/// diagonal is eps * trace(A) / dim.
inline constexpr std::array<double, 4> kJitterLevels = {0.0, 1e-10, 1e-8, 1e-6};

template <typename Scalar>
struct CholeskyFactor {
  Eigen::LLT<MatrixX<Scalar>> llt;
  Scalar jitter = 0;
  int escalations = 0;

  Scalar log_det() const {
    const auto& L = llt.matrixLLT();
    Scalar acc = 0;
    for (Eigen::Index i = 0; i < L.rows(); ++i) acc += std::log(L(i, i));
    return 2 * acc;
  }
};

/// Cholesky with escalating diagonal jitter. Throws NumericalError carrying
/// `state` when every level fails.
template <typename Derived>
CholeskyFactor<typename Derived::Scalar> robust_cholesky(
    const Eigen::MatrixBase<Derived>& A, const std::vector<int>& state = {}) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = A.rows();
  if (A.cols() != n) throw DimensionError("robust_cholesky: matrix not square");
  CholeskyFactor<Scalar> out;
  if (n == 0) {
    out.llt.compute(MatrixX<Scalar>(0, 0));
    return out;
  }
  const Scalar scale = std::abs(A.trace()) / Scalar(n);
  double rcond = 0;
  for (std::size_t level = 0; level < kJitterLevels.size(); ++level) {
    const Scalar jitter = Scalar(kJitterLevels[level]) * scale;
    MatrixX<Scalar> M = A;
    M.diagonal().array() += jitter;
    out.llt.compute(M);
    if (out.llt.info() == Eigen::Success && A.allFinite()) {
      out.jitter = jitter;
      out.escalations = static_cast<int>(level);
      return out;
    }
    rcond = out.llt.info() == Eigen::Success ? double(out.llt.rcond()) : 0.0;
  }
  throw NumericalError("Cholesky failed after jitter escalation", state, rcond);
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) return -std::numeric_limits<Scalar>::infinity();
  const Scalar m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.derived().array() - m).exp().sum());
}

/// log N(x; mean, cov) via a jittered Cholesky of cov.
template <typename DX, typename DM, typename DC>
typename DX::Scalar log_gaussian_density(const Eigen::MatrixBase<DX>& x,
                                         const Eigen::MatrixBase<DM>& mean,
                                         const Eigen::MatrixBase<DC>& cov,
                                         const std::vector<int>& state = {}) {
  using Scalar = typename DX::Scalar;
  const auto chol = robust_cholesky(cov, state);
  const VectorX<Scalar> r = x - mean;
  const VectorX<Scalar> v = chol.llt.matrixL().solve(r);
  return Scalar(-0.5) * (Scalar(x.size()) * kLog2Pi<Scalar> + chol.log_det() + v.squaredNorm());
}

template <typename Derived>
MatrixX<typename Derived::Scalar> symmetrized(const Eigen::MatrixBase<Derived>& A) {
  return (A + A.transpose()) / typename Derived::Scalar(2);
}

}  // namespace gsc

#endif  // GSC_LINALG_HPP
