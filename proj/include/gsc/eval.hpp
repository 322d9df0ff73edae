#ifndef GSC_EVAL_HPP
#define GSC_EVAL_HPP

#include <Eigen/LU>
#include <Eigen/QR>

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "gsc/error.hpp"
#include "gsc/linalg.hpp"

namespace gsc {

struct AmariResult {
  double value = 0;
  bool regularized = false;  // W was near-singular; a pseudo-inverse was used
};

/// Amari index of O = W^{-1} W_gen:
///
///   A = 1/(2H(H-1)) Σ_{h,h'} ( |O_hh'| / max_k |O_hk| + |O_hh'| / max_k |O_kh'| ) - 1/(H-1).
///
/// Zero iff O is a scaled permutation.
template <typename DW, typename DG>
AmariResult amari_index_checked(const Eigen::MatrixBase<DW>& W, const Eigen::MatrixBase<DG>& W_gen) {
  using Scalar = typename DW::Scalar;
  const Eigen::Index H = W.cols();
  if (W.rows() != W.cols()) throw DimensionError("amari_index: W must be square");
  if (W_gen.rows() != W.rows() || W_gen.cols() != H) throw DimensionError("amari_index: W_gen shape differs from W");
  AmariResult out;
  if (H < 2) return out;
  const MatrixX<Scalar> Wm = W;
  const MatrixX<Scalar> Wg = W_gen;
  MatrixX<Scalar> O;
  Eigen::FullPivLU<MatrixX<Scalar>> lu(Wm);
  if (lu.isInvertible() && lu.rcond() > Scalar(1e-12)) {
    O = lu.solve(Wg);
  } else {
    Eigen::CompleteOrthogonalDecomposition<MatrixX<Scalar>> cod(Wm);
    cod.setThreshold(Scalar(1e-12));
    if (cod.rank() < H) throw NumericalError("amari_index: W is singular");
    O = cod.solve(Wg);
    out.regularized = true;
  }
  const MatrixX<Scalar> A = O.cwiseAbs();
  const VectorX<Scalar> row_max = A.rowwise().maxCoeff();
  const RowVectorX<Scalar> col_max = A.colwise().maxCoeff();
  if ((row_max.array() <= 0).any() || (col_max.array() <= 0).any())
    throw NumericalError("amari_index: W_gen has a zero direction");
  Scalar sum = 0;
  for (Eigen::Index i = 0; i < H; ++i)
    for (Eigen::Index j = 0; j < H; ++j) sum += A(i, j) / row_max(i) + A(i, j) / col_max(j);
  const double h = double(H);
  out.value = double(sum) / (2 * h * (h - 1)) - 1 / (h - 1);
  return out;
}

template <typename DW, typename DG>
double amari_index(const Eigen::MatrixBase<DW>& W, const Eigen::MatrixBase<DG>& W_gen) {
  return amari_index_checked(W, W_gen).value;
}

/// 20 log10(peak / RMSE); +infinity for identical images.
template <typename DA, typename DB>
double psnr(const Eigen::MatrixBase<DA>& clean, const Eigen::MatrixBase<DB>& test, double peak = 255.0) {
  if (clean.rows() != test.rows() || clean.cols() != test.cols())
    throw DimensionError("psnr: image dimensions differ");
  if (clean.size() == 0) throw DimensionError("psnr: empty image");
  const double mse = double((clean.template cast<double>() - test.template cast<double>()).squaredNorm()) /
                     double(clean.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(peak / std::sqrt(mse));
}

/// KL divergence of the truncated approximation from the posterior, -log Q.
inline double kl_from_q(double q) {
  if (!(q > 0 && q <= 1)) throw ConfigError("kl_from_q: q must lie in (0, 1]");
  return -std::log(q);
}

struct MetricReport {
  std::string name;
  double value = 0;
  int n_trials = 1;
  double std = 0;
};

/// Mean and sample standard deviation (zero for a single trial).
inline MetricReport summarize(const std::string& name, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("summarize: no values for '" + name + "'");
  MetricReport r;
  r.name = name;
  r.n_trials = static_cast<int>(values.size());
  r.value = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - r.value) * (v - r.value);
    r.std = std::sqrt(ss / double(values.size() - 1));
  }
  return r;
}

}  // namespace gsc

#endif  // GSC_EVAL_HPP
