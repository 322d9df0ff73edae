#ifndef GSC_MODEL_HPP
#define GSC_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gsc/binary_state.hpp"
#include "gsc/error.hpp"
#include "gsc/linalg.hpp"

namespace gsc {

inline constexpr double kDefaultPiFloor = 1e-6;
inline constexpr int kDefaultHExactMax = 20;

enum class NoiseMode { full, diagonal, homoscedastic };

inline std::string to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::full: return "full";
    case NoiseMode::diagonal: return "diagonal";
    case NoiseMode::homoscedastic: return "homoscedastic";
  }
  return "full";
}

inline NoiseMode noise_mode_from_string(const std::string& s) {
  if (s == "full") return NoiseMode::full;
  if (s == "diagonal") return NoiseMode::diagonal;
  if (s == "homoscedastic") return NoiseMode::homoscedastic;
  throw ConfigError("unknown noise_mode '" + s + "'");
}

/// Parameters Θ = (W, Σ, π, μ, Ψ) of the spike-and-slab sparse coding model
///
///   s ~ Bernoulli(π),  z ~ N(μ, Ψ),  y ~ N(W (s ⊙ z), Σ).
template <typename Scalar>
struct ModelParams {
  MatrixX<Scalar> W;      // D x H, columns are basis functions
  MatrixX<Scalar> Sigma;  // D x D observation noise covariance
  VectorX<Scalar> pi;     // H activation probabilities
  VectorX<Scalar> mu;     // H slab mean
  MatrixX<Scalar> Psi;    // H x H slab covariance
  NoiseMode noise_mode = NoiseMode::full;

  int D() const { return static_cast<int>(W.rows()); }
  int H() const { return static_cast<int>(W.cols()); }

  /// Throws DimensionError / ConfigError when an invariant is violated.
  void validate(Scalar pi_floor = Scalar(kDefaultPiFloor)) const {
    const auto d = W.rows(), h = W.cols();
    if (d < 1 || h < 1) throw DimensionError("ModelParams: empty W");
    if (Sigma.rows() != d || Sigma.cols() != d) throw DimensionError("ModelParams: Sigma must be D x D");
    if (pi.size() != h || mu.size() != h) throw DimensionError("ModelParams: pi/mu must have length H");
    if (Psi.rows() != h || Psi.cols() != h) throw DimensionError("ModelParams: Psi must be H x H");
    if (!W.allFinite() || !Sigma.allFinite() || !pi.allFinite() || !mu.allFinite() || !Psi.allFinite())
      throw ConfigError("ModelParams: non-finite entries");
    const Scalar tol = Scalar(1e-10) * std::max(Scalar(1), Sigma.cwiseAbs().maxCoeff());
    if ((Sigma - Sigma.transpose()).cwiseAbs().maxCoeff() > tol) throw ConfigError("ModelParams: Sigma not symmetric");
    if ((Psi - Psi.transpose()).cwiseAbs().maxCoeff() >
        Scalar(1e-10) * std::max(Scalar(1), Psi.cwiseAbs().maxCoeff()))
      throw ConfigError("ModelParams: Psi not symmetric");
    if (Eigen::LLT<MatrixX<Scalar>>(Sigma).info() != Eigen::Success)
      throw ConfigError("ModelParams: Sigma not positive definite");
    if (Eigen::LLT<MatrixX<Scalar>>(Psi).info() != Eigen::Success)
      throw ConfigError("ModelParams: Psi not positive definite");
    if (noise_mode != NoiseMode::full) {
      MatrixX<Scalar> off = Sigma;
      off.diagonal().setZero();
      if (off.cwiseAbs().maxCoeff() != Scalar(0))
        throw ConfigError("ModelParams: off-diagonal noise entries must be zero");
      if (noise_mode == NoiseMode::homoscedastic &&
          (Sigma.diagonal().array() != Sigma(0, 0)).any())
        throw ConfigError("ModelParams: homoscedastic noise must be sigma^2 I");
    }
    if ((pi.array() < pi_floor).any() || (pi.array() > Scalar(1) - pi_floor).any())
      throw ConfigError("ModelParams: pi outside [pi_floor, 1 - pi_floor]");
  }
};

using ModelParamsd = ModelParams<double>;

/// Row-major N x D observations plus optional provenance tag.
template <typename Scalar>
struct Dataset {
  MatrixX<Scalar> Y;
  std::string provenance;

  int N() const { return static_cast<int>(Y.rows()); }
  int D() const { return static_cast<int>(Y.cols()); }

  void validate() const {
    if (Y.rows() < 1) throw DimensionError("Dataset: N must be >= 1");
    if (!Y.allFinite()) throw InputError("Dataset: non-finite entries");
  }
};

using Datasetd = Dataset<double>;

/// Posterior N(κ, Λ) of the slab given a binary state, embedded in H dims.
template <typename Scalar>
struct ConditionalGaussian {
  VectorX<Scalar> kappa;
  MatrixX<Scalar> Lambda;
  Scalar log_weight = 0;  // log B(s;π) + log N(y; W̃_s μ, C_s)
};

template <typename Scalar>
Scalar clamp_pi(Scalar p, Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  return std::clamp(p, pi_floor, Scalar(1) - pi_floor);
}

/// W̃_s: W with the columns of inactive latents zeroed.
template <typename Derived>
MatrixX<typename Derived::Scalar> masked_basis(const Eigen::MatrixBase<Derived>& W,
                                               const BinaryState& s) {
  if (W.cols() != s.size()) throw DimensionError("masked_basis: H mismatch");
  MatrixX<typename Derived::Scalar> out = MatrixX<typename Derived::Scalar>::Zero(W.rows(), W.cols());
  for (int h : s.active()) out.col(h) = W.col(h);
  return out;
}

/// log B(s; π) with π clamped away from {0, 1}.
template <typename Scalar>
Scalar log_prior(const ModelParams<Scalar>& p, const BinaryState& s,
                 Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  if (p.H() != s.size()) throw DimensionError("log_prior: H mismatch");
  Scalar acc = 0;
  for (int h = 0; h < p.H(); ++h) acc += std::log(Scalar(1) - clamp_pi(p.pi(h), pi_floor));
  for (int h : s.active()) {
    const Scalar ph = clamp_pi(p.pi(h), pi_floor);
    acc += std::log(ph) - std::log(Scalar(1) - ph);
  }
  return acc;
}

/// C_s = Σ + W̃_s Ψ W̃_s^T.
template <typename Scalar>
MatrixX<Scalar> state_covariance(const ModelParams<Scalar>& p, const BinaryState& s) {
  if (p.H() != s.size()) throw DimensionError("state_covariance: H mismatch");
  const MatrixX<Scalar> Ws = masked_basis(p.W, s);
  return symmetrized(p.Sigma + Ws * p.Psi * Ws.transpose());
}

namespace detail {

inline Eigen::VectorXi to_index(const std::vector<int>& v) {
  return Eigen::Map<const Eigen::VectorXi>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename Scalar, typename DerivedY>
void check_y(const ModelParams<Scalar>& p, const Eigen::MatrixBase<DerivedY>& y) {
  if (y.size() != p.D()) throw DimensionError("observation has wrong dimension");
  if (!y.allFinite()) throw InputError("observation has non-finite entries");
}

}  // namespace detail

/// Moments of p(z | s, y) on the active subspace, computed in covariance
/// (gain) form:  K = Ψ_a W_a^T C_s^{-1},  κ_a = μ_a + K (y - W_a μ_a),
/// Λ_a = Ψ_a - K W_a Ψ_a.  Inactive rows/columns are exactly zero.
template <typename Scalar, typename DerivedY>
ConditionalGaussian<Scalar> conditional_gaussian(const ModelParams<Scalar>& p, const BinaryState& s,
                                                 const Eigen::MatrixBase<DerivedY>& y,
                                                 Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  detail::check_y(p, y);
  if (p.H() != s.size()) throw DimensionError("conditional_gaussian: H mismatch");
  const int H = p.H();
  ConditionalGaussian<Scalar> out;
  out.kappa = VectorX<Scalar>::Zero(H);
  out.Lambda = MatrixX<Scalar>::Zero(H, H);

  const auto idx = detail::to_index(s.active());
  const MatrixX<Scalar> Wa = p.W(Eigen::all, idx);
  const MatrixX<Scalar> Psia = p.Psi(idx, idx);
  const VectorX<Scalar> mua = p.mu(idx);
  const MatrixX<Scalar> C = symmetrized(p.Sigma + Wa * Psia * Wa.transpose());
  const auto chol = robust_cholesky(C, s.active());

  const VectorX<Scalar> r = y - Wa * mua;
  const VectorX<Scalar> v = chol.llt.matrixL().solve(r);
  out.log_weight = log_prior(p, s, pi_floor) +
                   Scalar(-0.5) * (Scalar(p.D()) * kLog2Pi<Scalar> + chol.log_det() + v.squaredNorm());
  if (s.popcount() == 0) return out;

  // K^T = C^{-1} W_a Ψ_a
  const MatrixX<Scalar> Kt = chol.llt.solve(Wa * Psia);
  const VectorX<Scalar> kappa_a = mua + Kt.transpose() * r;
  const MatrixX<Scalar> Lambda_a = symmetrized(Psia - Kt.transpose() * Wa * Psia);
  out.kappa(idx) = kappa_a;
  out.Lambda(idx, idx) = Lambda_a;
  return out;
}

/// log p(y, s | Θ) = log B(s;π) + log N(y; W̃_s μ, C_s).
template <typename Scalar, typename DerivedY>
Scalar log_joint_ys(const ModelParams<Scalar>& p, const BinaryState& s,
                    const Eigen::MatrixBase<DerivedY>& y, Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  detail::check_y(p, y);
  const MatrixX<Scalar> Ws = masked_basis(p.W, s);
  const VectorX<Scalar> mean = Ws * p.mu;
  return log_prior(p, s, pi_floor) + log_gaussian_density(y, mean, state_covariance(p, s), s.active());
}

inline void check_enumerable(int H, int h_exact_max) {
  if (H > h_exact_max)
    throw CapacityError("H=" + std::to_string(H) + " exceeds exact enumeration limit " +
                        std::to_string(h_exact_max));
}

/// All 2^H values of log p(y, s | Θ) in canonical state order.
template <typename Scalar, typename DerivedY>
VectorX<Scalar> log_joint_all(const ModelParams<Scalar>& p, const Eigen::MatrixBase<DerivedY>& y,
                              int h_exact_max = kDefaultHExactMax,
                              Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  check_enumerable(p.H(), h_exact_max);
  const auto states = enumerate_states(p.H());
  VectorX<Scalar> lj(static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) lj(i) = log_joint_ys(p, states[i], y, pi_floor);
  return lj;
}

/// log p(y | Θ), summing the 2^H mixture components in the log domain.
template <typename Scalar, typename DerivedY>
Scalar log_marginal_likelihood(const ModelParams<Scalar>& p, const Eigen::MatrixBase<DerivedY>& y,
                               int h_exact_max = kDefaultHExactMax,
                               Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  return log_sum_exp(log_joint_all(p, y, h_exact_max, pi_floor));
}

template <typename Scalar, typename DerivedY>
std::map<BinaryState, Scalar> binary_posterior(const ModelParams<Scalar>& p,
                                               const Eigen::MatrixBase<DerivedY>& y,
                                               int h_exact_max = kDefaultHExactMax,
                                               Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  const VectorX<Scalar> lj = log_joint_all(p, y, h_exact_max, pi_floor);
  const Scalar lz = log_sum_exp(lj);
  const auto states = enumerate_states(p.H());
  std::map<BinaryState, Scalar> out;
  for (std::size_t i = 0; i < states.size(); ++i) out.emplace(states[i], std::exp(lj(i) - lz));
  return out;
}

}  // namespace gsc

#endif  // GSC_MODEL_HPP
