#ifndef GSC_STATE_KERNEL_HPP
#define GSC_STATE_KERNEL_HPP

// Batched posterior evaluation over a shared list of binary states.
//
// Σ is factored once per parameter set and the data projected to
// b_n = W^T Σ^{-1} y_n, y_n^T Σ^{-1} y_n. Every state then only needs k x k
// work (k = popcount) through the information form
//
//   M_s = Ψ_a^{-1} + W_a^T Σ^{-1} W_a,   Λ_s = M_s^{-1},
//   κ_s = μ_a + Λ_s (b_a - G_aa μ_a),
//   log|C_s| = log|Σ| + log|Ψ_a| + log|M_s|,
//   r^T C_s^{-1} r = r^T Σ^{-1} r - u^T M_s^{-1} u,  u = W_a^T Σ^{-1} r.
//
// The model.hpp functions form C_s explicitly; the two routes are checked
// against each other in the tests.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "gsc/binary_state.hpp"
#include "gsc/linalg.hpp"
#include "gsc/model.hpp"
#include "gsc/stats.hpp"

namespace gsc {

template <typename Scalar>
struct PreparedModel {
  int D = 0;
  int H = 0;
  Eigen::LLT<MatrixX<Scalar>> sigma_llt;
  MatrixX<Scalar> SigmaInvW;  // Σ^{-1} W
  MatrixX<Scalar> G;          // W^T Σ^{-1} W
  VectorX<Scalar> mu;
  MatrixX<Scalar> Psi;
  VectorX<Scalar> log_pi;
  VectorX<Scalar> log_1m_pi;
  Scalar log_1m_pi_sum = 0;
  Scalar logdet_sigma = 0;
  bool psi_diagonal = false;
};

template <typename Scalar>
PreparedModel<Scalar> prepare_model(const ModelParams<Scalar>& p,
                                    Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  PreparedModel<Scalar> m;
  m.D = p.D();
  m.H = p.H();
  auto chol = robust_cholesky(p.Sigma);
  m.logdet_sigma = chol.log_det();
  m.sigma_llt = std::move(chol.llt);
  m.SigmaInvW = m.sigma_llt.solve(p.W);
  m.G = symmetrized(p.W.transpose() * m.SigmaInvW);
  m.mu = p.mu;
  m.Psi = p.Psi;
  m.log_pi.resize(m.H);
  m.log_1m_pi.resize(m.H);
  for (int h = 0; h < m.H; ++h) {
    const Scalar ph = clamp_pi(p.pi(h), pi_floor);
    m.log_pi(h) = std::log(ph);
    m.log_1m_pi(h) = std::log1p(-ph);
  }
  m.log_1m_pi_sum = m.log_1m_pi.sum();
  MatrixX<Scalar> off = p.Psi;
  off.diagonal().setZero();
  m.psi_diagonal = off.isZero(0);
  return m;
}

template <typename Scalar>
struct ProjectedData {
  MatrixX<Scalar> B;    // N x H, rows W^T Σ^{-1} y_n
  VectorX<Scalar> yty;  // y_n^T Σ^{-1} y_n
};

template <typename Scalar, typename Derived>
ProjectedData<Scalar> project_data(const PreparedModel<Scalar>& m, const Eigen::MatrixBase<Derived>& Y) {
  if (Y.cols() != m.D) throw DimensionError("project_data: data dimension does not match model");
  ProjectedData<Scalar> out;
  out.B.noalias() = Y * m.SigmaInvW;
  MatrixX<Scalar> Z = Y.transpose();
  m.sigma_llt.matrixL().solveInPlace(Z);
  out.yty = Z.colwise().squaredNorm().transpose();
  return out;
}

/// Everything about one binary state that does not depend on the data point.
template <typename Scalar>
struct StateFactor {
  Eigen::VectorXi idx;
  Scalar log_prior = 0;
  Scalar log_const = 0;  // log_prior - (D log 2π + log|Σ| + log|Ψ_a| + log|M|) / 2
  MatrixX<Scalar> L;     // lower Cholesky factor of M
  MatrixX<Scalar> Lambda;
  VectorX<Scalar> mu_a;
  VectorX<Scalar> Gmu_a;  // G_aa μ_a
  VectorX<Scalar> c;      // μ_a - Λ G_aa μ_a, so κ = c + Λ b_a
  Scalar mu_G_mu = 0;
};

template <typename Scalar>
StateFactor<Scalar> factorize_state(const PreparedModel<Scalar>& m, const BinaryState& s) {
  if (s.size() != m.H) throw DimensionError("factorize_state: H mismatch");
  StateFactor<Scalar> f;
  const auto& act = s.active();
  const int k = static_cast<int>(act.size());
  f.idx = Eigen::Map<const Eigen::VectorXi>(act.data(), k);
  f.log_prior = m.log_1m_pi_sum;
  for (int h : act) f.log_prior += m.log_pi(h) - m.log_1m_pi(h);
  Scalar logdet = Scalar(m.D) * kLog2Pi<Scalar> + m.logdet_sigma;
  if (k > 0) {
    MatrixX<Scalar> psi_inv(k, k);
    if (m.psi_diagonal) {
      psi_inv.setZero();
      for (int t = 0; t < k; ++t) {
        const Scalar v = m.Psi(act[t], act[t]);
        if (!(v > 0)) throw NumericalError("slab variance not positive", act, 0.0);
        psi_inv(t, t) = Scalar(1) / v;
        logdet += std::log(v);
      }
    } else {
      const MatrixX<Scalar> Psia = m.Psi(f.idx, f.idx);
      const auto pc = robust_cholesky(Psia, act);
      psi_inv = symmetrized(pc.llt.solve(MatrixX<Scalar>::Identity(k, k)));
      logdet += pc.log_det();
    }
    MatrixX<Scalar> M = psi_inv + m.G(f.idx, f.idx);
    const auto mc = robust_cholesky(M, act);
    logdet += mc.log_det();
    f.L = mc.llt.matrixL();
    f.Lambda = symmetrized(mc.llt.solve(MatrixX<Scalar>::Identity(k, k)));
    f.mu_a = m.mu(f.idx);
    f.Gmu_a = m.G(f.idx, f.idx) * f.mu_a;
    f.mu_G_mu = f.mu_a.dot(f.Gmu_a);
    f.c = f.mu_a - f.Lambda * f.Gmu_a;
  }
  f.log_const = f.log_prior - Scalar(0.5) * logdet;
  return f;
}

template <typename Scalar>
std::vector<StateFactor<Scalar>> factorize_states(const PreparedModel<Scalar>& m,
                                                  const std::vector<BinaryState>& states) {
  std::vector<StateFactor<Scalar>> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(factorize_state(m, s));
  return out;
}

template <typename Scalar>
struct BlockOutput {
  SufficientStats<Scalar> stats;  // summed over the block
  VectorX<Scalar> log_norm;       // per point log Σ_s p(y_n, s) over the state list
  MatrixX<Scalar> esz;            // per point <s⊙z>_n (rows), only if requested
  std::vector<int> fallback;      // block-local rows that fell back to uniform weights
  long state_evals = 0;
};

namespace detail {

template <typename Scalar, typename Out>
void gather_cols(const Eigen::Ref<const MatrixX<Scalar>>& B, const Eigen::VectorXi& idx, Out&& out) {
  for (Eigen::Index t = 0; t < idx.size(); ++t) out.col(t) = B.col(idx(t));
}

}  // namespace detail

/// Dense route for long state lists over few latents. With κ_s = c + Λ b_a
/// the log-joint is affine in the features φ_n = (b_n, b_i b_j for i ≤ j):
///
///   log p(y_n, s) = α_s - y_n^T Σ^{-1} y_n / 2 + c^T b_a + b_a^T Λ b_a / 2,
///   α_s = log_const - μ_a^T G_aa μ_a / 2 + (G_aa μ_a)^T Λ (G_aa μ_a) / 2,
///
/// so a whole block is one product Φ·W. The moments follow the same way from
/// Q^T Φ. This trades the per-state k x k solves for a few matrix products,
/// which wins once the list holds hundreds of states.
namespace detail {

inline bool use_dense_route(int H, Eigen::Index n_states, Eigen::Index n_points) {
  return H <= 16 && n_states >= 128 && n_points >= 16;
}

inline Eigen::Index pair_offset(int H, int i, int j) {  // i <= j
  return H + static_cast<Eigen::Index>(i) * H - static_cast<Eigen::Index>(i) * (i - 1) / 2 + (j - i);
}

template <typename Scalar>
struct DenseStateTable {
  MatrixX<Scalar> weights;  // F x S
  RowVectorX<Scalar> alpha;
};

template <typename Scalar>
DenseStateTable<Scalar> dense_table(std::span<const StateFactor<Scalar>> factors, int H) {
  const auto S = static_cast<Eigen::Index>(factors.size());
  const Eigen::Index F = H + static_cast<Eigen::Index>(H) * (H + 1) / 2;
  DenseStateTable<Scalar> t;
  t.weights = MatrixX<Scalar>::Zero(F, S);
  t.alpha.resize(S);
  for (Eigen::Index j = 0; j < S; ++j) {
    const auto& f = factors[j];
    const Eigen::Index k = f.idx.size();
    t.alpha(j) = f.log_const;
    if (k == 0) continue;
    t.alpha(j) += Scalar(0.5) * (f.Gmu_a.dot(f.Lambda * f.Gmu_a) - f.mu_G_mu);
    for (Eigen::Index a = 0; a < k; ++a) {
      t.weights(f.idx(a), j) = f.c(a);
      t.weights(pair_offset(H, f.idx(a), f.idx(a)), j) = Scalar(0.5) * f.Lambda(a, a);
      for (Eigen::Index b = a + 1; b < k; ++b) t.weights(pair_offset(H, f.idx(a), f.idx(b)), j) = f.Lambda(a, b);
    }
  }
  return t;
}

template <typename Scalar>
MatrixX<Scalar> dense_features(const Eigen::Ref<const MatrixX<Scalar>>& B) {
  const int H = static_cast<int>(B.cols());
  MatrixX<Scalar> Phi(B.rows(), H + static_cast<Eigen::Index>(H) * (H + 1) / 2);
  Phi.leftCols(H) = B;
  for (int i = 0; i < H; ++i)
    for (int j = i; j < H; ++j) Phi.col(pair_offset(H, i, j)) = B.col(i).cwiseProduct(B.col(j));
  return Phi;
}

}  // namespace detail

/// Per point / per state log p(y_n, s | Θ) (rows: points, cols: states).
template <typename Scalar>
MatrixX<Scalar> log_joint_block(std::span<const StateFactor<Scalar>> factors,
                                const Eigen::Ref<const MatrixX<Scalar>>& B,
                                const Eigen::Ref<const VectorX<Scalar>>& yty) {
  const Eigen::Index n = B.rows();
  const auto S = static_cast<Eigen::Index>(factors.size());
  if (detail::use_dense_route(static_cast<int>(B.cols()), S, n)) {
    const auto t = detail::dense_table<Scalar>(factors, static_cast<int>(B.cols()));
    MatrixX<Scalar> LJ = detail::dense_features<Scalar>(B) * t.weights;
    LJ.rowwise() += t.alpha;
    LJ.colwise() -= Scalar(0.5) * yty;
    return LJ;
  }
  Eigen::Index kmax = 0;
  for (const auto& f : factors) kmax = std::max<Eigen::Index>(kmax, f.idx.size());
  MatrixX<Scalar> LJ(n, S);
  MatrixX<Scalar> Ba(n, kmax);
  MatrixX<Scalar> Ut(kmax, n);
  for (Eigen::Index j = 0; j < S; ++j) {
    const auto& f = factors[j];
    const Eigen::Index k = f.idx.size();
    if (k == 0) {
      LJ.col(j).array() = f.log_const - Scalar(0.5) * yty.array();
      continue;
    }
    auto ba = Ba.leftCols(k);
    detail::gather_cols<Scalar>(B, f.idx, ba);
    auto ut = Ut.topRows(k);
    ut = ba.transpose();
    ut.colwise() -= f.Gmu_a;
    f.L.template triangularView<Eigen::Lower>().solveInPlace(ut);
    LJ.col(j).array() = f.log_const -
                        Scalar(0.5) * (yty.array() - Scalar(2) * (ba * f.mu_a).array() + f.mu_G_mu -
                                       ut.colwise().squaredNorm().transpose().array());
  }
  return LJ;
}

namespace detail {

template <typename Scalar>
void accumulate_activity(std::span<const StateFactor<Scalar>> factors, const RowVectorX<Scalar>& qsum,
                         SufficientStats<Scalar>& st) {
  for (std::size_t j = 0; j < factors.size(); ++j) {
    const auto& idx = factors[j].idx;
    const Scalar w = qsum(static_cast<Eigen::Index>(j));
    for (Eigen::Index t = 0; t < idx.size(); ++t) {
      st.Es(idx(t)) += w;
      for (Eigen::Index u = 0; u < idx.size(); ++u) st.Ess(idx(t), idx(u)) += w;
    }
  }
}

// Moments state by state from κ_n = c + Λ b_a (weights Q already normalized).
template <typename Scalar>
void sparse_moments(std::span<const StateFactor<Scalar>> factors, const MatrixX<Scalar>& Q,
                    const Eigen::Ref<const MatrixX<Scalar>>& B, MatrixX<Scalar>& esz, SufficientStats<Scalar>& st) {
  const Eigen::Index n = Q.rows();
  const auto S = static_cast<Eigen::Index>(factors.size());
  const RowVectorX<Scalar> qsums = Q.colwise().sum();
  accumulate_activity<Scalar>(factors, qsums, st);
  Eigen::Index kmax = 0;
  for (const auto& f : factors) kmax = std::max<Eigen::Index>(kmax, f.idx.size());
  MatrixX<Scalar> Ba(n, kmax), K(n, kmax), Kq(n, kmax);
  for (Eigen::Index j = 0; j < S; ++j) {
    const auto& f = factors[j];
    const Eigen::Index k = f.idx.size();
    if (k == 0) continue;
    const auto q = Q.col(j);
    const Scalar qsum = qsums(j);
    auto ba = Ba.leftCols(k);
    gather_cols<Scalar>(B, f.idx, ba);
    auto kk = K.leftCols(k);
    kk.noalias() = ba * f.Lambda;
    kk.rowwise() += f.c.transpose();
    auto kq = Kq.leftCols(k);
    kq = kk.array().colwise() * q.array();
    const MatrixX<Scalar> second = qsum * f.Lambda + kq.transpose() * kk;
    const VectorX<Scalar> first = kq.colwise().sum().transpose();
    for (Eigen::Index t = 0; t < k; ++t) {
      st.Esz(f.idx(t)) += first(t);
      esz.col(f.idx(t)) += kq.col(t);
      for (Eigen::Index u = 0; u < k; ++u) st.Eszsz(f.idx(t), f.idx(u)) += second(t, u);
    }
  }
}

// Same moments through the dense features. Since κ_s = c + Λ b_a is the
// gradient of the state's log-joint in b, the per-point mean is the gradient
// of Σ_s q_ns φ_n^T w_s, read off A = Q W^T:
//   <s⊙z>_n,i = A_n,i + Σ_j A_n,(i,j) b_n,j   (the diagonal pair weight is Λ_ii / 2, counted twice)
// and, with m_s = Σ_n q_ns b_n and P_s = Σ_n q_ns b_n b_n^T read off Q^T Φ,
//   Σ_n q_ns κ κ^T = q_s (Λ + c c^T) + Λ m_s c^T + c m_s^T Λ + Λ P_s Λ.
template <typename Scalar>
void dense_moments(std::span<const StateFactor<Scalar>> factors, const DenseStateTable<Scalar>& table, int H,
                   const MatrixX<Scalar>& Q, const MatrixX<Scalar>& Phi, const Eigen::Ref<const MatrixX<Scalar>>& B,
                   MatrixX<Scalar>& esz, SufficientStats<Scalar>& st) {
  const auto S = static_cast<Eigen::Index>(factors.size());
  const RowVectorX<Scalar> qsums = Q.colwise().sum();
  accumulate_activity<Scalar>(factors, qsums, st);

  const MatrixX<Scalar> A = Q * table.weights.transpose();  // n x F
  esz = A.leftCols(H);
  for (int i = 0; i < H; ++i)
    for (int j = i; j < H; ++j) {
      const auto a = A.col(pair_offset(H, i, j));
      if (i == j) {
        esz.col(i).array() += Scalar(2) * a.array() * B.col(i).array();
      } else {
        esz.col(i).array() += a.array() * B.col(j).array();
        esz.col(j).array() += a.array() * B.col(i).array();
      }
    }
  st.Esz += esz.colwise().sum().transpose();

  // k <= H <= 16 on this route, so the per-state algebra stays on the stack.
  using SmallMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, 0, 16, 16>;
  using SmallVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1, 0, 16, 1>;
  const MatrixX<Scalar> QtPhi = Q.transpose() * Phi;  // S x F
  for (Eigen::Index j = 0; j < S; ++j) {
    const auto& f = factors[j];
    const Eigen::Index k = f.idx.size();
    if (k == 0) continue;
    SmallVector ms(k);
    SmallMatrix P(k, k);
    for (Eigen::Index a = 0; a < k; ++a) {
      ms(a) = QtPhi(j, f.idx(a));
      for (Eigen::Index b = a; b < k; ++b) P(a, b) = P(b, a) = QtPhi(j, pair_offset(H, f.idx(a), f.idx(b)));
    }
    const SmallMatrix Lam_s = f.Lambda;
    const SmallVector c = f.c;
    const SmallVector Lm = Lam_s * ms;
    const SmallMatrix LP = Lam_s * P;
    SmallMatrix second = LP * Lam_s;
    second += qsums(j) * (Lam_s + c * c.transpose()) + Lm * c.transpose() + c * Lm.transpose();
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index b = 0; b < k; ++b) st.Eszsz(f.idx(a), f.idx(b)) += second(a, b);
  }
}

}  // namespace detail

/// Posterior expectations for a block of points sharing one state list.
/// Weights are renormalized within the list (a truncated posterior when the
/// list is a subset of {0,1}^H).
template <typename Scalar>
BlockOutput<Scalar> evaluate_block(const PreparedModel<Scalar>& m,
                                   std::span<const StateFactor<Scalar>> factors,
                                   const Eigen::Ref<const MatrixX<Scalar>>& B,
                                   const Eigen::Ref<const VectorX<Scalar>>& yty,
                                   const Eigen::Ref<const MatrixX<Scalar>>& Y, bool want_esz = false) {
  const Eigen::Index n = B.rows();
  const auto S = static_cast<Eigen::Index>(factors.size());
  if (S == 0) throw DimensionError("evaluate_block: empty state list");
  BlockOutput<Scalar> out;
  out.stats = SufficientStats<Scalar>::zeros(m.D, m.H);
  out.state_evals = static_cast<long>(n) * static_cast<long>(S);

  const bool dense = detail::use_dense_route(m.H, S, n);
  detail::DenseStateTable<Scalar> table;
  MatrixX<Scalar> Phi;
  MatrixX<Scalar> Q;
  if (dense) {
    table = detail::dense_table<Scalar>(factors, m.H);
    Phi = detail::dense_features<Scalar>(B);
    Q.noalias() = Phi * table.weights;
    Q.rowwise() += table.alpha;
    Q.colwise() -= Scalar(0.5) * yty;
  } else {
    Q = log_joint_block<Scalar>(factors, B, yty);
  }
  // Row-wise log-sum-exp normalization, done column by column so the exp
  // runs over contiguous memory.
  VectorX<Scalar> mx = Q.rowwise().maxCoeff();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!std::isfinite(mx(i))) {
      out.fallback.push_back(static_cast<int>(i));
      mx(i) = 0;
    }
  for (Eigen::Index j = 0; j < S; ++j) Q.col(j) = (Q.col(j) - mx).array().exp().matrix();
  for (int i : out.fallback) Q.row(i).setConstant(Scalar(1));
  const VectorX<Scalar> z = Q.rowwise().sum();
  out.log_norm = mx.array() + z.array().log();
  for (Eigen::Index j = 0; j < S; ++j) Q.col(j).array() /= z.array();
  for (int i : out.fallback) out.log_norm(i) = -std::numeric_limits<Scalar>::infinity();

  MatrixX<Scalar> esz = MatrixX<Scalar>::Zero(n, m.H);
  auto& st = out.stats;
  if (dense)
    detail::dense_moments<Scalar>(factors, table, m.H, Q, Phi, B, esz, st);
  else
    detail::sparse_moments<Scalar>(factors, Q, B, esz, st);
  st.YEsz.noalias() = Y.transpose() * esz;
  st.n_count = static_cast<long>(n);
  st.n_fallback = static_cast<long>(out.fallback.size());
  st.log_norm_sum = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (std::isfinite(out.log_norm(i))) st.log_norm_sum += out.log_norm(i);
  if (want_esz) out.esz = std::move(esz);
  return out;
}

}  // namespace gsc

#endif  // GSC_STATE_KERNEL_HPP
