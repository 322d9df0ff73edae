#ifndef GSC_EXACT_EM_HPP
#define GSC_EXACT_EM_HPP

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gsc/binary_state.hpp"
#include "gsc/error.hpp"
#include "gsc/linalg.hpp"
#include "gsc/model.hpp"
#include "gsc/parallel.hpp"
#include "gsc/state_kernel.hpp"
#include "gsc/stats.hpp"

namespace gsc {

/// How the slab covariance update is applied. `full` uses the element-wise
/// ratio for every (h, h') pair; `diagonal` keeps Ψ diagonal.
enum class SlabCovariance { full, diagonal };

struct MStepOptions {
  SlabCovariance psi = SlabCovariance::full;
  double pi_floor = kDefaultPiFloor;
  /// Evaluate Σ both as (Σyy^T - W <xx^T> W^T)/N and in the expanded residual
  /// form; throw if they differ by more than 1e-8 (relative).
  bool verify_sigma_forms = false;
  /// Lower bound on noise variances, relative to the mean data power.
  double noise_floor = 1e-10;
};

struct MStepReport {
  std::vector<int> held_latents;  // Σ_n <s_h> was zero: μ_h, Ψ_h., W_h kept
  bool psi_projected = false;     // element-wise Ψ was not PD and got clipped
  double sigma_form_gap = 0;      // relative gap between the two Σ forms
};

struct ParamDeltas {
  double W = 0, Sigma = 0, pi = 0, mu = 0, Psi = 0;
  double max() const { return std::max({W, Sigma, pi, mu, Psi}); }
};

struct EmTrace {
  int iteration = 0;
  /// Exact EM: log-likelihood of the parameters entering this iteration.
  /// Truncated EM: Σ_n log Σ_{s∈K_n} p(y_n, s), a non-monotone diagnostic.
  double log_likelihood = 0;
  ParamDeltas param_deltas;
  double wall_time_ms = 0;
};

template <typename Scalar>
struct EmResult {
  ModelParams<Scalar> params;
  std::vector<EmTrace> trace;
  MStepReport last_mstep;
};

struct EStepOptions {
  int workers = 1;
  int block_size = 256;
  int h_exact_max = kDefaultHExactMax;
  double pi_floor = kDefaultPiFloor;
};

struct EmOptions {
  EStepOptions estep;
  MStepOptions mstep;
  /// Stop once the relative log-likelihood change stays below
  /// early_stop_tol for early_stop_patience consecutive iterations.
  bool early_stop = false;
  double early_stop_tol = 1e-9;
  int early_stop_patience = 5;
  std::function<void(const EmTrace&)> on_iteration;
};

namespace detail {

/// Rethrows the active exception with `context` prepended, preserving type.
[[noreturn]] inline void rethrow_with_context(const std::string& context) {
  try {
    throw;
  } catch (const NumericalError& e) {
    throw NumericalError(context + ": " + e.what(), e.state(), e.condition_estimate());
  } catch (const CapacityError& e) {
    throw CapacityError(context + ": " + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(context + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(context + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(context + ": " + e.what());
  } catch (const Error& e) {
    throw Error(context + ": " + e.what());
  }
}

template <typename Scalar>
double max_abs_diff(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  return a.size() == 0 ? 0.0 : double((a - b).cwiseAbs().maxCoeff());
}

template <typename Scalar>
ParamDeltas param_deltas(const ModelParams<Scalar>& a, const ModelParams<Scalar>& b) {
  ParamDeltas d;
  d.W = max_abs_diff<Scalar>(a.W, b.W);
  d.Sigma = max_abs_diff<Scalar>(a.Sigma, b.Sigma);
  d.pi = max_abs_diff<Scalar>(a.pi, b.pi);
  d.mu = max_abs_diff<Scalar>(a.mu, b.mu);
  d.Psi = max_abs_diff<Scalar>(a.Psi, b.Psi);
  return d;
}

}  // namespace detail

/// Per-point expectations under the exact binary posterior, evaluated state
/// by state with explicit C_s factorizations (the reference route).
template <typename Scalar>
std::vector<SufficientStats<Scalar>> exact_estep(const ModelParams<Scalar>& p, const Dataset<Scalar>& data,
                                                 int h_exact_max = kDefaultHExactMax,
                                                 Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  check_enumerable(p.H(), h_exact_max);
  if (data.D() != p.D()) throw DimensionError("exact_estep: data dimension does not match model");
  const int H = p.H(), D = p.D();
  const auto states = enumerate_states(H);
  std::vector<SufficientStats<Scalar>> out;
  out.reserve(data.N());
  std::vector<ConditionalGaussian<Scalar>> cg(states.size());
  VectorX<Scalar> lw(static_cast<Eigen::Index>(states.size()));
  for (int n = 0; n < data.N(); ++n) {
    const VectorX<Scalar> y = data.Y.row(n).transpose();
    for (std::size_t i = 0; i < states.size(); ++i) {
      cg[i] = conditional_gaussian(p, states[i], y, pi_floor);
      lw(i) = cg[i].log_weight;
    }
    const Scalar lz = log_sum_exp(lw);
    auto st = SufficientStats<Scalar>::zeros(D, H);
    for (std::size_t i = 0; i < states.size(); ++i) {
      const Scalar q = std::exp(lw(i) - lz);
      for (int h : states[i].active()) {
        st.Es(h) += q;
        for (int g : states[i].active()) st.Ess(h, g) += q;
      }
      st.Esz += q * cg[i].kappa;
      st.Eszsz += q * (cg[i].Lambda + cg[i].kappa * cg[i].kappa.transpose());
    }
    st.YEsz = y * st.Esz.transpose();
    st.log_norm_sum = lz;
    st.n_count = 1;
    out.push_back(std::move(st));
  }
  return out;
}

/// Summed exact expectations through the batched kernel. Points are split
/// into fixed-size blocks independent of the worker count and the block
/// results are tree-reduced, so the sum does not depend on scheduling.
template <typename Scalar>
SufficientStats<Scalar> exact_estep_accumulate(const ModelParams<Scalar>& p, const Dataset<Scalar>& data,
                                               const EStepOptions& opt = {}) {
  check_enumerable(p.H(), opt.h_exact_max);
  if (data.D() != p.D()) throw DimensionError("exact_estep: data dimension does not match model");
  const auto prep = prepare_model(p, Scalar(opt.pi_floor));
  const auto proj = project_data(prep, data.Y);
  const auto factors = factorize_states(prep, enumerate_states(p.H()));
  const int N = data.N();
  const int bs = std::max(1, opt.block_size);
  const std::size_t nblocks = static_cast<std::size_t>((N + bs - 1) / bs);
  std::vector<SufficientStats<Scalar>> parts(nblocks);
  parallel_for(nblocks, opt.workers, [&](std::size_t b) {
    const int start = static_cast<int>(b) * bs;
    const int len = std::min(bs, N - start);
    auto res = evaluate_block<Scalar>(prep, std::span<const StateFactor<Scalar>>(factors),
                                      proj.B.middleRows(start, len), proj.yty.segment(start, len),
                                      data.Y.middleRows(start, len));
    parts[b] = std::move(res.stats);
  });
  return tree_reduce(std::move(parts));
}

/// Closed-form M-step from summed expectations. All blocks are computed from
/// the same statistics; Σ uses the freshly updated W.
template <typename Scalar>
ModelParams<Scalar> mstep(const SufficientStats<Scalar>& st, const Dataset<Scalar>& data,
                          const ModelParams<Scalar>& old, const MStepOptions& opt = {},
                          MStepReport* report = nullptr) {
  const int H = old.H(), D = old.D();
  if (st.n_count != data.N()) throw DimensionError("mstep: statistics do not cover the dataset");
  if (data.D() != D || st.Es.size() != H) throw DimensionError("mstep: dimension mismatch");
  const Scalar N = Scalar(st.n_count);
  MStepReport rep;

  const Scalar tiny = Scalar(1e-12) * N;
  std::vector<int> act;
  for (int h = 0; h < H; ++h) {
    if (st.Es(h) > tiny)
      act.push_back(h);
    else
      rep.held_latents.push_back(h);
  }
  const auto A = detail::to_index(act);

  ModelParams<Scalar> p = old;

  // W Σ<xx^T> = Σ y <x>^T, restricted to latents that carry mass.
  if (!act.empty()) {
    const MatrixX<Scalar> Sxx = st.Eszsz(A, A);
    const auto chol = robust_cholesky(Sxx, act);
    const MatrixX<Scalar> Wt = chol.llt.solve(st.YEsz(Eigen::all, A).transpose());
    p.W(Eigen::all, A) = Wt.transpose();
  }

  for (int h = 0; h < H; ++h) p.pi(h) = clamp_pi(st.Es(h) / N, Scalar(opt.pi_floor));
  for (int h : act) p.mu(h) = st.Esz(h) / st.Es(h);

  if (opt.psi == SlabCovariance::diagonal) {
    MatrixX<Scalar> Psi = MatrixX<Scalar>::Zero(H, H);
    for (int h = 0; h < H; ++h) Psi(h, h) = old.Psi(h, h);
    for (int h : act) {
      const Scalar v = (st.Eszsz(h, h) - st.Es(h) * p.mu(h) * p.mu(h)) / st.Es(h);
      Psi(h, h) = std::max(v, Scalar(1e-10));
    }
    p.Psi = Psi;
  } else {
    MatrixX<Scalar> Psi = old.Psi;
    for (int h : act)
      for (int g : act)
        if (st.Ess(h, g) > tiny)
          Psi(h, g) = (st.Eszsz(h, g) - st.Ess(h, g) * p.mu(h) * p.mu(g)) / st.Ess(h, g);
    Psi = symmetrized(Psi);
    for (int h : act) Psi(h, h) = std::max(Psi(h, h), Scalar(1e-10));
    if (Eigen::LLT<MatrixX<Scalar>>(Psi).info() != Eigen::Success) {
      // Entries estimated on different subsets of points need not form a PD
      // matrix. Keep the variances and shrink the correlations just enough
      // that the smallest eigenvalue of the correlation matrix is 0.1.
      const VectorX<Scalar> sd = Psi.diagonal().cwiseSqrt();
      MatrixX<Scalar> R = Psi.array() / (sd * sd.transpose()).array();
      R.diagonal().setZero();
      const Scalar lmin = Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>>(R, Eigen::EigenvaluesOnly).eigenvalues()(0);
      const Scalar t = lmin < 0 ? std::min(Scalar(1), Scalar(0.9) / -lmin) : Scalar(1);
      MatrixX<Scalar> shrunk = t * Psi;
      shrunk.diagonal() = Psi.diagonal();
      Psi = symmetrized(shrunk);
      rep.psi_projected = true;
    }
    p.Psi = Psi;
  }

  const MatrixX<Scalar> Syy = data.Y.transpose() * data.Y;
  MatrixX<Scalar> Sigma = symmetrized((Syy - p.W * st.Eszsz * p.W.transpose()) / N);
  if (opt.verify_sigma_forms || report) {
    const MatrixX<Scalar> resid =
        symmetrized((Syy - st.YEsz * p.W.transpose() - p.W * st.YEsz.transpose() +
                     p.W * st.Eszsz * p.W.transpose()) /
                    N);
    const Scalar scale = std::max(Scalar(1), resid.cwiseAbs().maxCoeff());
    rep.sigma_form_gap = double((resid - Sigma).cwiseAbs().maxCoeff() / scale);
    if (opt.verify_sigma_forms && rep.sigma_form_gap > 1e-8)
      throw NumericalError("mstep: noise update forms disagree (gap " + std::to_string(rep.sigma_form_gap) + ")");
  }
  const Scalar power = std::max(Syy.trace() / (N * Scalar(D)), std::numeric_limits<Scalar>::min());
  const Scalar floor = Scalar(opt.noise_floor) * power;
  switch (old.noise_mode) {
    case NoiseMode::full:
      for (int d = 0; d < D; ++d) Sigma(d, d) = std::max(Sigma(d, d), floor);
      break;
    case NoiseMode::diagonal: {
      VectorX<Scalar> diag = Sigma.diagonal().cwiseMax(floor);
      Sigma = diag.asDiagonal();
      break;
    }
    case NoiseMode::homoscedastic: {
      const Scalar s2 = std::max(Sigma.trace() / Scalar(D), floor);
      Sigma = s2 * MatrixX<Scalar>::Identity(D, D);
      break;
    }
  }
  p.Sigma = Sigma;
  if (report) *report = std::move(rep);
  return p;
}

/// F(Θ_old, Θ) = Σ_n <log p(y_n, s, z | Θ)>_{q_n} + H[q_n], q_n the exact
/// posterior under Θ_old. The slab term uses the marginal of the active
/// coordinates, N(z_a; μ_a, Ψ_aa). F(Θ, Θ) equals the log-likelihood.
template <typename Scalar>
Scalar free_energy(const ModelParams<Scalar>& p, const ModelParams<Scalar>& old, const Dataset<Scalar>& data,
                   int h_exact_max = kDefaultHExactMax, Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  check_enumerable(p.H(), h_exact_max);
  const int D = p.D();
  const auto states = enumerate_states(p.H());
  const auto sig = robust_cholesky(p.Sigma);
  const Scalar logdet_sigma = sig.log_det();

  struct SlabTerms {
    Eigen::VectorXi idx;
    Eigen::LLT<MatrixX<Scalar>> llt;
    Scalar logdet = 0;
    Scalar log_prior = 0;
  };
  std::vector<SlabTerms> slab(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    slab[i].idx = detail::to_index(states[i].active());
    slab[i].log_prior = log_prior(p, states[i], pi_floor);
    if (states[i].popcount() == 0) continue;
    auto c = robust_cholesky(MatrixX<Scalar>(p.Psi(slab[i].idx, slab[i].idx)), states[i].active());
    slab[i].logdet = c.log_det();
    slab[i].llt = std::move(c.llt);
  }

  Scalar total = 0;
  std::vector<ConditionalGaussian<Scalar>> cg(states.size());
  VectorX<Scalar> lw(static_cast<Eigen::Index>(states.size()));
  for (int n = 0; n < data.N(); ++n) {
    const VectorX<Scalar> y = data.Y.row(n).transpose();
    for (std::size_t i = 0; i < states.size(); ++i) {
      cg[i] = conditional_gaussian(old, states[i], y, pi_floor);
      lw(i) = cg[i].log_weight;
    }
    const Scalar lz = log_sum_exp(lw);
    for (std::size_t i = 0; i < states.size(); ++i) {
      const Scalar q = std::exp(lw(i) - lz);
      if (q == Scalar(0)) continue;
      const auto& idx = slab[i].idx;
      const Eigen::Index k = idx.size();
      const VectorX<Scalar> r = y - p.W * cg[i].kappa;
      const MatrixX<Scalar> E = r * r.transpose() + p.W * cg[i].Lambda * p.W.transpose();
      const Scalar tr_y = sig.llt.solve(E).trace();
      Scalar term = Scalar(-0.5) * (Scalar(D) * kLog2Pi<Scalar> + logdet_sigma + tr_y) + slab[i].log_prior;
      Scalar ent = -(lw(i) - lz);
      if (k > 0) {
        const VectorX<Scalar> dz = cg[i].kappa(idx) - p.mu(idx);
        const MatrixX<Scalar> Ez = MatrixX<Scalar>(cg[i].Lambda(idx, idx)) + dz * dz.transpose();
        const Scalar tr_z = slab[i].llt.solve(Ez).trace();
        term += Scalar(-0.5) * (Scalar(k) * kLog2Pi<Scalar> + slab[i].logdet + tr_z);
        const auto lc = robust_cholesky(MatrixX<Scalar>(cg[i].Lambda(idx, idx)), states[i].active());
        ent += Scalar(0.5) * (Scalar(k) * (kLog2Pi<Scalar> + Scalar(1)) + lc.log_det());
      }
      total += q * (term + ent);
    }
  }
  return total;
}

/// Random start: π_h ~ U[0.05, 0.95], μ ~ N(0, 1), Ψ diagonal
/// with entries in (0, 1], Σ the empirical data covariance (projected to
/// `mode`), W_dh ~ N(0, 1).
template <typename Scalar>
ModelParams<Scalar> random_initialization(const Dataset<Scalar>& data, int H, NoiseMode mode,
                                          std::uint64_t seed) {
  data.validate();
  const int D = data.D();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ModelParams<Scalar> p;
  p.noise_mode = mode;
  p.pi.resize(H);
  for (int h = 0; h < H; ++h) p.pi(h) = Scalar(0.05 + 0.9 * unit(rng));
  p.mu.resize(H);
  for (int h = 0; h < H; ++h) p.mu(h) = Scalar(normal(rng));
  p.Psi = MatrixX<Scalar>::Zero(H, H);
  for (int h = 0; h < H; ++h) p.Psi(h, h) = Scalar(1.0 - unit(rng));
  p.W.resize(D, H);
  for (int h = 0; h < H; ++h)
    for (int d = 0; d < D; ++d) p.W(d, h) = Scalar(normal(rng));
  const RowVectorX<Scalar> mean = data.Y.colwise().mean();
  const MatrixX<Scalar> C = data.Y.rowwise() - mean;
  MatrixX<Scalar> cov = symmetrized(C.transpose() * C / Scalar(std::max(1, data.N() - 1)));
  const Scalar power = std::max(cov.trace() / Scalar(D), Scalar(1e-12));
  switch (mode) {
    case NoiseMode::full:
      if (Eigen::LLT<MatrixX<Scalar>>(cov).info() != Eigen::Success)
        cov.diagonal().array() += Scalar(1e-6) * power;
      break;
    case NoiseMode::diagonal: {
      VectorX<Scalar> d = cov.diagonal().cwiseMax(Scalar(1e-12) * power);
      cov = d.asDiagonal();
      break;
    }
    case NoiseMode::homoscedastic:
      cov = power * MatrixX<Scalar>::Identity(D, D);
      break;
  }
  p.Sigma = cov;
  return p;
}

/// Iterates exact E-step (all 2^H states) and M-step `iters` times.
template <typename Scalar>
EmResult<Scalar> run_exact_em(const Dataset<Scalar>& data, const ModelParams<Scalar>& init, int iters,
                              const EmOptions& opt = {}) {
  if (iters < 1) throw ConfigError("run_exact_em: iters must be >= 1");
  data.validate();
  init.validate(Scalar(opt.mstep.pi_floor));
  check_enumerable(init.H(), opt.estep.h_exact_max);
  EmResult<Scalar> res;
  res.params = init;
  double prev_ll = 0;
  int quiet = 0;
  for (int it = 1; it <= iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    EmTrace tr;
    tr.iteration = it;
    try {
      const auto st = exact_estep_accumulate(res.params, data, opt.estep);
      auto next = mstep(st, data, res.params, opt.mstep, &res.last_mstep);
      tr.log_likelihood = double(st.log_norm_sum);
      tr.param_deltas = detail::param_deltas(res.params, next);
      res.params = std::move(next);
    } catch (const Error&) {
      detail::rethrow_with_context("exact EM iteration " + std::to_string(it));
    }
    tr.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.trace.push_back(tr);
    if (opt.on_iteration) opt.on_iteration(tr);
    if (opt.early_stop && it > 1) {
      const double rel = std::abs(tr.log_likelihood - prev_ll) / std::max(1.0, std::abs(prev_ll));
      quiet = rel < opt.early_stop_tol ? quiet + 1 : 0;
      if (quiet >= opt.early_stop_patience) break;
    }
    prev_ll = tr.log_likelihood;
  }
  return res;
}

}  // namespace gsc

#endif  // GSC_EXACT_EM_HPP
