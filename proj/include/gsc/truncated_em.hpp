#ifndef GSC_TRUNCATED_EM_HPP
#define GSC_TRUNCATED_EM_HPP

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gsc/binary_state.hpp"
#include "gsc/error.hpp"
#include "gsc/exact_em.hpp"
#include "gsc/linalg.hpp"
#include "gsc/model.hpp"
#include "gsc/parallel.hpp"
#include "gsc/state_kernel.hpp"
#include "gsc/stats.hpp"

namespace gsc {

struct TruncationConfig {
  int h_prime = 5;
  int gamma = 3;
  bool include_singletons = true;

  void validate(int H) const {
    if (gamma < 1 || h_prime < gamma || h_prime > H)
      throw ConfigError("truncation requires 1 <= gamma <= H' <= H (got H'=" + std::to_string(h_prime) +
                        ", gamma=" + std::to_string(gamma) + ", H=" + std::to_string(H) + ")");
  }
};

/// The selected latents I_n of one point and the states K_n built from them.
struct StateSpace {
  std::vector<int> index_set;
  std::vector<BinaryState> states;
};

/// |K_n| for given H, H', γ: Σ_{γ'≤γ} C(H', γ') plus the H - H' singletons
/// outside I_n.
inline long state_space_size(int H, const TruncationConfig& cfg) {
  long total = 0, binom = 1;
  for (int g = 0; g <= cfg.gamma; ++g) {
    total += binom;
    binom = binom * (cfg.h_prime - g) / (g + 1);
  }
  return total + (cfg.include_singletons ? H - cfg.h_prime : 0);
}

/// Scores for all points at once: S(n, h) = log N(y_n; w_h μ_h, Σ + Ψ_hh w_h w_h^T),
/// the singleton data likelihood without the state prior.
template <typename Scalar>
MatrixX<Scalar> selection_scores(const PreparedModel<Scalar>& m, const ProjectedData<Scalar>& proj) {
  std::vector<StateFactor<Scalar>> singles;
  singles.reserve(m.H);
  for (int h = 0; h < m.H; ++h) singles.push_back(factorize_state(m, BinaryState::singleton(m.H, h)));
  MatrixX<Scalar> S = log_joint_block<Scalar>(std::span<const StateFactor<Scalar>>(singles), proj.B, proj.yty);
  for (int h = 0; h < m.H; ++h) S.col(h).array() -= singles[h].log_prior;
  return S;
}

template <typename Scalar, typename DerivedY>
VectorX<Scalar> selection_scores(const ModelParams<Scalar>& p, const Eigen::MatrixBase<DerivedY>& y) {
  detail::check_y(p, y);
  const auto m = prepare_model(p);
  const auto proj = project_data(m, MatrixX<Scalar>(y.transpose()));
  return selection_scores(m, proj).row(0).transpose();
}

/// I_n = the H' highest scores (ties toward the lower index), K_n = every
/// subset of I_n with at most γ elements plus the singletons outside I_n, in
/// canonical order.
template <typename Derived>
StateSpace build_state_space(const Eigen::MatrixBase<Derived>& scores, const TruncationConfig& cfg) {
  const int H = static_cast<int>(scores.size());
  cfg.validate(H);
  std::vector<int> order(H);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
  StateSpace sp;
  sp.index_set.assign(order.begin(), order.begin() + cfg.h_prime);
  std::sort(sp.index_set.begin(), sp.index_set.end());

  const int hp = cfg.h_prime;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << hp); ++mask) {
    if (std::popcount(mask) > cfg.gamma) continue;
    std::vector<int> act;
    for (int t = 0; t < hp; ++t)
      if ((mask >> t) & 1u) act.push_back(sp.index_set[t]);
    sp.states.emplace_back(H, std::move(act));
  }
  if (cfg.include_singletons) {
    for (int h = 0; h < H; ++h)
      if (!std::binary_search(sp.index_set.begin(), sp.index_set.end(), h))
        sp.states.push_back(BinaryState::singleton(H, h));
  }
  std::sort(sp.states.begin(), sp.states.end());
  return sp;
}

/// Expectations for one point with sums restricted to `space` and weights
/// renormalized within it. n_fallback = 1 flags a point whose weights all
/// underflowed.
template <typename Scalar, typename DerivedY>
SufficientStats<Scalar> truncated_expectations(const ModelParams<Scalar>& p, const Eigen::MatrixBase<DerivedY>& y,
                                               const StateSpace& space,
                                               Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  detail::check_y(p, y);
  if (space.states.empty()) throw DimensionError("truncated_expectations: empty state space");
  const auto m = prepare_model(p, pi_floor);
  const MatrixX<Scalar> Y = y.transpose();
  const auto proj = project_data(m, Y);
  const auto factors = factorize_states(m, space.states);
  return evaluate_block<Scalar>(m, std::span<const StateFactor<Scalar>>(factors), proj.B, proj.yty, Y).stats;
}

/// Normalized posterior weights over the states of `space` (same order).
template <typename Scalar, typename DerivedY>
VectorX<Scalar> truncated_weights(const ModelParams<Scalar>& p, const Eigen::MatrixBase<DerivedY>& y,
                                  const StateSpace& space, Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  detail::check_y(p, y);
  if (space.states.empty()) throw DimensionError("truncated_weights: empty state space");
  const auto m = prepare_model(p, pi_floor);
  const auto proj = project_data(m, MatrixX<Scalar>(y.transpose()));
  const auto factors = factorize_states(m, space.states);
  const VectorX<Scalar> lj =
      log_joint_block<Scalar>(std::span<const StateFactor<Scalar>>(factors), proj.B, proj.yty).row(0).transpose();
  const Scalar mx = lj.maxCoeff();
  if (!std::isfinite(mx)) return VectorX<Scalar>::Constant(lj.size(), Scalar(1) / Scalar(lj.size()));
  const VectorX<Scalar> w = (lj.array() - mx).exp();
  return w / w.sum();
}

/// Fraction of posterior mass inside K_n. Needs the full enumeration.
template <typename Scalar, typename DerivedY>
Scalar q_value(const ModelParams<Scalar>& p, const Eigen::MatrixBase<DerivedY>& y, const StateSpace& space,
               int h_exact_max = kDefaultHExactMax, Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  check_enumerable(p.H(), h_exact_max);
  const VectorX<Scalar> all = log_joint_all(p, y, h_exact_max, pi_floor);
  VectorX<Scalar> sub(static_cast<Eigen::Index>(space.states.size()));
  for (std::size_t i = 0; i < space.states.size(); ++i) sub(i) = log_joint_ys(p, space.states[i], y, pi_floor);
  return std::min(Scalar(1), std::exp(log_sum_exp(sub) - log_sum_exp(all)));
}

/// Q-values for every point of a dataset, with state spaces built from the
/// selection function under `p` (batched kernel route).
template <typename Scalar>
VectorX<Scalar> q_values(const ModelParams<Scalar>& p, const Dataset<Scalar>& data, const TruncationConfig& cfg,
                         int h_exact_max = kDefaultHExactMax, Scalar pi_floor = Scalar(kDefaultPiFloor)) {
  check_enumerable(p.H(), h_exact_max);
  cfg.validate(p.H());
  const auto m = prepare_model(p, pi_floor);
  const auto proj = project_data(m, data.Y);
  const auto states = enumerate_states(p.H());
  const auto factors = factorize_states(m, states);
  const MatrixX<Scalar> LJ = log_joint_block<Scalar>(std::span<const StateFactor<Scalar>>(factors), proj.B, proj.yty);
  const MatrixX<Scalar> S = selection_scores(m, proj);
  std::map<BinaryState, Eigen::Index> pos;
  for (std::size_t i = 0; i < states.size(); ++i) pos.emplace(states[i], static_cast<Eigen::Index>(i));
  VectorX<Scalar> Q(data.N());
  for (int n = 0; n < data.N(); ++n) {
    const auto sp = build_state_space(S.row(n).transpose(), cfg);
    VectorX<Scalar> sub(static_cast<Eigen::Index>(sp.states.size()));
    for (std::size_t i = 0; i < sp.states.size(); ++i) sub(i) = LJ(n, pos.at(sp.states[i]));
    Q(n) = std::min(Scalar(1), std::exp(log_sum_exp(sub) - log_sum_exp(LJ.row(n))));
  }
  return Q;
}

/// Groups of points that share one state space and therefore one set of
/// per-state factorizations.
struct ClusterPlan {
  struct Cluster {
    std::vector<int> index_set;
    std::vector<int> members;  // ascending data indices
  };
  std::vector<Cluster> clusters;
  std::optional<double> alpha_percentile;
  long size_cap = 0;  // 0 when no cap applies
};

/// Clusters points by identical I_n. With `alpha` set, the size cap is the
/// (100 - α) percentile of cluster sizes as experienced by the points (each
/// point contributes the size of its own cluster), and larger clusters are
/// split into near-equal contiguous pieces.
inline ClusterPlan cluster_partition(const std::vector<StateSpace>& spaces, std::optional<double> alpha = 5.0) {
  if (alpha && !(*alpha > 0 && *alpha < 100)) throw ConfigError("alpha percentile must lie in (0, 100)");
  std::map<std::vector<int>, std::size_t> key_to_cluster;
  std::vector<ClusterPlan::Cluster> raw;
  for (std::size_t n = 0; n < spaces.size(); ++n) {
    auto [it, inserted] = key_to_cluster.emplace(spaces[n].index_set, raw.size());
    if (inserted) raw.push_back({spaces[n].index_set, {}});
    raw[it->second].members.push_back(static_cast<int>(n));
  }
  ClusterPlan plan;
  plan.alpha_percentile = alpha;
  if (!alpha || raw.empty()) {
    plan.clusters = std::move(raw);
    return plan;
  }
  std::vector<long> experienced;
  experienced.reserve(spaces.size());
  for (const auto& c : raw) experienced.insert(experienced.end(), c.members.size(), static_cast<long>(c.members.size()));
  std::sort(experienced.begin(), experienced.end());
  const double rank = std::ceil((100.0 - *alpha) / 100.0 * static_cast<double>(experienced.size()));
  const std::size_t at = static_cast<std::size_t>(std::clamp(rank, 1.0, double(experienced.size()))) - 1;
  plan.size_cap = std::max<long>(1, experienced[at]);
  for (auto& c : raw) {
    const long m = static_cast<long>(c.members.size());
    if (m <= plan.size_cap) {
      plan.clusters.push_back(std::move(c));
      continue;
    }
    const long pieces = (m + plan.size_cap - 1) / plan.size_cap;
    long start = 0;
    for (long k = 0; k < pieces; ++k) {
      const long len = m / pieces + (k < m % pieces ? 1 : 0);
      plan.clusters.push_back({c.index_set, std::vector<int>(c.members.begin() + start, c.members.begin() + start + len)});
      start += len;
    }
  }
  return plan;
}

struct TruncatedEStepOptions {
  int workers = 1;
  bool clustering = true;
  std::optional<double> alpha_percentile = 5.0;
  double pi_floor = kDefaultPiFloor;
};

struct EStepCounters {
  long state_evals = 0;     // (point, state) joint evaluations
  long factorizations = 0;  // per-state factorizations (M_s, Λ_s)
  long clusters = 0;
  long fallback_points = 0;
};

template <typename Scalar>
struct TruncatedEStep {
  SufficientStats<Scalar> stats;
  std::vector<StateSpace> spaces;
  ClusterPlan plan;
  EStepCounters counters;
  VectorX<Scalar> log_norm;  // per point log Σ_{s∈K_n} p(y_n, s)
  MatrixX<Scalar> esz;       // per point <s⊙z>_n, filled when requested
};

/// One truncated E-step: selection, state spaces, cluster plan, and the
/// per-cluster evaluations merged by a fixed reduction tree. The work split
/// depends only on the data and parameters, never on the worker count.
template <typename Scalar>
TruncatedEStep<Scalar> truncated_estep(const ModelParams<Scalar>& p, const Dataset<Scalar>& data,
                                       const TruncationConfig& cfg, const TruncatedEStepOptions& opt = {},
                                       bool want_esz = false) {
  const int H = p.H(), N = data.N();
  cfg.validate(H);
  if (data.D() != p.D()) throw DimensionError("truncated E-step: data dimension does not match model");
  const auto m = prepare_model(p, Scalar(opt.pi_floor));
  const auto proj = project_data(m, data.Y);
  const MatrixX<Scalar> S = selection_scores(m, proj);

  TruncatedEStep<Scalar> out;
  out.spaces.reserve(N);
  for (int n = 0; n < N; ++n) out.spaces.push_back(build_state_space(S.row(n).transpose(), cfg));

  if (opt.clustering) {
    out.plan = cluster_partition(out.spaces, opt.alpha_percentile);
  } else {
    out.plan.clusters.reserve(N);
    for (int n = 0; n < N; ++n) out.plan.clusters.push_back({out.spaces[n].index_set, {n}});
  }
  const auto& clusters = out.plan.clusters;
  const std::size_t C = clusters.size();

  std::vector<SufficientStats<Scalar>> parts(C);
  std::vector<long> evals(C, 0), facts(C, 0);
  out.log_norm.resize(N);
  if (want_esz) out.esz = MatrixX<Scalar>::Zero(N, H);

  parallel_for(C, opt.workers, [&](std::size_t c) {
    const auto& cl = clusters[c];
    const int first = cl.members.front();
    try {
      const auto factors = factorize_states(m, out.spaces[first].states);
      facts[c] = static_cast<long>(factors.size());
      const auto idx = detail::to_index(cl.members);
      const MatrixX<Scalar> B = proj.B(idx, Eigen::all);
      const VectorX<Scalar> yty = proj.yty(idx);
      const MatrixX<Scalar> Y = data.Y(idx, Eigen::all);
      auto res = evaluate_block<Scalar>(m, std::span<const StateFactor<Scalar>>(factors), B, yty, Y, want_esz);
      evals[c] = res.state_evals;
      for (std::size_t i = 0; i < cl.members.size(); ++i) {
        out.log_norm(cl.members[i]) = res.log_norm(static_cast<Eigen::Index>(i));
        if (want_esz) out.esz.row(cl.members[i]) = res.esz.row(static_cast<Eigen::Index>(i));
      }
      parts[c] = std::move(res.stats);
    } catch (const Error&) {
      detail::rethrow_with_context("data index " + std::to_string(first));
    }
  });

  out.stats = tree_reduce(std::move(parts));
  out.counters.clusters = static_cast<long>(C);
  out.counters.state_evals = std::accumulate(evals.begin(), evals.end(), 0L);
  out.counters.factorizations = std::accumulate(facts.begin(), facts.end(), 0L);
  out.counters.fallback_points = out.stats.n_fallback;
  return out;
}

struct TruncatedEmOptions {
  TruncatedEStepOptions estep;
  MStepOptions mstep;
  std::function<void(const EmTrace&)> on_iteration;
};

template <typename Scalar>
struct TruncatedEmResult : EmResult<Scalar> {
  std::vector<EStepCounters> counters;  // one entry per iteration
};

/// Truncated variational EM. The trace value is the K_n-restricted
/// log-marginal sum, a diagnostic that need not increase monotonically.
template <typename Scalar>
TruncatedEmResult<Scalar> run_truncated_em(const Dataset<Scalar>& data, const ModelParams<Scalar>& init,
                                           const TruncationConfig& cfg, int iters,
                                           const TruncatedEmOptions& opt = {}) {
  if (iters < 1) throw ConfigError("run_truncated_em: iters must be >= 1");
  data.validate();
  init.validate(Scalar(opt.mstep.pi_floor));
  cfg.validate(init.H());
  TruncatedEmResult<Scalar> res;
  res.params = init;
  for (int it = 1; it <= iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    EmTrace tr;
    tr.iteration = it;
    try {
      auto e = truncated_estep(res.params, data, cfg, opt.estep);
      auto next = mstep(e.stats, data, res.params, opt.mstep, &res.last_mstep);
      tr.log_likelihood = double(e.stats.log_norm_sum);
      tr.param_deltas = detail::param_deltas(res.params, next);
      res.params = std::move(next);
      res.counters.push_back(e.counters);
    } catch (const Error&) {
      detail::rethrow_with_context("truncated EM iteration " + std::to_string(it));
    }
    tr.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.trace.push_back(tr);
    if (opt.on_iteration) opt.on_iteration(tr);
  }
  return res;
}

}  // namespace gsc

#endif  // GSC_TRUNCATED_EM_HPP
