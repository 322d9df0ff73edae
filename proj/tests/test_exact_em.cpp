#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gsc/datagen.hpp"
#include "gsc/exact_em.hpp"
#include "support/oracles.hpp"
#include "support/stationarity.hpp"

using namespace gsc;

namespace {

Datasetd sample_data(const ModelParamsd& p, int N, std::mt19937_64& rng) {
  Datasetd d;
  d.Y.resize(N, p.D());
  for (int n = 0; n < N; ++n) d.Y.row(n) = oracle::random_observation(p, rng).transpose();
  return d;
}

SufficientStats<double> summed(const std::vector<SufficientStats<double>>& per_point) {
  auto acc = SufficientStats<double>::zeros(static_cast<int>(per_point[0].YEsz.rows()),
                                            static_cast<int>(per_point[0].Es.size()));
  for (const auto& s : per_point) acc += s;
  return acc;
}

}  // namespace

TEST(ExactEStep, ScalarModelHandValue) {
  ModelParamsd p;
  p.W = Eigen::MatrixXd::Constant(1, 1, 2.0);
  p.Sigma = Eigen::MatrixXd::Identity(1, 1);
  p.pi = Eigen::VectorXd::Constant(1, 0.5);
  p.mu = Eigen::VectorXd::Zero(1);
  p.Psi = Eigen::MatrixXd::Identity(1, 1);
  Datasetd d;
  d.Y = Eigen::MatrixXd::Zero(1, 1);
  const auto st = exact_estep(p, d);
  ASSERT_EQ(st.size(), 1u);
  EXPECT_NEAR(st[0].Es(0), 0.3090169943749474, 1e-12);
}

TEST(ExactEStep, PointMassPosterior) {
  // Large, well separated bases with small noise: the generating state wins.
  ModelParamsd p;
  p.W = 50 * Eigen::MatrixXd::Identity(3, 3);
  p.Sigma = 0.01 * Eigen::MatrixXd::Identity(3, 3);
  p.pi = Eigen::VectorXd::Constant(3, 0.5);
  p.mu = Eigen::VectorXd::Constant(3, 1.0);
  p.Psi = 0.01 * Eigen::MatrixXd::Identity(3, 3);
  Datasetd d;
  d.Y = Eigen::RowVector3d(50, 0, 50);
  const auto st = exact_estep(p, d)[0];
  EXPECT_NEAR(st.Es(0), 1.0, 1e-9);
  EXPECT_NEAR(st.Es(1), 0.0, 1e-9);
  EXPECT_NEAR(st.Es(2), 1.0, 1e-9);
}

TEST(ExactEStep, MatchesQuadratureOracle) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 3; ++trial) {
    const auto p = oracle::random_params(2, 3, rng);
    const auto y = oracle::random_observation(p, rng);
    Datasetd d;
    d.Y = y.transpose();
    const auto st = exact_estep(p, d)[0];
    const auto q = oracle::quadrature_expectations(p, y);
    EXPECT_LT(oracle::stats_rel_diff(st, q), 1e-5);
  }
}

TEST(ExactEStep, StatisticInvariants) {
  std::mt19937_64 rng(32);
  const auto p = oracle::random_params(4, 5, rng);
  const auto d = sample_data(p, 30, rng);
  for (const auto& st : exact_estep(p, d)) {
    EXPECT_TRUE((st.Es.array() >= 0).all() && (st.Es.array() <= 1).all());
    EXPECT_LT((st.Ess.diagonal() - st.Es).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((st.Ess - st.Ess.transpose()).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((st.Eszsz - st.Eszsz.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    const Eigen::MatrixXd cov = st.Eszsz - st.Esz * st.Esz.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    EXPECT_GT(es.eigenvalues().minCoeff(), -1e-8);
  }
}

TEST(ExactEStep, KernelAccumulationMatchesPerPointRoute) {
  std::mt19937_64 rng(33);
  for (bool full_psi : {true, false}) {
    oracle::InstanceOptions opt;
    opt.full_psi = full_psi;
    const auto p = oracle::random_params(5, 6, rng, opt);
    const auto d = sample_data(p, 57, rng);
    const auto direct = summed(exact_estep(p, d));
    EStepOptions eo;
    eo.block_size = 8;
    const auto fast = exact_estep_accumulate(p, d, eo);
    EXPECT_LT(oracle::stats_rel_diff(fast, direct), 1e-10);
    EXPECT_NEAR(fast.log_norm_sum, direct.log_norm_sum, 1e-9 * std::abs(direct.log_norm_sum));
    EXPECT_EQ(fast.n_count, 57);
  }
}

// H = 8 gives 256 states, and blocks of 40 points go through the dense
// feature products instead of per-state solves.
TEST(ExactEStep, DenseBlocksMatchPerPointRoute) {
  std::mt19937_64 rng(34);
  for (bool full_psi : {true, false}) {
    oracle::InstanceOptions opt;
    opt.full_psi = full_psi;
    opt.noise = full_psi ? NoiseMode::full : NoiseMode::homoscedastic;
    const auto p = oracle::random_params(8, 7, rng, opt);
    const auto d = sample_data(p, 120, rng);
    const auto direct = summed(exact_estep(p, d));
    EStepOptions eo;
    eo.block_size = 40;
    const auto fast = exact_estep_accumulate(p, d, eo);
    EXPECT_LT(oracle::stats_rel_diff(fast, direct), 1e-10);
    EXPECT_NEAR(fast.log_norm_sum, direct.log_norm_sum, 1e-9 * std::abs(direct.log_norm_sum));

    const auto m = prepare_model(p);
    const auto proj = project_data(m, d.Y);
    const auto states = enumerate_states(8);
    const auto factors = factorize_states(m, states);
    const Eigen::MatrixXd LJ = log_joint_block<double>(factors, proj.B.topRows(20), proj.yty.head(20));
    double worst = 0;
    for (int n = 0; n < 20; ++n)
      for (std::size_t s = 0; s < states.size(); s += 17)
        worst = std::max(worst, std::abs(LJ(n, static_cast<Eigen::Index>(s)) -
                                         log_joint_ys(p, states[s], Eigen::VectorXd(d.Y.row(n).transpose()))));
    EXPECT_LT(worst, 1e-9);
  }
}

TEST(ExactEStep, SumIsIndependentOfWorkerCount) {
  std::mt19937_64 rng(34);
  const auto p = oracle::random_params(4, 5, rng);
  const auto d = sample_data(p, 300, rng);
  EStepOptions one;
  one.block_size = 16;
  EStepOptions many = one;
  many.workers = 4;
  const auto a = exact_estep_accumulate(p, d, one);
  const auto b = exact_estep_accumulate(p, d, many);
  EXPECT_EQ(a.Es, b.Es);
  EXPECT_EQ(a.Eszsz, b.Eszsz);
  EXPECT_EQ(a.YEsz, b.YEsz);
  EXPECT_EQ(a.log_norm_sum, b.log_norm_sum);
}

TEST(MStep, SinglePointMeanRatio) {
  ModelParamsd old;
  old.W = Eigen::MatrixXd::Ones(1, 1);
  old.Sigma = Eigen::MatrixXd::Identity(1, 1);
  old.pi = Eigen::VectorXd::Constant(1, 0.5);
  old.mu = Eigen::VectorXd::Zero(1);
  old.Psi = Eigen::MatrixXd::Identity(1, 1);
  auto st = SufficientStats<double>::zeros(1, 1);
  st.Es(0) = 1;
  st.Ess(0, 0) = 1;
  st.Esz(0) = 3;
  st.Eszsz(0, 0) = 10;
  st.YEsz(0, 0) = 3;
  st.n_count = 1;
  Datasetd d;
  d.Y = Eigen::MatrixXd::Constant(1, 1, 1.0);
  const auto p = mstep(st, d, old);
  EXPECT_DOUBLE_EQ(p.mu(0), 3.0);
  EXPECT_NEAR(p.Psi(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(p.pi(0), 1 - kDefaultPiFloor, 1e-15);
}

TEST(MStep, NearDeterministicPosteriorRecoversEmpiricalGenerator) {
  // Orthogonal well-separated bases and tiny noise: the posterior is a point
  // mass on the true (s, z), so the M-step returns the empirical generator.
  ModelParamsd truth;
  truth.W = 5 * perturbed_orthogonal_basis(3, 4, 0.0, 7);
  truth.Sigma = 1e-6 * Eigen::MatrixXd::Identity(4, 4);
  truth.pi = Eigen::Vector3d(0.3, 0.5, 0.7);
  truth.mu = Eigen::Vector3d(4, -5, 6);
  truth.Psi = Eigen::Vector3d(0.5, 0.8, 1.0).asDiagonal();
  truth.noise_mode = NoiseMode::homoscedastic;
  const auto sample = sample_spike_slab(truth, 400, 99);
  const int N = 400;
  const Eigen::MatrixXd S = sample.s.cast<double>();
  const Eigen::VectorXd counts = S.colwise().sum().transpose();
  const Eigen::MatrixXd SZ = S.cwiseProduct(sample.z);
  Eigen::VectorXd mu_emp = SZ.colwise().sum().transpose().cwiseQuotient(counts);
  Eigen::VectorXd psi_emp(3);
  for (int h = 0; h < 3; ++h)
    psi_emp(h) = (SZ.col(h).array().square().sum() - counts(h) * mu_emp(h) * mu_emp(h)) / counts(h);

  MStepOptions mo;
  mo.psi = SlabCovariance::diagonal;
  const auto p = mstep(exact_estep_accumulate(truth, sample.data), sample.data, truth, mo);
  EXPECT_LT((p.W - truth.W).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LT((p.pi - counts / N).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LT((p.mu - mu_emp).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LT((p.Psi.diagonal() - psi_emp).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LT(p.Sigma(0, 0), 1e-3);
}

TEST(MStep, NoiseFormsAgreeAtUpdatedW) {
  std::mt19937_64 rng(35);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = oracle::random_params(3, 4, rng);
    const auto d = sample_data(p, 40, rng);
    MStepOptions mo;
    mo.verify_sigma_forms = true;
    MStepReport rep;
    EXPECT_NO_THROW(mstep(exact_estep_accumulate(p, d), d, p, mo, &rep));
    EXPECT_LT(rep.sigma_form_gap, 1e-8);
  }
}

TEST(MStep, NoiseProjection) {
  std::mt19937_64 rng(36);
  for (auto mode : {NoiseMode::diagonal, NoiseMode::homoscedastic}) {
    oracle::InstanceOptions opt;
    opt.noise = mode;
    const auto p = oracle::random_params(3, 4, rng, opt);
    const auto d = sample_data(p, 40, rng);
    const auto st = exact_estep_accumulate(p, d);
    auto full = p;
    full.noise_mode = NoiseMode::full;
    const auto unconstrained = mstep(st, d, full);
    const auto q = mstep(st, d, p);
    EXPECT_NO_THROW(q.validate());
    if (mode == NoiseMode::homoscedastic)
      EXPECT_NEAR(q.Sigma(0, 0), unconstrained.Sigma.trace() / 4, 1e-12);
    else
      EXPECT_LT((q.Sigma.diagonal() - unconstrained.Sigma.diagonal()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MStep, UnusedLatentIsHeld) {
  std::mt19937_64 rng(37);
  const auto p = oracle::random_params(3, 4, rng);
  const auto d = sample_data(p, 20, rng);
  auto st = exact_estep_accumulate(p, d);
  st.Es(1) = 0;
  st.Ess.row(1).setZero();
  st.Ess.col(1).setZero();
  st.Esz(1) = 0;
  st.Eszsz.row(1).setZero();
  st.Eszsz.col(1).setZero();
  st.YEsz.col(1).setZero();
  MStepReport rep;
  MStepOptions mo;
  mo.psi = SlabCovariance::diagonal;
  const auto q = mstep(st, d, p, mo, &rep);
  EXPECT_EQ(rep.held_latents, std::vector<int>{1});
  EXPECT_EQ(q.mu(1), p.mu(1));
  EXPECT_EQ(q.Psi(1, 1), p.Psi(1, 1));
  EXPECT_EQ(q.W.col(1), p.W.col(1));
}

TEST(FreeEnergy, BoundProperties) {
  std::mt19937_64 rng(38);
  oracle::InstanceOptions diag;
  diag.full_psi = false;
  for (int trial = 0; trial < 4; ++trial) {
    const auto p = oracle::random_params(3, 4, rng, diag);
    const auto d = sample_data(p, 25, rng);
    double ll = 0;
    for (int n = 0; n < d.N(); ++n) ll += log_marginal_likelihood(p, Eigen::VectorXd(d.Y.row(n).transpose()));
    const double f_old = free_energy(p, p, d);
    EXPECT_NEAR(f_old, ll, 1e-8 * std::max(1.0, std::abs(ll)));

    MStepOptions mo;
    mo.psi = SlabCovariance::diagonal;
    const auto q = mstep(exact_estep_accumulate(p, d), d, p, mo);
    const double f_new = free_energy(q, p, d);
    EXPECT_GE(f_new, f_old - 1e-8);
    double ll_new = 0;
    for (int n = 0; n < d.N(); ++n) ll_new += log_marginal_likelihood(q, Eigen::VectorXd(d.Y.row(n).transpose()));
    EXPECT_LE(f_new, ll_new + 1e-8);
  }
}

TEST(MStep, FullSlabCovarianceStaysPositiveDefinite) {
  std::mt19937_64 rng(45);
  int projected = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = oracle::random_params(4, 4, rng);
    const auto d = sample_data(p, 15, rng);
    MStepReport rep;
    const auto q = mstep(exact_estep_accumulate(p, d), d, p, {}, &rep);
    EXPECT_NO_THROW(q.validate());
    projected += rep.psi_projected ? 1 : 0;
    if (rep.psi_projected) EXPECT_GT(q.Psi.diagonal().minCoeff(), 0.0);
  }
  RecordProperty("projected", projected);
}

TEST(FreeEnergy, MStepIsStationary) {
  std::mt19937_64 rng(39);
  for (int trial = 0; trial < 5; ++trial) {
    const auto inst = oracle::stationarity_instance(rng);
    const auto rep = oracle::fd_stationarity(inst.p_new, inst.p_old, inst.data, /*psi_diagonal=*/true);
    for (const auto& b : rep.blocks) EXPECT_LE(b.ratio(), 1e-4) << b.block;
  }
}

TEST(RunExactEm, OneIterationIsEStepThenMStep) {
  std::mt19937_64 rng(40);
  const auto p = oracle::random_params(3, 4, rng);
  const auto d = sample_data(p, 30, rng);
  const auto res = run_exact_em(d, p, 1);
  const auto direct = mstep(exact_estep_accumulate(p, d), d, p);
  EXPECT_EQ(res.params.W, direct.W);
  EXPECT_EQ(res.params.Sigma, direct.Sigma);
  ASSERT_EQ(res.trace.size(), 1u);
  EXPECT_EQ(res.trace[0].iteration, 1);
}

TEST(RunExactEm, LikelihoodIsMonotone) {
  std::mt19937_64 rng(41);
  const auto truth = oracle::random_params(4, 5, rng);
  const auto d = sample_data(truth, 200, rng);
  const auto init = random_initialization(d, 4, NoiseMode::full, 5);
  const auto res = run_exact_em(d, init, 40);
  for (std::size_t i = 1; i < res.trace.size(); ++i) {
    EXPECT_GE(res.trace[i].log_likelihood, res.trace[i - 1].log_likelihood - 1e-8);
    EXPECT_EQ(res.trace[i].iteration, res.trace[i - 1].iteration + 1);
  }
}

TEST(RunExactEm, PermutationEquivariance) {
  std::mt19937_64 rng(42);
  const auto truth = oracle::random_params(3, 4, rng);
  const auto d = sample_data(truth, 100, rng);
  const auto init = random_initialization(d, 3, NoiseMode::full, 6);
  Eigen::PermutationMatrix<Eigen::Dynamic> P(3);
  P.indices() << 2, 0, 1;
  auto pinit = init;
  pinit.W = init.W * P;
  pinit.pi = P.transpose() * init.pi;
  pinit.mu = P.transpose() * init.mu;
  pinit.Psi = P.transpose() * init.Psi * P;
  const auto a = run_exact_em(d, init, 10).params;
  const auto b = run_exact_em(d, pinit, 10).params;
  EXPECT_LT((a.W * P - b.W).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((P.transpose() * a.pi - b.pi).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((a.Sigma - b.Sigma).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(RunExactEm, EarlyStopAndValidation) {
  std::mt19937_64 rng(43);
  const auto truth = oracle::random_params(2, 3, rng);
  const auto d = sample_data(truth, 50, rng);
  EmOptions opt;
  opt.early_stop = true;
  opt.early_stop_tol = 1e-3;
  opt.early_stop_patience = 2;
  const auto res = run_exact_em(d, truth, 500, opt);
  EXPECT_LT(res.trace.size(), 500u);
  EXPECT_THROW(run_exact_em(d, truth, 0), ConfigError);
}

TEST(RunExactEm, ErrorsCarryIterationIndex) {
  try {
    try {
      throw NumericalError("boom", {1, 2}, 3.0);
    } catch (const Error&) {
      detail::rethrow_with_context("exact EM iteration 7");
    }
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 7"), std::string::npos);
    EXPECT_EQ(e.state(), (std::vector<int>{1, 2}));
    return;
  }
  FAIL();
}

TEST(Initialization, FollowsDocumentedRanges) {
  std::mt19937_64 rng(44);
  const auto truth = oracle::random_params(3, 4, rng);
  const auto d = sample_data(truth, 80, rng);
  for (auto mode : {NoiseMode::full, NoiseMode::diagonal, NoiseMode::homoscedastic}) {
    const auto p = random_initialization(d, 6, mode, 1);
    EXPECT_NO_THROW(p.validate());
    EXPECT_TRUE((p.pi.array() >= 0.05).all() && (p.pi.array() <= 0.95).all());
    EXPECT_TRUE((p.Psi.diagonal().array() > 0).all() && (p.Psi.diagonal().array() <= 1).all());
    EXPECT_TRUE(Eigen::MatrixXd(p.Psi.diagonal().asDiagonal()) == p.Psi);
  }
  const auto a = random_initialization(d, 6, NoiseMode::full, 1);
  const auto b = random_initialization(d, 6, NoiseMode::full, 1);
  EXPECT_EQ(a.W, b.W);
}
