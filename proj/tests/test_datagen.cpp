#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gsc/datagen.hpp"

using namespace gsc;

namespace {

Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& X) {
  const Eigen::RowVectorXd m = X.colwise().mean();
  const Eigen::MatrixXd C = X.rowwise() - m;
  return C.transpose() * C / double(X.rows() - 1);
}

double quantile(std::vector<double> v, double q) {
  const auto k = static_cast<std::size_t>(q * double(v.size() - 1));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

ModelParamsd two_latent_model() {
  ModelParamsd p;
  p.W = Eigen::MatrixXd::Identity(2, 2);
  p.Sigma = 1e-6 * Eigen::MatrixXd::Identity(2, 2);
  p.pi = Eigen::Vector2d(0.3, 0.6);
  p.mu = Eigen::Vector2d(1.5, -0.5);
  p.Psi.resize(2, 2);
  p.Psi << 1.0, 0.4, 0.4, 2.0;
  return p;
}

}  // namespace

TEST(DeriveSeed, DistinctStreamsAndStable) {
  EXPECT_EQ(derive_seed(42, 3), derive_seed(42, 3));
  EXPECT_NE(derive_seed(42, 0), derive_seed(42, 1));
  EXPECT_NE(derive_seed(42, 0), derive_seed(43, 0));
}

TEST(SpikeSlabSampler, SpikeOnlyGivesNoiseCovariance) {
  ModelParamsd p;
  p.W = Eigen::MatrixXd::Constant(3, 2, 5.0);
  p.Sigma = 0.7 * Eigen::MatrixXd::Identity(3, 3);
  p.pi = Eigen::Vector2d(0.0, 0.0);
  p.mu = Eigen::Vector2d(3.0, 3.0);
  p.Psi = Eigen::MatrixXd::Identity(2, 2);
  const auto s = sample_spike_slab(p, 10000, 5);
  EXPECT_EQ(s.s.sum(), 0);
  const Eigen::MatrixXd C = sample_covariance(s.data.Y);
  EXPECT_LT((C - p.Sigma).cwiseAbs().maxCoeff(), 0.05);
  EXPECT_LT(s.data.Y.colwise().mean().cwiseAbs().maxCoeff(), 0.05);
}

TEST(SpikeSlabSampler, ActivationRateWithinBinomialInterval) {
  auto p = two_latent_model();
  const int N = 20000;
  const auto s = sample_spike_slab(p, N, 9);
  for (int h = 0; h < 2; ++h) {
    const double rate = s.s.col(h).cast<double>().mean();
    const double sd = std::sqrt(p.pi(h) * (1 - p.pi(h)) / N);
    EXPECT_NEAR(rate, p.pi(h), 3 * sd) << "latent " << h;
  }
}

TEST(SpikeSlabSampler, MixtureCovarianceMatchesMoments) {
  // With W = I and negligible noise, y = s⊙z, so
  //   Cov_hh = π_h (Ψ_hh + μ_h²) - π_h² μ_h²,   Cov_hg = π_h π_g Ψ_hg.
  auto p = two_latent_model();
  const auto s = sample_spike_slab(p, 100000, 13);
  const Eigen::MatrixXd C = sample_covariance(s.data.Y);
  Eigen::Matrix2d expected;
  for (int h = 0; h < 2; ++h)
    for (int g = 0; g < 2; ++g)
      expected(h, g) = h == g ? p.pi(h) * (p.Psi(h, h) + p.mu(h) * p.mu(h)) - std::pow(p.pi(h) * p.mu(h), 2)
                              : p.pi(h) * p.pi(g) * p.Psi(h, g);
  EXPECT_NEAR(C(0, 0), expected(0, 0), 0.05 * expected(0, 0));
  EXPECT_NEAR(C(1, 1), expected(1, 1), 0.05 * expected(1, 1));
  // The cross term is small relative to its sampling noise, so it gets four
  // standard errors of the product moment instead of a relative band.
  const Eigen::ArrayXd prod = (s.data.Y.col(0).array() - s.data.Y.col(0).mean()) *
                              (s.data.Y.col(1).array() - s.data.Y.col(1).mean());
  const double se = std::sqrt((prod - prod.mean()).square().mean() / double(prod.size()));
  EXPECT_NEAR(C(0, 1), expected(0, 1), 4 * se);
  EXPECT_NEAR(s.data.Y.col(0).mean(), p.pi(0) * p.mu(0), 0.02);
}

TEST(SpikeSlabSampler, SeedDeterminesOutput) {
  auto p = two_latent_model();
  EXPECT_EQ(sample_spike_slab(p, 50, 3).data.Y, sample_spike_slab(p, 50, 3).data.Y);
  EXPECT_NE(sample_spike_slab(p, 50, 3).data.Y, sample_spike_slab(p, 50, 4).data.Y);
}

TEST(Bars, GroundTruthStructure) {
  const auto p = bars_ground_truth(10, 1);
  ASSERT_EQ(p.D(), 25);
  ASSERT_EQ(p.H(), 10);
  for (int h = 0; h < 10; ++h) {
    int nz = 0;
    for (int d = 0; d < 25; ++d)
      if (p.W(d, h) != 0) {
        ++nz;
        EXPECT_EQ(std::abs(p.W(d, h)), 10.0);
      }
    EXPECT_EQ(nz, 5) << "bar " << h;
  }
  // Horizontal bar 0 covers pixels 0..4, vertical bar 5 covers 0,5,10,15,20.
  for (int t = 0; t < 5; ++t) {
    EXPECT_NE(p.W(t, 0), 0.0);
    EXPECT_NE(p.W(t * 5, 5), 0.0);
  }
  EXPECT_DOUBLE_EQ(p.pi(3), 0.2);
  EXPECT_EQ(p.Sigma, 2.0 * Eigen::MatrixXd::Identity(25, 25));
  EXPECT_EQ(p.noise_mode, NoiseMode::homoscedastic);
}

TEST(Bars, MeanActiveBarsIsTwo) {
  const auto s = sample_spike_slab(bars_ground_truth(10, 2), 5000, 3);
  EXPECT_NEAR(s.s.cast<double>().rowwise().sum().mean(), 2.0, 0.08);
}

TEST(Bars, OddHRejected) { EXPECT_THROW(bars_ground_truth(9, 0), ConfigError); }

TEST(HeavyTailed, LaplaceShape) {
  const int N = 1000000;
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(1, 1);
  Eigen::MatrixXd X;
  sample_sparse_coding(HeavyTail::laplace, I, 0.0, N, 21, &X);
  std::vector<double> a(N);
  double m2 = 0, m4 = 0;
  for (int n = 0; n < N; ++n) {
    a[n] = std::abs(X(n, 0));
    m2 += X(n, 0) * X(n, 0);
    m4 += std::pow(X(n, 0), 4);
  }
  m2 /= N;
  m4 /= N;
  EXPECT_NEAR(quantile(a, 0.5), std::log(2.0), 0.02 * std::log(2.0));
  EXPECT_NEAR(m2, 2.0, 0.03);
  EXPECT_NEAR(m4 / (m2 * m2) - 3.0, 3.0, 0.3);  // excess kurtosis of the Laplace law
}

TEST(HeavyTailed, CauchyInterquartileRange) {
  const int N = 200000;
  Eigen::MatrixXd X;
  sample_sparse_coding(HeavyTail::cauchy, Eigen::MatrixXd::Identity(1, 1).eval(), 0.0, N, 22, &X);
  std::vector<double> v(X.data(), X.data() + N);
  EXPECT_NEAR(quantile(v, 0.75) - quantile(v, 0.25), 2.0, 0.05);
  EXPECT_NEAR(quantile(v, 0.5), 0.0, 0.02);
}

TEST(HeavyTailed, MixingAndNoise) {
  Eigen::MatrixXd W(2, 2);
  W << 1, 2, -1, 0.5;
  Eigen::MatrixXd X;
  const auto clean = sample_sparse_coding(HeavyTail::laplace, W, 0.0, 100, 4, &X);
  EXPECT_LT((clean.Y - X * W.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  const auto noisy = sample_sparse_coding(HeavyTail::laplace, W, 0.1, 100, 4);
  EXPECT_GT((noisy.Y - clean.Y).cwiseAbs().maxCoeff(), 0.0);
}

TEST(OrthogonalBasis, OrthonormalWithoutPerturbation) {
  const auto Q = perturbed_orthogonal_basis(6, 10, 0.0, 8);
  EXPECT_LT((Q.transpose() * Q - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OrthogonalBasis, PerturbationReducesOrthogonality) {
  auto mean_abs_cosine = [](const Eigen::MatrixXd& W) {
    const Eigen::VectorXd norms = W.colwise().norm();
    double acc = 0;
    int cnt = 0;
    for (int i = 0; i < W.cols(); ++i)
      for (int j = i + 1; j < W.cols(); ++j, ++cnt) acc += std::abs(W.col(i).dot(W.col(j))) / (norms(i) * norms(j));
    return acc / cnt;
  };
  // Averaging over seeds removes most of the sampling noise of the trend.
  std::vector<double> c;
  for (double sigma : {0.05, 0.5, 4.0}) {
    double acc = 0;
    for (int s = 0; s < 20; ++s) acc += mean_abs_cosine(perturbed_orthogonal_basis(10, 10, sigma, 100 + s));
    c.push_back(acc / 20);
  }
  EXPECT_LT(c[0], c[1]);
  EXPECT_LT(c[1], c[2]);
}

TEST(OrthogonalBasis, RejectsWideShape) { EXPECT_THROW(perturbed_orthogonal_basis(5, 4, 0.0, 1), DimensionError); }

TEST(Generate, DispatchAndDeterminism) {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::spike_slab;
  spec.H = 4;
  spec.D = 6;
  spec.N = 30;
  spec.seed = 77;
  const auto a = generate(spec), b = generate(spec);
  EXPECT_EQ(a.data.Y, b.data.Y);
  ASSERT_TRUE(a.truth.has_value());
  EXPECT_EQ(a.W_gen.rows(), 6);
  EXPECT_EQ(a.data.provenance, spec.describe());

  spec.kind = GeneratorKind::laplace_sc;
  const auto l = generate(spec);
  EXPECT_FALSE(l.truth.has_value());
  EXPECT_EQ(l.data.N(), 30);

  spec.kind = GeneratorKind::bars;
  spec.H = 6;
  const auto bars = generate(spec);
  EXPECT_EQ(bars.data.D(), 9);
  EXPECT_EQ(generator_kind_from_string(to_string(GeneratorKind::cauchy_sc)), GeneratorKind::cauchy_sc);
  EXPECT_THROW(generator_kind_from_string("uniform"), ConfigError);
}
