#ifndef GSC_DATAGEN_HPP
#define GSC_DATAGEN_HPP

#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include "gsc/error.hpp"
#include "gsc/linalg.hpp"
#include "gsc/model.hpp"

namespace gsc {

/// SplitMix64 step: a well-mixed 64-bit value for stream `stream` of `base`.
/// Used for every derived seed (per trial, per generator stage).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

enum class GeneratorKind { spike_slab, bars, laplace_sc, cauchy_sc };

inline std::string to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::spike_slab: return "spike_slab";
    case GeneratorKind::bars: return "bars";
    case GeneratorKind::laplace_sc: return "laplace_sc";
    case GeneratorKind::cauchy_sc: return "cauchy_sc";
  }
  return "spike_slab";
}

inline GeneratorKind generator_kind_from_string(const std::string& s) {
  if (s == "spike_slab") return GeneratorKind::spike_slab;
  if (s == "bars") return GeneratorKind::bars;
  if (s == "laplace_sc" || s == "laplace") return GeneratorKind::laplace_sc;
  if (s == "cauchy_sc" || s == "cauchy") return GeneratorKind::cauchy_sc;
  throw ConfigError("unknown generator kind '" + s + "'");
}

struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::spike_slab;
  int H = 10;
  int D = 10;
  int N = 1000;
  double noise_sigma = 1.0;
  double ortho_perturb_sigma = std::sqrt(2.0);
  std::uint64_t seed = 0;

  void validate() const {
    if (H < 1 || D < 1 || N < 1) throw ConfigError("generator dimensions must be positive");
    if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be >= 0");
    if (!(ortho_perturb_sigma >= 0)) throw ConfigError("ortho_perturb_sigma must be >= 0");
    if (kind == GeneratorKind::bars && (H % 2 != 0)) throw ConfigError("bars data needs an even H");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "kind=" << to_string(kind) << " H=" << H << " D=" << D << " N=" << N << " noise_sigma=" << noise_sigma
       << " ortho_perturb_sigma=" << ortho_perturb_sigma << " seed=" << seed;
    return os.str();
  }
};

template <typename Scalar>
struct SpikeSlabSample {
  Dataset<Scalar> data;
  Eigen::MatrixXi s;  // N x H binary latents
  MatrixX<Scalar> z;  // N x H slab values (drawn for every latent)
};

/// Draws N points from the generative model: s ~ Bernoulli(π), z ~ N(μ, Ψ),
/// y = W (s ⊙ z) + ε with ε ~ N(0, Σ).
template <typename Scalar>
SpikeSlabSample<Scalar> sample_spike_slab(const ModelParams<Scalar>& p, int N, std::uint64_t seed) {
  p.validate(Scalar(0));
  if (N < 1) throw ConfigError("sample_spike_slab: N must be positive");
  const int H = p.H(), D = p.D();
  const MatrixX<Scalar> Lpsi = Eigen::LLT<MatrixX<Scalar>>(p.Psi).matrixL();
  const MatrixX<Scalar> Lsig = Eigen::LLT<MatrixX<Scalar>>(p.Sigma).matrixL();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  SpikeSlabSample<Scalar> out;
  out.s.resize(N, H);
  out.z.resize(N, H);
  out.data.Y.resize(N, D);
  VectorX<Scalar> e(H), f(D);
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < H; ++h) out.s(n, h) = unit(rng) < double(p.pi(h)) ? 1 : 0;
    for (int h = 0; h < H; ++h) e(h) = Scalar(normal(rng));
    for (int d = 0; d < D; ++d) f(d) = Scalar(normal(rng));
    const VectorX<Scalar> z = p.mu + Lpsi * e;
    out.z.row(n) = z.transpose();
    const VectorX<Scalar> x = z.cwiseProduct(out.s.row(n).transpose().template cast<Scalar>());
    out.data.Y.row(n) = (p.W * x + Lsig * f).transpose();
  }
  out.data.provenance = "spike_slab N=" + std::to_string(N) + " seed=" + std::to_string(seed);
  return out;
}

/// Ground truth of the bars test: D₂ = H/2, D = D₂², latent h < D₂ is the
/// horizontal bar in row h, the others vertical bars; every bar pixel is ±10
/// with a random sign per bar. π = 2/H, Σ = 2 I, μ ~ N(0, 5), Ψ = I.
template <typename Scalar = double>
ModelParams<Scalar> bars_ground_truth(int H, std::uint64_t seed) {
  if (H < 2 || H % 2 != 0) throw ConfigError("bars data needs an even H >= 2");
  const int D2 = H / 2, D = D2 * D2;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> mu_dist(0.0, std::sqrt(5.0));
  ModelParams<Scalar> p;
  p.noise_mode = NoiseMode::homoscedastic;
  p.W = MatrixX<Scalar>::Zero(D, H);
  for (int h = 0; h < H; ++h) {
    const Scalar v = coin(rng) ? Scalar(10) : Scalar(-10);
    for (int t = 0; t < D2; ++t) {
      const int pix = h < D2 ? h * D2 + t : t * D2 + (h - D2);
      p.W(pix, h) = v;
    }
  }
  p.pi = VectorX<Scalar>::Constant(H, Scalar(2) / Scalar(H));
  p.mu.resize(H);
  for (int h = 0; h < H; ++h) p.mu(h) = Scalar(mu_dist(rng));
  p.Psi = MatrixX<Scalar>::Identity(H, H);
  p.Sigma = Scalar(2) * MatrixX<Scalar>::Identity(D, D);
  return p;
}

template <typename Scalar>
struct BarsData {
  Dataset<Scalar> data;
  ModelParams<Scalar> truth;
};

template <typename Scalar = double>
BarsData<Scalar> bars_dataset(int H, int N, std::uint64_t seed) {
  BarsData<Scalar> out;
  out.truth = bars_ground_truth<Scalar>(H, derive_seed(seed, 0));
  out.data = sample_spike_slab(out.truth, N, derive_seed(seed, 1)).data;
  out.data.provenance = "bars H=" + std::to_string(H) + " N=" + std::to_string(N) + " seed=" + std::to_string(seed);
  return out;
}

/// Random orthonormal columns (QR of a Gaussian matrix, signs fixed so R has
/// a positive diagonal) plus i.i.d. N(0, perturb_sigma²) entries.
template <typename Scalar = double>
MatrixX<Scalar> perturbed_orthogonal_basis(int H, int D, double perturb_sigma, std::uint64_t seed) {
  if (H < 1 || D < 1) throw ConfigError("basis dimensions must be positive");
  if (H > D) throw DimensionError("orthogonal basis needs H <= D");
  if (!(perturb_sigma >= 0)) throw ConfigError("perturbation sigma must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd G(D, H);
  for (int h = 0; h < H; ++h)
    for (int d = 0; d < D; ++d) G(d, h) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(D, H);
  const Eigen::MatrixXd R = qr.matrixQR().topRows(H).template triangularView<Eigen::Upper>();
  for (int h = 0; h < H; ++h)
    if (R(h, h) < 0) Q.col(h) *= -1.0;
  if (perturb_sigma > 0)
    for (int h = 0; h < H; ++h)
      for (int d = 0; d < D; ++d) Q(d, h) += perturb_sigma * normal(rng);
  return Q.cast<Scalar>();
}

/// Ground truth for the consistency experiments: perturbed orthogonal W,
/// π = 1/H, μ = 0, Ψ = I, Σ = σ² I.
template <typename Scalar = double>
ModelParams<Scalar> consistency_ground_truth(int H, int D, double perturb_sigma, double noise_sigma,
                                             std::uint64_t seed) {
  if (!(noise_sigma > 0)) throw ConfigError("noise_sigma must be positive for a model ground truth");
  ModelParams<Scalar> p;
  p.noise_mode = NoiseMode::homoscedastic;
  p.W = perturbed_orthogonal_basis<Scalar>(H, D, perturb_sigma, seed);
  p.pi = VectorX<Scalar>::Constant(H, Scalar(1) / Scalar(H));
  p.mu = VectorX<Scalar>::Zero(H);
  p.Psi = MatrixX<Scalar>::Identity(H, H);
  p.Sigma = Scalar(noise_sigma * noise_sigma) * MatrixX<Scalar>::Identity(D, D);
  return p;
}

enum class HeavyTail { laplace, cauchy };

/// Standard (unit-scale) sparse coding data: x_h i.i.d. Laplace or Cauchy,
/// y = W_gen x + N(0, noise_sigma² I).
template <typename Scalar>
Dataset<Scalar> sample_sparse_coding(HeavyTail prior, const MatrixX<Scalar>& W_gen, double noise_sigma, int N,
                                     std::uint64_t seed, MatrixX<Scalar>* sources = nullptr) {
  if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be >= 0");
  if (N < 1 || W_gen.size() == 0) throw ConfigError("sample_sparse_coding: empty problem");
  const int D = static_cast<int>(W_gen.rows()), H = static_cast<int>(W_gen.cols());
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> expo(1.0);
  std::bernoulli_distribution coin(0.5);
  std::cauchy_distribution<double> cauchy(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixX<Scalar> X(N, H);
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      X(n, h) = Scalar(prior == HeavyTail::laplace ? (coin(rng) ? 1.0 : -1.0) * expo(rng) : cauchy(rng));
  Dataset<Scalar> out;
  out.Y = X * W_gen.transpose();
  if (noise_sigma > 0)
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < D; ++d) out.Y(n, d) += Scalar(noise_sigma * normal(rng));
  out.provenance = std::string(prior == HeavyTail::laplace ? "laplace" : "cauchy") + "_sc N=" + std::to_string(N) +
                   " seed=" + std::to_string(seed);
  if (sources) *sources = std::move(X);
  return out;
}

template <typename Scalar>
struct GeneratedData {
  Dataset<Scalar> data;
  MatrixX<Scalar> W_gen;
  std::optional<ModelParams<Scalar>> truth;  // set for model-generated kinds
};

/// Dispatches on spec.kind. Model-based kinds use the consistency ground
/// truth (or the bars basis); heavy-tailed kinds mix with a perturbed
/// orthogonal basis. The generator settings are recorded as the dataset provenance.
template <typename Scalar = double>
GeneratedData<Scalar> generate(const GeneratorSpec& spec) {
  spec.validate();
  GeneratedData<Scalar> out;
  switch (spec.kind) {
    case GeneratorKind::bars: {
      auto b = bars_dataset<Scalar>(spec.H, spec.N, spec.seed);
      out.data = std::move(b.data);
      out.W_gen = b.truth.W;
      out.truth = std::move(b.truth);
      break;
    }
    case GeneratorKind::spike_slab: {
      auto truth = consistency_ground_truth<Scalar>(spec.H, spec.D, spec.ortho_perturb_sigma, spec.noise_sigma,
                                                    derive_seed(spec.seed, 0));
      out.data = sample_spike_slab(truth, spec.N, derive_seed(spec.seed, 1)).data;
      out.W_gen = truth.W;
      out.truth = std::move(truth);
      break;
    }
    case GeneratorKind::laplace_sc:
    case GeneratorKind::cauchy_sc: {
      out.W_gen = perturbed_orthogonal_basis<Scalar>(spec.H, spec.D, spec.ortho_perturb_sigma,
                                                     derive_seed(spec.seed, 0));
      out.data = sample_sparse_coding<Scalar>(
          spec.kind == GeneratorKind::laplace_sc ? HeavyTail::laplace : HeavyTail::cauchy, out.W_gen,
          spec.noise_sigma, spec.N, derive_seed(spec.seed, 1));
      break;
    }
  }
  out.data.provenance = spec.describe();
  return out;
}

}  // namespace gsc

#endif  // GSC_DATAGEN_HPP
