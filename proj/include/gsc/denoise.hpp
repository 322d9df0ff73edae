#ifndef GSC_DENOISE_HPP
#define GSC_DENOISE_HPP

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "gsc/datagen.hpp"
#include "gsc/error.hpp"
#include "gsc/exact_em.hpp"
#include "gsc/linalg.hpp"
#include "gsc/model.hpp"
#include "gsc/truncated_em.hpp"

namespace gsc {

template <typename Scalar>
struct GrayImage {
  MatrixX<Scalar> pixels;  // values in [0, 255]
  int rows() const { return static_cast<int>(pixels.rows()); }
  int cols() const { return static_cast<int>(pixels.cols()); }
};

/// All shift-1 patches of an image, flattened row-major, anchors row-major.
template <typename Scalar>
struct PatchGrid {
  Dataset<Scalar> patches;
  std::vector<std::pair<int, int>> positions;
  int p = 8;
};

template <typename Scalar>
PatchGrid<Scalar> extract_patches(const GrayImage<Scalar>& img, int p = 8) {
  const int R = img.rows(), C = img.cols();
  if (p < 1 || p > std::min(R, C)) throw ConfigError("patch size must lie in [1, min(rows, cols)]");
  PatchGrid<Scalar> g;
  g.p = p;
  const int nr = R - p + 1, nc = C - p + 1;
  g.patches.Y.resize(nr * nc, p * p);
  g.positions.reserve(static_cast<std::size_t>(nr) * nc);
  int n = 0;
  for (int r = 0; r < nr; ++r)
    for (int c = 0; c < nc; ++c, ++n) {
      g.positions.emplace_back(r, c);
      for (int i = 0; i < p; ++i) g.patches.Y.row(n).segment(i * p, p) = img.pixels.row(r + i).segment(c, p);
    }
  g.patches.provenance = "patches p=" + std::to_string(p);
  return g;
}

/// Averages overlapping patches per pixel (uniform weights) and clips the
/// result to [0, 255].
template <typename Scalar>
GrayImage<Scalar> reassemble(const PatchGrid<Scalar>& g, int R, int C) {
  const int p = g.p;
  if (static_cast<std::size_t>(g.patches.N()) != g.positions.size() || g.patches.D() != p * p)
    throw DimensionError("reassemble: patch grid is inconsistent");
  MatrixX<Scalar> sum = MatrixX<Scalar>::Zero(R, C);
  Eigen::MatrixXi count = Eigen::MatrixXi::Zero(R, C);
  for (std::size_t n = 0; n < g.positions.size(); ++n) {
    const auto [r, c] = g.positions[n];
    if (r < 0 || c < 0 || r + p > R || c + p > C) throw DimensionError("reassemble: patch outside the image");
    for (int i = 0; i < p; ++i) {
      sum.row(r + i).segment(c, p) += g.patches.Y.row(static_cast<Eigen::Index>(n)).segment(i * p, p);
      count.row(r + i).segment(c, p).array() += 1;
    }
  }
  if ((count.array() == 0).any()) throw DimensionError("reassemble: patches do not cover the image");
  GrayImage<Scalar> out;
  out.pixels = (sum.array() / count.array().template cast<Scalar>()).cwiseMax(Scalar(0)).cwiseMin(Scalar(255));
  return out;
}

/// Adds N(0, sigma²) noise to every pixel, clipped to [0, 255].
template <typename Scalar>
GrayImage<Scalar> add_noise(const GrayImage<Scalar>& img, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  GrayImage<Scalar> out = img;
  for (Eigen::Index c = 0; c < out.pixels.cols(); ++c)
    for (Eigen::Index r = 0; r < out.pixels.rows(); ++r)
      out.pixels(r, c) = std::clamp(out.pixels(r, c) + Scalar(normal(rng)), Scalar(0), Scalar(255));
  return out;
}

/// Replaces every patch by W <s⊙z>_n under the truncated posterior.
template <typename Scalar>
PatchGrid<Scalar> denoise_patches(const ModelParams<Scalar>& p, const PatchGrid<Scalar>& g,
                                  const TruncationConfig& cfg, const TruncatedEStepOptions& opt = {}) {
  const auto e = truncated_estep(p, g.patches, cfg, opt, /*want_esz=*/true);
  PatchGrid<Scalar> out = g;
  out.patches.Y.noalias() = e.esz * p.W.transpose();
  out.patches.provenance = g.patches.provenance + " denoised";
  return out;
}

template <typename Scalar>
struct DenoiseResult {
  GrayImage<Scalar> image;
  ModelParams<Scalar> params;
  std::vector<EmTrace> trace;
  VectorX<Scalar> sorted_pi;  // descending
};

struct DenoiseOptions {
  int patch = 8;
  TruncatedEmOptions em;
};

/// Learns the model on all noisy patches (homoscedastic noise), then
/// reconstructs and reassembles the image.
template <typename Scalar>
DenoiseResult<Scalar> run_denoise(const GrayImage<Scalar>& noisy, int H, const TruncationConfig& cfg, int iters,
                                  std::uint64_t seed, const DenoiseOptions& opt = {}) {
  const auto grid = extract_patches(noisy, opt.patch);
  cfg.validate(H);
  const auto init = random_initialization(grid.patches, H, NoiseMode::homoscedastic, seed);
  auto em = run_truncated_em(grid.patches, init, cfg, iters, opt.em);
  DenoiseResult<Scalar> out;
  out.image = reassemble(denoise_patches(em.params, grid, cfg, opt.em.estep), noisy.rows(), noisy.cols());
  out.sorted_pi = em.params.pi;
  std::sort(out.sorted_pi.begin(), out.sorted_pi.end(), std::greater<Scalar>());
  out.params = std::move(em.params);
  out.trace = std::move(em.trace);
  return out;
}

}  // namespace gsc

#endif  // GSC_DENOISE_HPP
