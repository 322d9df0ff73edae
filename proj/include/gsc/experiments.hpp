#ifndef GSC_EXPERIMENTS_HPP
#define GSC_EXPERIMENTS_HPP

// Benchmark drivers behind the command line tool. Each cmd_* writes a run
// manifest into the output directory before doing any work, then plot-ready
// CSV series and a metrics.json / metrics.csv pair.
//
// Seeding: trial t of a run uses trial_seed(config.seed, t). Inside a trial,
// stream 0 and 1 of that seed drive the data generator (basis, samples) and
// stream 2 drives the parameter initialization.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gsc/datagen.hpp"
#include "gsc/eval.hpp"
#include "gsc/exact_em.hpp"
#include "gsc/truncated_em.hpp"

namespace gsc::exp {

namespace fs = std::filesystem;

enum class Experiment { bars, consistency, recovery, separation, denoise, posterior_histograms };
enum class Engine { exact, truncated };

std::string to_string(Experiment e);
Experiment experiment_from_string(const std::string& s);
std::string to_string(Engine e);
Engine engine_from_string(const std::string& s);

struct ExperimentConfig {
  Experiment experiment = Experiment::bars;
  GeneratorSpec generator;
  Engine engine = Engine::truncated;
  TruncationConfig truncation;
  int iters = 50;
  int trials = 1;
  std::uint64_t seed = 0;
  fs::path output_dir = "gsc_out";
  int workers = 1;

  NoiseMode noise_mode = NoiseMode::homoscedastic;
  SlabCovariance slab_covariance = SlabCovariance::diagonal;
  bool clustering = true;
  std::optional<double> alpha_percentile = 5.0;

  // bars: extra (H', γ) pairs evaluated after `truncation`
  std::vector<std::pair<int, int>> truncation_sweep;
  // consistency: data-set sizes; Laplace data is run alongside when set
  std::vector<int> n_sweep;
  bool compare_laplace = true;
  // recovery: perturbation standard deviations of the orthogonal basis
  std::vector<double> perturb_sweep;
  // separation: N x H source matrix (CSV, one source per column); empty
  // means synthetic Laplace sources
  fs::path sources_path;
  int offset = 0;
  // denoise
  fs::path image_path;
  double image_noise_sigma = 25.0;
  int patch = 8;
  int crop = 0;  // 0 keeps the whole image, otherwise the top-left crop x crop block
  // posteriors: train on the separation-style source data for `iters` first

  /// Protocol defaults of one experiment (sizes, engine, iterations).
  static ExperimentConfig defaults(Experiment e);
  void validate() const;
};

/// Merges a JSON object into `base`. Unknown keys are rejected.
ExperimentConfig config_from_json(const std::string& text, ExperimentConfig base);
std::string config_to_json(const ExperimentConfig& c);

inline std::uint64_t trial_seed(std::uint64_t seed, int trial) {
  return derive_seed(seed, static_cast<std::uint64_t>(trial));
}

struct RunResult {
  std::vector<MetricReport> metrics;
  std::vector<fs::path> outputs;
  const MetricReport* find(const std::string& name) const;
};

/// Trains with the engine, slab covariance and worker settings of `cfg`.
EmResult<double> train(const Datasetd& data, const ModelParamsd& init, const ExperimentConfig& cfg);

struct BarsTrial {
  double mean_q = 0;
  int hits = 0;
  ModelParamsd params;
};
/// Learns the bars data with truncated EM and scores the final parameters.
BarsTrial bars_trial(const ExperimentConfig& cfg, const TruncationConfig& tcfg, std::uint64_t seed);
/// Number of generating columns whose best-matching learned column has
/// |cosine| > threshold.
int basis_hits(const Eigen::MatrixXd& W, const Eigen::MatrixXd& W_gen, double threshold = 0.9);

/// One recovery trial on generated data (spike_slab or laplace_sc kinds);
/// returns the Amari index of the learned basis.
double recovery_trial(const ExperimentConfig& cfg, GeneratorKind kind, int N, double perturb, std::uint64_t seed);

/// Mixes `sources` (N x H) with a random orthonormal basis, learns, scores.
double separation_trial(const ExperimentConfig& cfg, const Eigen::MatrixXd& sources, std::uint64_t seed);
/// Amari index between two independent random Gaussian matrices.
double random_baseline_amari(int H, std::uint64_t seed);

RunResult cmd_bars(const ExperimentConfig& cfg);
RunResult cmd_consistency(const ExperimentConfig& cfg);
RunResult cmd_recovery(const ExperimentConfig& cfg);
RunResult cmd_separation(const ExperimentConfig& cfg);
RunResult cmd_denoise(const ExperimentConfig& cfg);
RunResult cmd_posterior_histograms(const ExperimentConfig& cfg);
RunResult run(const ExperimentConfig& cfg);

std::string version();

}  // namespace gsc::exp

#endif  // GSC_EXPERIMENTS_HPP
