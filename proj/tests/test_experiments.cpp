#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "gsc/experiments.hpp"
#include "gsc/io.hpp"

using namespace gsc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("gsc_exp_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(ExperimentConfig, DefaultsValidate) {
  for (auto e : {exp::Experiment::bars, exp::Experiment::consistency, exp::Experiment::recovery,
                 exp::Experiment::separation, exp::Experiment::posterior_histograms}) {
    EXPECT_NO_THROW(exp::ExperimentConfig::defaults(e).validate()) << exp::to_string(e);
  }
  auto d = exp::ExperimentConfig::defaults(exp::Experiment::denoise);
  EXPECT_THROW(d.validate(), ConfigError);  // no image yet
  d.image_path = "x.pgm";
  EXPECT_NO_THROW(d.validate());
}

TEST(ExperimentConfig, JsonRoundTrip) {
  auto c = exp::ExperimentConfig::defaults(exp::Experiment::consistency);
  c.seed = 1234567890123ull;
  c.alpha_percentile.reset();
  c.n_sweep = {10, 20};
  c.generator.noise_sigma = 0.5;
  const auto back = exp::config_from_json(exp::config_to_json(c), exp::ExperimentConfig::defaults(c.experiment));
  EXPECT_EQ(exp::config_to_json(back), exp::config_to_json(c));
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_FALSE(back.alpha_percentile.has_value());
}

TEST(ExperimentConfig, OverridesAndRejections) {
  const auto base = exp::ExperimentConfig::defaults(exp::Experiment::bars);
  const auto c = exp::config_from_json(R"({"h_prime": 6, "gamma": 2, "generator": {"H": 12}})", base);
  EXPECT_EQ(c.truncation.h_prime, 6);
  EXPECT_EQ(c.generator.D, 36);
  EXPECT_THROW(exp::config_from_json(R"({"bogus": 1})", base), ConfigError);
  EXPECT_THROW(exp::config_from_json(R"({"iters": "many"})", base), ConfigError);
  EXPECT_THROW(exp::config_from_json("[1, 2]", base), ConfigError);
  auto bad = base;
  bad.engine = exp::Engine::exact;
  bad.generator.H = 24;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = base;
  bad.truncation = {11, 3, true};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = base;
  bad.trials = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Experiments, TrialSeedsAreDistinct) {
  EXPECT_NE(exp::trial_seed(7, 0), exp::trial_seed(7, 1));
  EXPECT_EQ(exp::trial_seed(7, 2), derive_seed(7, 2));
}

TEST(Experiments, BasisHits) {
  Eigen::MatrixXd G = Eigen::MatrixXd::Identity(4, 3);
  Eigen::MatrixXd W = G;
  W.col(0) *= -3.0;
  W(3, 2) = 5.0;  // third column now mostly points elsewhere
  EXPECT_EQ(exp::basis_hits(W, G), 2);
}

TEST(Experiments, BarsRunWritesManifestAndIsReproducible) {
  auto c = exp::ExperimentConfig::defaults(exp::Experiment::bars);
  c.generator.N = 200;
  c.iters = 4;
  c.trials = 2;
  c.truncation_sweep = {{10, 10}};
  c.output_dir = scratch_dir("bars");
  const auto r1 = exp::cmd_bars(c);
  ASSERT_TRUE(fs::exists(c.output_dir / "manifest.json"));
  const auto manifest = io::read_text(c.output_dir / "manifest.json");
  EXPECT_NE(manifest.find("trial_seeds"), std::string::npos);
  EXPECT_NE(manifest.find("bars.csv"), std::string::npos);
  ASSERT_NE(r1.find("mean_q[h_prime=5,gamma=3]"), nullptr);
  const auto* full = r1.find("mean_q[h_prime=10,gamma=10]");
  ASSERT_NE(full, nullptr);
  EXPECT_NEAR(full->value, 1.0, 1e-12);  // the full state space keeps all mass
  const auto csv1 = io::read_text(c.output_dir / "bars.csv");
  c.workers = 2;
  exp::cmd_bars(c);
  EXPECT_EQ(io::read_text(c.output_dir / "bars.csv"), csv1);
  fs::remove_all(c.output_dir);
}

TEST(Experiments, SeparationBeatsRandomBaseline) {
  auto c = exp::ExperimentConfig::defaults(exp::Experiment::separation);
  c.iters = 60;
  c.trials = 2;
  c.output_dir = scratch_dir("sep");
  const auto r = exp::cmd_separation(c);
  EXPECT_LT(r.find("amari")->value, r.find("amari_random_baseline")->value);
  fs::remove_all(c.output_dir);
}

TEST(Experiments, SeparationReadsSourceFiles) {
  const auto dir = scratch_dir("sepfile");
  Eigen::MatrixXd src;
  sample_sparse_coding(HeavyTail::laplace, Eigen::MatrixXd::Identity(3, 3).eval(), 0.0, 120, 5, &src);
  io::write_csv_matrix(dir / "sources.csv", src, {"a", "b", "c"});
  auto c = exp::ExperimentConfig::defaults(exp::Experiment::separation);
  c.sources_path = dir / "sources.csv";
  c.generator.N = 100;
  c.offset = 10;
  c.iters = 5;
  c.trials = 1;
  c.output_dir = dir / "out";
  EXPECT_NO_THROW(exp::cmd_separation(c));
  c.offset = 30;
  EXPECT_THROW(exp::cmd_separation(c), ConfigError);
  c.sources_path = dir / "missing.csv";
  EXPECT_THROW(exp::cmd_separation(c), InputError);
  fs::remove_all(dir);
}

TEST(Experiments, PosteriorHistogramsNormalized) {
  auto c = exp::ExperimentConfig::defaults(exp::Experiment::posterior_histograms);
  c.generator.H = c.generator.D = 5;
  c.generator.N = 80;
  c.iters = 5;
  c.output_dir = scratch_dir("post");
  const auto r = exp::cmd_posterior_histograms(c);
  EXPECT_LT(r.find("max_normalization_error")->value, 1e-12);
  const auto card = io::read_csv_matrix(c.output_dir / "posterior_cardinality.csv");
  const auto marg = io::read_csv_matrix(c.output_dir / "posterior_marginals.csv");
  ASSERT_EQ(card.cols(), 6);
  // Σ_h p(s_h = 1) equals the expected number of active latents.
  const Eigen::VectorXd expected_active = card * Eigen::VectorXd::LinSpaced(6, 0, 5);
  EXPECT_LT((marg.rowwise().sum() - expected_active).cwiseAbs().maxCoeff(), 1e-9);
  fs::remove_all(c.output_dir);
}

TEST(Experiments, DenoiseSmallCrop) {
  const auto dir = scratch_dir("den");
  auto c = exp::ExperimentConfig::defaults(exp::Experiment::denoise);
  c.image_path = std::string(GSC_TEST_DATA_DIR) + "/astronaut_64.pgm";
  c.crop = 16;
  c.patch = 4;
  c.generator.H = 6;
  c.truncation = {4, 2, true};
  c.iters = 3;
  c.output_dir = dir;
  const auto r = exp::cmd_denoise(c);
  ASSERT_NE(r.find("psnr_gain"), nullptr);
  for (const char* f : {"noisy.pgm", "denoised.pgm", "bases.pgm", "sorted_pi.csv", "trace.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(io::read_pgm(dir / "denoised.pgm").rows(), 16);
  c.image_path = dir / "none.pgm";
  EXPECT_THROW(exp::cmd_denoise(c), InputError);
  fs::remove_all(dir);
}

#ifdef GSC_CLI_PATH
namespace {
int run_cli(const std::string& args) {
  const std::string cmd = std::string(GSC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}
}  // namespace

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("cli");
  EXPECT_EQ(run_cli("--seed 3 bars --N 100 --iters 2 --output-dir " + dir.string()), 0);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_EQ(run_cli("bars --H 9 --output-dir " + dir.string()), 2);
  EXPECT_EQ(run_cli("bars --engine exact --output-dir " + dir.string()), 2);
  EXPECT_EQ(run_cli("nonsense"), 2);
  EXPECT_EQ(run_cli("denoise --image " + (dir / "missing.pgm").string() + " --output-dir " + dir.string()), 4);
  EXPECT_EQ(run_cli("--config " + (dir / "missing.json").string() + " bars"), 4);
  io::write_text(dir / "cfg.json", R"({"experiment": "bars", "iters": 2, "generator": {"N": 50}})");
  EXPECT_EQ(run_cli("--config " + (dir / "cfg.json").string() + " bars --output-dir " + dir.string()), 0);
  fs::remove_all(dir);
}
#endif
