// gsc: spike-and-slab sparse coding experiments.
//
//   gsc bars        --h-prime 5 --gamma 3 --iters 50
//   gsc consistency --n-sweep 1000,8000,64000 --trials 5
//   gsc recovery    --perturb-sweep 0,4,10,20
//   gsc separation  [--sources speech4.csv --offset 0] --N 500
//   gsc denoise     --image house.pgm --sigma 25 --H 64
//   gsc posteriors  --H 10 --N 500
//
// Settings are resolved as experiment defaults, then --config JSON, then
// explicit flags. Exit codes: 0 ok, 2 config error, 3 numerical failure,
// 4 missing or unreadable input.

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gsc/experiments.hpp"
#include "gsc/io.hpp"

namespace {

using gsc::exp::Experiment;
using gsc::exp::ExperimentConfig;

struct Flags {
  std::string config, output_dir, engine, alpha, slab, noise_mode, sources, image;
  std::uint64_t seed = 0;
  int workers = 1, h_prime = 0, gamma = 0, iters = 0, trials = 0, H = 0, N = 0, offset = 0, patch = 0, crop = 0;
  double sigma = 0;
  bool no_clustering = false;
  std::vector<int> n_sweep;
  std::vector<double> perturb_sweep;
  std::vector<std::string> sweep_pairs;
};

// True when `name` exists on `app` and was given on the command line.
bool given(const CLI::App& app, const char* name) {
  const auto* opt = app.get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

template <typename T>
void set_if(const CLI::App& app, const char* name, T& dst, const T& value) {
  if (given(app, name)) dst = value;
}

ExperimentConfig resolve(Experiment e, const CLI::App& app, const CLI::App& sub, const Flags& f) {
  ExperimentConfig c = ExperimentConfig::defaults(e);
  if (!f.config.empty()) {
    if (!std::filesystem::exists(f.config)) throw gsc::InputError("config file '" + f.config + "' not found");
    c = gsc::exp::config_from_json(gsc::io::read_text(f.config), c);
    if (c.experiment != e) throw gsc::ConfigError("config file describes a different experiment");
  }
  set_if(app, "--seed", c.seed, f.seed);
  set_if(app, "--workers", c.workers, f.workers);
  set_if(app, "--iters", c.iters, f.iters);
  set_if(app, "--trials", c.trials, f.trials);
  set_if(app, "--h-prime", c.truncation.h_prime, f.h_prime);
  set_if(app, "--gamma", c.truncation.gamma, f.gamma);
  if (given(app, "--output-dir")) c.output_dir = f.output_dir;
  if (given(app, "--engine")) c.engine = gsc::exp::engine_from_string(f.engine);
  if (given(app, "--slab-covariance")) {
    if (f.slab != "full" && f.slab != "diagonal") throw gsc::ConfigError("--slab-covariance: full or diagonal");
    c.slab_covariance = f.slab == "full" ? gsc::SlabCovariance::full : gsc::SlabCovariance::diagonal;
  }
  if (given(app, "--noise-mode")) c.noise_mode = gsc::noise_mode_from_string(f.noise_mode);
  if (given(app, "--alpha-percentile"))
    c.alpha_percentile = f.alpha == "none" ? std::nullopt : std::optional<double>(std::stod(f.alpha));
  if (given(app, "--no-clustering")) c.clustering = false;

  set_if(sub, "--H", c.generator.H, f.H);
  set_if(sub, "--N", c.generator.N, f.N);
  if (given(sub, "--H") && e != Experiment::bars) c.generator.D = f.H;
  if (e == Experiment::bars) c.generator.D = (c.generator.H / 2) * (c.generator.H / 2);
  set_if(sub, "--n-sweep", c.n_sweep, f.n_sweep);
  set_if(sub, "--perturb-sweep", c.perturb_sweep, f.perturb_sweep);
  set_if(sub, "--offset", c.offset, f.offset);
  set_if(sub, "--sigma", c.image_noise_sigma, f.sigma);
  set_if(sub, "--patch", c.patch, f.patch);
  set_if(sub, "--crop", c.crop, f.crop);
  if (given(sub, "--sources")) c.sources_path = f.sources;
  if (given(sub, "--image")) c.image_path = f.image;
  if (given(sub, "--sweep")) {
    c.truncation_sweep.clear();
    for (const auto& s : f.sweep_pairs) {
      const auto colon = s.find(':');
      if (colon == std::string::npos) throw gsc::ConfigError("--sweep entries look like H':gamma, got '" + s + "'");
      c.truncation_sweep.emplace_back(std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1)));
    }
  }
  return c;
}

void print(const gsc::exp::RunResult& r, const ExperimentConfig& c) {
  std::cout << std::setprecision(6);
  for (const auto& m : r.metrics) {
    std::cout << m.name << " = " << m.value;
    if (m.n_trials > 1) std::cout << " +- " << m.std << " (" << m.n_trials << " trials)";
    std::cout << '\n';
  }
  std::cout << "outputs in " << c.output_dir.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spike-and-slab sparse coding: exact and truncated EM experiments"};
  app.set_version_flag("--version", gsc::exp::version());
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "JSON experiment config (applied before flags)");
  app.add_option("--seed", f.seed, "Base seed; trial t uses splitmix64(seed, t)");
  app.add_option("--workers", f.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--output-dir", f.output_dir, "Directory for manifest, CSV and image outputs");
  app.add_option("--engine", f.engine, "exact or truncated")->check(CLI::IsMember({"exact", "truncated"}));
  app.add_option("--h-prime", f.h_prime, "Truncation: number of selected latents H'");
  app.add_option("--gamma", f.gamma, "Truncation: maximal number of active latents");
  app.add_option("--iters", f.iters, "EM iterations")->check(CLI::PositiveNumber);
  app.add_option("--trials", f.trials, "Independent trials")->check(CLI::PositiveNumber);
  app.add_option("--alpha-percentile", f.alpha, "Cluster size cap percentile, or 'none'");
  app.add_flag("--no-clustering", f.no_clustering, "Disable index-set clustering");
  app.add_option("--slab-covariance", f.slab, "full or diagonal slab covariance update");
  app.add_option("--noise-mode", f.noise_mode, "full, diagonal or homoscedastic");

  struct Sub {
    Experiment e;
    CLI::App* app;
  };
  std::vector<Sub> subs;
  auto add = [&](Experiment e, const std::string& name, const std::string& desc) {
    auto* s = app.add_subcommand(name, desc);
    subs.push_back({e, s});
    return s;
  };
  auto* bars = add(Experiment::bars, "bars", "Bars test: Q-values and basis recovery");
  bars->add_option("--H", f.H, "Number of bars (even)");
  bars->add_option("--N", f.N, "Data points");
  bars->add_option("--sweep", f.sweep_pairs, "Extra truncation pairs H':gamma")->delimiter(',');
  auto* cons = add(Experiment::consistency, "consistency", "Amari index over growing N");
  cons->add_option("--H", f.H, "Latents (= observed dimensions)");
  cons->add_option("--n-sweep", f.n_sweep, "Data-set sizes")->delimiter(',');
  auto* rec = add(Experiment::recovery, "recovery", "Amari index over basis perturbation");
  rec->add_option("--H", f.H, "Latents (= observed dimensions)");
  rec->add_option("--N", f.N, "Data points");
  rec->add_option("--perturb-sweep", f.perturb_sweep, "Perturbation standard deviations")->delimiter(',');
  auto* sep = add(Experiment::separation, "separation", "Blind source separation benchmark");
  sep->add_option("--sources", f.sources, "CSV with one source per column (default: synthetic Laplace)");
  sep->add_option("--offset", f.offset, "First sample used from the sources");
  sep->add_option("--N", f.N, "Consecutive samples used");
  sep->add_option("--H", f.H, "Synthetic source count");
  auto* den = add(Experiment::denoise, "denoise", "Patch-based image denoising");
  den->add_option("--image", f.image, "Clean 8-bit PGM image")->required();
  den->add_option("--sigma", f.sigma, "Noise standard deviation");
  den->add_option("--H", f.H, "Dictionary size");
  den->add_option("--patch", f.patch, "Patch side");
  den->add_option("--crop", f.crop, "Use the top-left crop x crop block");
  auto* post = add(Experiment::posterior_histograms, "posteriors", "Posterior mass histograms (exact engine)");
  post->add_option("--H", f.H, "Sources");
  post->add_option("--N", f.N, "Data points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    for (const auto& s : subs) {
      if (!s.app->parsed()) continue;
      const auto cfg = resolve(s.e, app, *s.app, f);
      print(gsc::exp::run(cfg), cfg);
    }
    return 0;
  } catch (const gsc::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 4;
  } catch (const gsc::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const gsc::Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
}
