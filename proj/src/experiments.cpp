#include "gsc/experiments.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "gsc/denoise.hpp"
#include "gsc/io.hpp"
#include "gsc/parallel.hpp"

#ifndef GSC_VERSION
#define GSC_VERSION "unknown"
#endif

namespace gsc::exp {

using json = nlohmann::json;

std::string version() { return GSC_VERSION; }

std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::bars: return "bars";
    case Experiment::consistency: return "consistency";
    case Experiment::recovery: return "recovery";
    case Experiment::separation: return "separation";
    case Experiment::denoise: return "denoise";
    case Experiment::posterior_histograms: return "posteriors";
  }
  return "bars";
}

Experiment experiment_from_string(const std::string& s) {
  for (auto e : {Experiment::bars, Experiment::consistency, Experiment::recovery, Experiment::separation,
                 Experiment::denoise, Experiment::posterior_histograms})
    if (to_string(e) == s) return e;
  if (s == "posterior_histograms") return Experiment::posterior_histograms;
  throw ConfigError("unknown experiment '" + s + "'");
}

std::string to_string(Engine e) { return e == Engine::exact ? "exact" : "truncated"; }

Engine engine_from_string(const std::string& s) {
  if (s == "exact") return Engine::exact;
  if (s == "truncated") return Engine::truncated;
  throw ConfigError("unknown engine '" + s + "' (expected exact or truncated)");
}

namespace {

std::string slab_to_string(SlabCovariance s) { return s == SlabCovariance::full ? "full" : "diagonal"; }

SlabCovariance slab_from_string(const std::string& s) {
  if (s == "full") return SlabCovariance::full;
  if (s == "diagonal") return SlabCovariance::diagonal;
  throw ConfigError("unknown slab_covariance '" + s + "' (expected full or diagonal)");
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// Writes manifest.json; called once before any work and again at the end.
class Manifest {
 public:
  Manifest(const ExperimentConfig& cfg) : cfg_(cfg), started_(utc_now()) {
    for (int t = 0; t < cfg.trials; ++t) seeds_.push_back(trial_seed(cfg.seed, t));
    write(nullptr);
  }
  void finish(const RunResult& r) { write(&r); }

 private:
  void write(const RunResult* r) const {
    json j;
    j["tool"] = "gsc";
    j["version"] = version();
    j["config"] = json::parse(config_to_json(cfg_));
    j["trial_seeds"] = seeds_;
    j["seed_derivation"] = "trial t: splitmix64(seed, t); data streams 0,1 and init stream 2 of the trial seed";
    j["started_utc"] = started_;
    j["finished_utc"] = r ? json(utc_now()) : json(nullptr);
    json outs = json::array();
    if (r)
      for (const auto& p : r->outputs) outs.push_back(p.filename().string());
    j["outputs"] = outs;
    io::write_text(cfg_.output_dir / "manifest.json", j.dump(2) + "\n");
  }
  ExperimentConfig cfg_;
  std::string started_;
  std::vector<std::uint64_t> seeds_;
};

void finish_metrics(const ExperimentConfig& cfg, RunResult& r) {
  const auto jpath = cfg.output_dir / "metrics.json", cpath = cfg.output_dir / "metrics.csv";
  io::write_metrics_json(jpath, r.metrics);
  io::write_metrics_csv(cpath, r.metrics);
  r.outputs.push_back(jpath);
  r.outputs.push_back(cpath);
}

// Trials run concurrently when there are several; engines then get a single
// worker each. Results are stored by trial index, so the output does not
// depend on the scheduling.
template <typename Fn>
void for_trials(const ExperimentConfig& cfg, int count, Fn&& fn) {
  ExperimentConfig inner = cfg;
  const int outer = count > 1 ? cfg.workers : 1;
  if (outer > 1) inner.workers = 1;
  parallel_for(static_cast<std::size_t>(count), outer, [&](std::size_t i) { fn(static_cast<int>(i), inner); });
}

ModelParamsd init_for(const Datasetd& data, int H, const ExperimentConfig& cfg, std::uint64_t seed) {
  return random_initialization(data, H, cfg.noise_mode, derive_seed(seed, 2));
}

}  // namespace

const MetricReport* RunResult::find(const std::string& name) const {
  for (const auto& m : metrics)
    if (m.name == name) return &m;
  return nullptr;
}

ExperimentConfig ExperimentConfig::defaults(Experiment e) {
  ExperimentConfig c;
  c.experiment = e;
  c.output_dir = fs::path("gsc_out") / to_string(e);
  switch (e) {
    case Experiment::bars:
      c.generator.kind = GeneratorKind::bars;
      c.generator.H = 10;
      c.generator.D = 25;
      c.generator.N = 1000;
      c.truncation = {5, 3, true};
      c.iters = 50;
      break;
    case Experiment::consistency:
      c.generator.kind = GeneratorKind::spike_slab;
      c.generator.H = c.generator.D = 10;
      c.generator.noise_sigma = 1.0;
      c.generator.ortho_perturb_sigma = std::sqrt(2.0);
      c.engine = Engine::exact;
      c.iters = 100;
      c.trials = 5;
      c.n_sweep = {1000, 8000, 64000};
      break;
    case Experiment::recovery:
      c.generator.kind = GeneratorKind::laplace_sc;
      c.generator.H = c.generator.D = 10;
      c.generator.N = 1000;
      c.generator.noise_sigma = 0.0;
      c.truncation = {10, 10, true};
      c.iters = 100;
      c.trials = 5;
      c.perturb_sweep = {0.0, 4.0, 10.0, 20.0};
      break;
    case Experiment::separation:
      c.generator.kind = GeneratorKind::laplace_sc;
      c.generator.H = c.generator.D = 4;
      c.generator.N = 500;
      c.generator.noise_sigma = 0.0;
      c.generator.ortho_perturb_sigma = 0.0;
      c.engine = Engine::exact;
      c.iters = 350;
      c.trials = 10;
      break;
    case Experiment::denoise:
      c.generator.H = 64;
      c.generator.D = 64;
      c.truncation = {10, 8, true};
      c.iters = 65;
      break;
    case Experiment::posterior_histograms:
      c.generator.kind = GeneratorKind::laplace_sc;
      c.generator.H = c.generator.D = 10;
      c.generator.N = 500;
      c.generator.noise_sigma = 0.0;
      c.generator.ortho_perturb_sigma = 0.0;
      c.engine = Engine::exact;
      c.iters = 100;
      break;
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (iters < 1) throw ConfigError("iters must be >= 1");
  if (trials < 1) throw ConfigError("trials must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (alpha_percentile && !(*alpha_percentile >= 0 && *alpha_percentile < 100))
    throw ConfigError("alpha_percentile must lie in [0, 100)");
  const int H = generator.H;
  if (H < 1) throw ConfigError("H must be positive");
  if (engine == Engine::exact && H > kDefaultHExactMax)
    throw ConfigError("engine=exact needs H <= " + std::to_string(kDefaultHExactMax) + ", got H=" + std::to_string(H));
  if (engine == Engine::truncated) truncation.validate(H);
  for (const auto& [hp, g] : truncation_sweep) TruncationConfig{hp, g, truncation.include_singletons}.validate(H);
  switch (experiment) {
    case Experiment::bars:
      if (H % 2 != 0) throw ConfigError("bars needs an even H");
      if (engine != Engine::truncated) throw ConfigError("bars runs the truncated engine");
      break;
    case Experiment::consistency:
    case Experiment::recovery:
      if (generator.D != H) throw ConfigError("Amari scoring needs D == H");
      if (experiment == Experiment::consistency && n_sweep.empty()) throw ConfigError("n_sweep is empty");
      if (experiment == Experiment::recovery && perturb_sweep.empty()) throw ConfigError("perturb_sweep is empty");
      for (int n : n_sweep)
        if (n < 1) throw ConfigError("n_sweep entries must be positive");
      if (experiment == Experiment::consistency && !(generator.noise_sigma > 0))
        throw ConfigError("consistency data needs noise_sigma > 0");
      break;
    case Experiment::separation:
      if (offset < 0) throw ConfigError("offset must be >= 0");
      if (sources_path.empty() && generator.D != H) throw ConfigError("separation needs D == H");
      break;
    case Experiment::denoise:
      if (image_path.empty()) throw ConfigError("denoise needs image_path");
      if (patch < 1) throw ConfigError("patch must be >= 1");
      if (!(image_noise_sigma >= 0)) throw ConfigError("image_noise_sigma must be >= 0");
      if (crop < 0) throw ConfigError("crop must be >= 0");
      break;
    case Experiment::posterior_histograms:
      if (engine != Engine::exact) throw ConfigError("posterior histograms need engine=exact");
      break;
  }
}

ExperimentConfig config_from_json(const std::string& text, ExperimentConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config JSON must be an object");
  try {
    if (j.contains("experiment")) {
      // Switching experiment restarts from that experiment's defaults.
      const auto e = experiment_from_string(j["experiment"].get<std::string>());
      if (e != c.experiment) c = ExperimentConfig::defaults(e);
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "experiment") continue;
      else if (k == "engine") c.engine = engine_from_string(v.get<std::string>());
      else if (k == "iters") c.iters = v.get<int>();
      else if (k == "trials") c.trials = v.get<int>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "output_dir") c.output_dir = v.get<std::string>();
      else if (k == "workers") c.workers = v.get<int>();
      else if (k == "noise_mode") c.noise_mode = noise_mode_from_string(v.get<std::string>());
      else if (k == "slab_covariance") c.slab_covariance = slab_from_string(v.get<std::string>());
      else if (k == "clustering") c.clustering = v.get<bool>();
      else if (k == "alpha_percentile")
        c.alpha_percentile = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      else if (k == "h_prime") c.truncation.h_prime = v.get<int>();
      else if (k == "gamma") c.truncation.gamma = v.get<int>();
      else if (k == "include_singletons") c.truncation.include_singletons = v.get<bool>();
      else if (k == "truncation_sweep") c.truncation_sweep = v.get<std::vector<std::pair<int, int>>>();
      else if (k == "n_sweep") c.n_sweep = v.get<std::vector<int>>();
      else if (k == "compare_laplace") c.compare_laplace = v.get<bool>();
      else if (k == "perturb_sweep") c.perturb_sweep = v.get<std::vector<double>>();
      else if (k == "sources_path") c.sources_path = v.get<std::string>();
      else if (k == "offset") c.offset = v.get<int>();
      else if (k == "image_path") c.image_path = v.get<std::string>();
      else if (k == "image_noise_sigma") c.image_noise_sigma = v.get<double>();
      else if (k == "patch") c.patch = v.get<int>();
      else if (k == "crop") c.crop = v.get<int>();
      else if (k == "generator") {
        for (auto g = v.begin(); g != v.end(); ++g) {
          const std::string& gk = g.key();
          if (gk == "kind") c.generator.kind = generator_kind_from_string(g.value().get<std::string>());
          else if (gk == "H") c.generator.H = g.value().get<int>();
          else if (gk == "D") c.generator.D = g.value().get<int>();
          else if (gk == "N") c.generator.N = g.value().get<int>();
          else if (gk == "noise_sigma") c.generator.noise_sigma = g.value().get<double>();
          else if (gk == "ortho_perturb_sigma") c.generator.ortho_perturb_sigma = g.value().get<double>();
          else throw ConfigError("config JSON: unknown generator key '" + gk + "'");
        }
      } else {
        throw ConfigError("config JSON: unknown key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config JSON: ") + e.what());
  }
  if (c.experiment == Experiment::bars) c.generator.D = (c.generator.H / 2) * (c.generator.H / 2);
  return c;
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["experiment"] = to_string(c.experiment);
  j["engine"] = to_string(c.engine);
  j["iters"] = c.iters;
  j["trials"] = c.trials;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["workers"] = c.workers;
  j["noise_mode"] = to_string(c.noise_mode);
  j["slab_covariance"] = slab_to_string(c.slab_covariance);
  j["clustering"] = c.clustering;
  j["alpha_percentile"] = c.alpha_percentile ? json(*c.alpha_percentile) : json(nullptr);
  j["h_prime"] = c.truncation.h_prime;
  j["gamma"] = c.truncation.gamma;
  j["include_singletons"] = c.truncation.include_singletons;
  j["truncation_sweep"] = c.truncation_sweep;
  j["n_sweep"] = c.n_sweep;
  j["compare_laplace"] = c.compare_laplace;
  j["perturb_sweep"] = c.perturb_sweep;
  j["sources_path"] = c.sources_path.string();
  j["offset"] = c.offset;
  j["image_path"] = c.image_path.string();
  j["image_noise_sigma"] = c.image_noise_sigma;
  j["patch"] = c.patch;
  j["crop"] = c.crop;
  j["generator"] = {{"kind", to_string(c.generator.kind)},
                    {"H", c.generator.H},
                    {"D", c.generator.D},
                    {"N", c.generator.N},
                    {"noise_sigma", c.generator.noise_sigma},
                    {"ortho_perturb_sigma", c.generator.ortho_perturb_sigma}};
  return j.dump(2);
}

EmResult<double> train(const Datasetd& data, const ModelParamsd& init, const ExperimentConfig& cfg) {
  MStepOptions ms;
  ms.psi = cfg.slab_covariance;
  if (cfg.engine == Engine::exact) {
    EmOptions o;
    o.estep.workers = cfg.workers;
    o.mstep = ms;
    return run_exact_em(data, init, cfg.iters, o);
  }
  TruncatedEmOptions o;
  o.estep.workers = cfg.workers;
  o.estep.clustering = cfg.clustering;
  o.estep.alpha_percentile = cfg.alpha_percentile;
  o.mstep = ms;
  return run_truncated_em(data, init, cfg.truncation, cfg.iters, o);
}

int basis_hits(const Eigen::MatrixXd& W, const Eigen::MatrixXd& W_gen, double threshold) {
  if (W.rows() != W_gen.rows()) throw DimensionError("basis_hits: row counts differ");
  const Eigen::MatrixXd A = W.colwise().normalized(), B = W_gen.colwise().normalized();
  const Eigen::MatrixXd cos = (B.transpose() * A).cwiseAbs();
  int hits = 0;
  for (Eigen::Index g = 0; g < cos.rows(); ++g) hits += cos.row(g).maxCoeff() > threshold;
  return hits;
}

BarsTrial bars_trial(const ExperimentConfig& cfg, const TruncationConfig& tcfg, std::uint64_t seed) {
  const auto bars = bars_dataset(cfg.generator.H, cfg.generator.N, seed);
  ExperimentConfig c = cfg;
  c.truncation = tcfg;
  c.engine = Engine::truncated;
  auto res = train(bars.data, init_for(bars.data, cfg.generator.H, c, seed), c);
  BarsTrial out;
  out.mean_q = q_values(res.params, bars.data, tcfg).mean();
  out.hits = basis_hits(res.params.W, bars.truth.W);
  out.params = std::move(res.params);
  return out;
}

double recovery_trial(const ExperimentConfig& cfg, GeneratorKind kind, int N, double perturb, std::uint64_t seed) {
  GeneratorSpec g = cfg.generator;
  g.kind = kind;
  g.N = N;
  g.ortho_perturb_sigma = perturb;
  g.seed = seed;
  const auto gen = generate(g);
  const auto res = train(gen.data, init_for(gen.data, g.H, cfg, seed), cfg);
  return amari_index(res.params.W, gen.W_gen);
}

double separation_trial(const ExperimentConfig& cfg, const Eigen::MatrixXd& sources, std::uint64_t seed) {
  const int H = static_cast<int>(sources.cols());
  const Eigen::MatrixXd W_gen =
      perturbed_orthogonal_basis(H, H, cfg.generator.ortho_perturb_sigma, derive_seed(seed, 0));
  Datasetd data;
  data.Y = sources * W_gen.transpose();
  if (cfg.generator.noise_sigma > 0) {
    std::mt19937_64 rng(derive_seed(seed, 1));
    std::normal_distribution<double> nd(0.0, cfg.generator.noise_sigma);
    for (Eigen::Index i = 0; i < data.Y.size(); ++i) data.Y.data()[i] += nd(rng);
  }
  data.provenance = "separation seed=" + std::to_string(seed);
  const auto res = train(data, init_for(data, H, cfg, seed), cfg);
  return amari_index(res.params.W, W_gen);
}

double random_baseline_amari(int H, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd A(H, H), B(H, H);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = nd(rng);
  for (Eigen::Index i = 0; i < B.size(); ++i) B.data()[i] = nd(rng);
  return amari_index(A, B);
}

RunResult cmd_bars(const ExperimentConfig& cfg) {
  cfg.validate();
  Manifest manifest(cfg);
  RunResult r;
  std::vector<TruncationConfig> configs{cfg.truncation};
  for (const auto& [hp, g] : cfg.truncation_sweep) configs.push_back({hp, g, cfg.truncation.include_singletons});

  const auto csv = cfg.output_dir / "bars.csv";
  std::ofstream out(csv);
  out << "h_prime,gamma,trial,seed,mean_q,kl,hits\n" << std::setprecision(12);
  for (const auto& tc : configs) {
    std::vector<BarsTrial> trials(static_cast<std::size_t>(cfg.trials));
    for_trials(cfg, cfg.trials,
               [&](int t, const ExperimentConfig& c) { trials[t] = bars_trial(c, tc, trial_seed(cfg.seed, t)); });
    std::vector<double> qs, hits;
    for (int t = 0; t < cfg.trials; ++t) {
      const auto& b = trials[t];
      out << tc.h_prime << ',' << tc.gamma << ',' << t << ',' << trial_seed(cfg.seed, t) << ',' << b.mean_q << ','
          << kl_from_q(std::max(b.mean_q, 1e-300)) << ',' << b.hits << '\n';
      qs.push_back(b.mean_q);
      hits.push_back(b.hits);
    }
    const std::string tag = "[h_prime=" + std::to_string(tc.h_prime) + ",gamma=" + std::to_string(tc.gamma) + "]";
    r.metrics.push_back(summarize("mean_q" + tag, qs));
    r.metrics.push_back(summarize("hits" + tag, hits));
    if (&tc == &configs.front()) {
      const auto p = cfg.output_dir / "params_trial0.json";
      io::write_params(p, trials.front().params);
      r.outputs.push_back(p);
    }
  }
  r.outputs.push_back(csv);
  finish_metrics(cfg, r);
  manifest.finish(r);
  return r;
}

namespace {

// Shared by the N sweep and the perturbation sweep.
RunResult amari_sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<double>& values,
                      const std::vector<GeneratorKind>& kinds) {
  Manifest manifest(cfg);
  RunResult r;
  const auto raw = cfg.output_dir / (to_string(cfg.experiment) + ".csv");
  const auto summary = cfg.output_dir / (to_string(cfg.experiment) + "_summary.csv");
  std::ofstream out(raw), sum(summary);
  out << "kind," << axis << ",trial,seed,amari\n" << std::setprecision(12);
  sum << "kind," << axis << ",mean_amari,std_amari,trials\n" << std::setprecision(12);
  for (auto kind : kinds)
    for (double v : values) {
      std::vector<double> a(static_cast<std::size_t>(cfg.trials));
      for_trials(cfg, cfg.trials, [&](int t, const ExperimentConfig& c) {
        const auto s = trial_seed(cfg.seed, t);
        a[t] = axis == "N" ? recovery_trial(c, kind, static_cast<int>(v), c.generator.ortho_perturb_sigma, s)
                           : recovery_trial(c, kind, c.generator.N, v, s);
      });
      for (int t = 0; t < cfg.trials; ++t)
        out << to_string(kind) << ',' << v << ',' << t << ',' << trial_seed(cfg.seed, t) << ',' << a[t] << '\n';
      auto m = summarize("amari[" + to_string(kind) + "," + axis + "=" + fmt(v) + "]", a);
      sum << to_string(kind) << ',' << v << ',' << m.value << ',' << m.std << ',' << m.n_trials << '\n';
      r.metrics.push_back(std::move(m));
    }
  r.outputs.push_back(raw);
  r.outputs.push_back(summary);
  out.close();
  sum.close();
  finish_metrics(cfg, r);
  manifest.finish(r);
  return r;
}

}  // namespace

RunResult cmd_consistency(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<GeneratorKind> kinds{GeneratorKind::spike_slab};
  if (cfg.compare_laplace) kinds.push_back(GeneratorKind::laplace_sc);
  return amari_sweep(cfg, "N", std::vector<double>(cfg.n_sweep.begin(), cfg.n_sweep.end()), kinds);
}

RunResult cmd_recovery(const ExperimentConfig& cfg) {
  cfg.validate();
  return amari_sweep(cfg, "perturb_sigma", cfg.perturb_sweep, {cfg.generator.kind});
}

RunResult cmd_separation(const ExperimentConfig& cfg) {
  cfg.validate();
  Eigen::MatrixXd file_sources;
  if (!cfg.sources_path.empty()) {
    if (!fs::exists(cfg.sources_path)) throw InputError("sources file '" + cfg.sources_path.string() + "' not found");
    file_sources = io::read_csv_matrix(cfg.sources_path);
    if (cfg.offset + cfg.generator.N > file_sources.rows())
      throw ConfigError("offset + N exceeds the " + std::to_string(file_sources.rows()) + " source samples");
  }
  Manifest manifest(cfg);
  RunResult r;
  const int H = file_sources.size() ? static_cast<int>(file_sources.cols()) : cfg.generator.H;
  std::vector<double> a(static_cast<std::size_t>(cfg.trials)), base(a.size());
  for_trials(cfg, cfg.trials, [&](int t, const ExperimentConfig& c) {
    const auto s = trial_seed(cfg.seed, t);
    Eigen::MatrixXd src;
    if (file_sources.size()) {
      src = file_sources.middleRows(cfg.offset, c.generator.N);
    } else {
      sample_sparse_coding(HeavyTail::laplace, Eigen::MatrixXd::Identity(H, H).eval(), 0.0, c.generator.N,
                           derive_seed(s, 1), &src);
    }
    a[t] = separation_trial(c, src, s);
    base[t] = random_baseline_amari(H, derive_seed(s, 3));
  });
  const auto csv = cfg.output_dir / "separation.csv";
  std::ofstream out(csv);
  out << "trial,seed,amari,random_baseline_amari\n" << std::setprecision(12);
  for (int t = 0; t < cfg.trials; ++t)
    out << t << ',' << trial_seed(cfg.seed, t) << ',' << a[t] << ',' << base[t] << '\n';
  out.close();
  r.metrics.push_back(summarize("amari", a));
  r.metrics.push_back(summarize("amari_random_baseline", base));
  r.outputs.push_back(csv);
  finish_metrics(cfg, r);
  manifest.finish(r);
  return r;
}

RunResult cmd_denoise(const ExperimentConfig& cfg) {
  cfg.validate();
  if (!fs::exists(cfg.image_path)) throw InputError("image '" + cfg.image_path.string() + "' not found");
  auto clean = io::read_pgm(cfg.image_path);
  if (cfg.crop > 0) {
    if (cfg.crop > clean.rows() || cfg.crop > clean.cols()) throw ConfigError("crop exceeds the image size");
    clean.pixels = clean.pixels.topLeftCorner(cfg.crop, cfg.crop).eval();
  }
  Manifest manifest(cfg);
  RunResult r;
  TruncatedEmOptions em;
  em.estep.workers = cfg.workers;
  em.estep.clustering = cfg.clustering;
  em.estep.alpha_percentile = cfg.alpha_percentile;
  em.mstep.psi = cfg.slab_covariance;
  DenoiseOptions opt{cfg.patch, em};

  std::vector<double> noisy_psnr, den_psnr;
  for (int t = 0; t < cfg.trials; ++t) {
    const auto s = trial_seed(cfg.seed, t);
    const auto noisy = add_noise(clean, cfg.image_noise_sigma, derive_seed(s, 1));
    auto res = run_denoise(noisy, cfg.generator.H, cfg.truncation, cfg.iters, derive_seed(s, 2), opt);
    noisy_psnr.push_back(psnr(clean.pixels, noisy.pixels));
    den_psnr.push_back(psnr(clean.pixels, res.image.pixels));
    if (t == 0) {
      const auto d = cfg.output_dir;
      io::write_pgm(d / "clean.pgm", clean);
      io::write_pgm(d / "noisy.pgm", noisy);
      io::write_pgm(d / "denoised.pgm", res.image);
      io::write_pgm(d / "bases.pgm", io::basis_grid(res.params.W, cfg.patch));
      io::write_csv_matrix(d / "sorted_pi.csv", res.sorted_pi, {"pi"});
      io::write_trace_csv(d / "trace.csv", res.trace);
      io::write_params(d / "params.json", res.params);
      for (const char* f : {"clean.pgm", "noisy.pgm", "denoised.pgm", "bases.pgm", "sorted_pi.csv", "trace.csv",
                            "params.json"})
        r.outputs.push_back(d / f);
    }
  }
  r.metrics.push_back(summarize("psnr_noisy", noisy_psnr));
  r.metrics.push_back(summarize("psnr_denoised", den_psnr));
  std::vector<double> gain(den_psnr.size());
  for (std::size_t i = 0; i < gain.size(); ++i) gain[i] = den_psnr[i] - noisy_psnr[i];
  r.metrics.push_back(summarize("psnr_gain", gain));
  finish_metrics(cfg, r);
  manifest.finish(r);
  return r;
}

RunResult cmd_posterior_histograms(const ExperimentConfig& cfg) {
  cfg.validate();
  Manifest manifest(cfg);
  RunResult r;
  const int H = cfg.generator.H;
  const auto s = trial_seed(cfg.seed, 0);
  GeneratorSpec g = cfg.generator;
  g.seed = s;
  const auto gen = generate(g);
  const auto res = train(gen.data, init_for(gen.data, H, cfg, s), cfg);

  const auto m = prepare_model(res.params);
  const auto proj = project_data(m, gen.data.Y);
  const auto states = enumerate_states(H);
  const auto factors = factorize_states(m, states);
  const Eigen::MatrixXd LJ =
      log_joint_block<double>(std::span<const StateFactor<double>>(factors), proj.B, proj.yty);
  const int N = gen.data.N();
  Eigen::MatrixXd marg = Eigen::MatrixXd::Zero(N, H), card = Eigen::MatrixXd::Zero(N, H + 1);
  double max_norm_err = 0;
  int concentrated = 0;
  for (int n = 0; n < N; ++n) {
    const double lz = log_sum_exp(Eigen::VectorXd(LJ.row(n).transpose()));
    for (std::size_t i = 0; i < states.size(); ++i) {
      const double w = std::exp(LJ(n, static_cast<Eigen::Index>(i)) - lz);
      const auto act = states[i].active();
      card(n, static_cast<Eigen::Index>(act.size())) += w;
      for (int h : act) marg(n, h) += w;
    }
    max_norm_err = std::max(max_norm_err, std::abs(card.row(n).sum() - 1.0));
    concentrated += card.row(n).head(std::min(H + 1, 5)).sum() >= 0.9;
  }
  std::vector<std::string> mh, ch;
  for (int h = 0; h < H; ++h) mh.push_back("p_s" + std::to_string(h));
  for (int i = 0; i <= H; ++i) ch.push_back("p_card" + std::to_string(i));
  io::write_csv_matrix(cfg.output_dir / "posterior_marginals.csv", marg, mh);
  io::write_csv_matrix(cfg.output_dir / "posterior_cardinality.csv", card, ch);
  io::write_params(cfg.output_dir / "params.json", res.params);
  for (const char* f : {"posterior_marginals.csv", "posterior_cardinality.csv", "params.json"})
    r.outputs.push_back(cfg.output_dir / f);
  r.metrics.push_back({"max_normalization_error", max_norm_err, 1, 0});
  r.metrics.push_back({"fraction_mass90_at_card_le4", double(concentrated) / N, 1, 0});
  finish_metrics(cfg, r);
  manifest.finish(r);
  return r;
}

RunResult run(const ExperimentConfig& cfg) {
  switch (cfg.experiment) {
    case Experiment::bars: return cmd_bars(cfg);
    case Experiment::consistency: return cmd_consistency(cfg);
    case Experiment::recovery: return cmd_recovery(cfg);
    case Experiment::separation: return cmd_separation(cfg);
    case Experiment::denoise: return cmd_denoise(cfg);
    case Experiment::posterior_histograms: return cmd_posterior_histograms(cfg);
  }
  throw ConfigError("unknown experiment");
}

}  // namespace gsc::exp
