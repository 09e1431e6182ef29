#pragma once

// Synthetic cohorts drawn from the generative model, noise contamination,
// and the parameter-recovery / noise-robustness experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "recovery/fit.hpp"
#include "recovery/model.hpp"
#include "recovery/sampler.hpp"

namespace recovery {

/// Months at which surveys were requested after treatment.
inline std::vector<double> survey_months() {
  return {1, 2, 4, 8, 12, 18, 24, 30, 36, 42, 48};
}

/// Shared parameters used to generate the reference synthetic cohorts.
inline SharedParams reference_truth(std::size_t K = 1) {
  SharedParams s;
  s.b_A.assign(K, 1.0);
  s.b_B.assign(K, 2.0);
  s.b_C.assign(K, 3.0);
  s.phi_A = s.phi_B = s.phi_C = 0.01;
  s.theta = 0.1;
  s.p = 0.3;
  s.phi_M = 0.01;
  return s;
}

/// mu = (0.4, 0.7, 5), s = 1, lambda = 10; spreads sampled.
inline Hyperparameters reference_hyper() { return Hyperparameters{}; }

struct SimulationSpec {
  SharedParams truth = reference_truth();
  Hyperparameters hyper = reference_hyper();
  std::size_t n_patients = 100;
  std::vector<double> times = survey_months();
  std::uint64_t seed = 1;

  std::size_t K() const noexcept { return truth.b_A.size(); }

  void validate() const {
    if (n_patients == 0) throw std::invalid_argument("simulation: need at least one patient");
    if (times.empty()) throw std::invalid_argument("simulation: need at least one time");
    for (std::size_t j = 0; j < times.size(); ++j) {
      if (!(times[j] > 0.0) || (j > 0 && times[j] <= times[j - 1])) {
        throw std::invalid_argument("simulation: times must be positive and strictly increasing");
      }
    }
    if (truth.b_B.size() != K() || truth.b_C.size() != K()) {
      throw std::invalid_argument("simulation: coefficient vectors differ in length");
    }
    hyper.validate();
  }
};

struct SimulatedDataset {
  Dataset data;
  std::vector<PatientParams> truth;  // one per generated (non-noise) patient
  std::size_t n_noise = 0;           // appended uniform-noise patients
};

/// Covariates are standard normal, S = 1, (A, B, C) come from their
/// conditional mode/spread families, and every y(t) from the mixture.
inline SimulatedDataset simulate_dataset(const SimulationSpec& spec) {
  spec.validate();
  auto rng = derived_rng(spec.seed, 0x5111);
  std::normal_distribution<double> normal(0.0, 1.0);
  const BiasTerms z = bias_terms(spec.hyper);
  SimulatedDataset out;
  out.data.K = spec.K();
  out.data.patients.reserve(spec.n_patients);
  out.truth.reserve(spec.n_patients);
  for (std::size_t i = 0; i < spec.n_patients; ++i) {
    PatientData p;
    p.x.resize(spec.K());
    for (auto& v : p.x) v = normal(rng);
    p.S = 1.0;
    const PatientParams q = sample_patient(spec.truth, p.x, z, rng);
    for (double t : spec.times) {
      const double f = p.S * detail::shape_value(q.A, q.B, q.C, t);
      p.obs.push_back({t, sample_observation(f, spec.truth, rng)});
    }
    out.data.patients.push_back(std::move(p));
    out.truth.push_back(q);
  }
  return out;
}

/// Appends M patients whose every observation is uniform on (0,1), with
/// fresh standard-normal covariates and S = 1.
template <class Rng>
SimulatedDataset contaminate(SimulatedDataset base, std::size_t M,
                             std::span<const double> times, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t i = 0; i < M; ++i) {
    PatientData p;
    p.x.resize(base.data.K);
    for (auto& v : p.x) v = normal(rng);
    p.S = 1.0;
    for (double t : times) p.obs.push_back({t, unif(rng)});
    base.data.patients.push_back(std::move(p));
  }
  base.n_noise += M;
  return base;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Names of the shared parameters sampled under these hyperparameters.
inline std::vector<std::string> shared_parameter_names(std::size_t K, const Hyperparameters& h) {
  const ParameterLayout layout(K, 0, h);
  return layout.names();
}

inline double shared_value(const SharedParams& s, const std::string& name) {
  auto coef = [&](const std::vector<double>& b, std::size_t prefix) {
    const std::size_t k = std::stoul(name.substr(prefix + 1, name.size() - prefix - 2));
    return b.at(k);
  };
  if (name.rfind("b_A[", 0) == 0) return coef(s.b_A, 3);
  if (name.rfind("b_B[", 0) == 0) return coef(s.b_B, 3);
  if (name.rfind("b_C[", 0) == 0) return coef(s.b_C, 3);
  if (name == "phi_A") return s.phi_A;
  if (name == "phi_B") return s.phi_B;
  if (name == "phi_C") return s.phi_C;
  if (name == "theta") return s.theta;
  if (name == "p") return s.p;
  if (name == "phi_M") return s.phi_M;
  throw std::out_of_range("unknown shared parameter '" + name + "'");
}

struct ParameterSummary {
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
};

struct FitSummary {
  std::map<std::string, ParameterSummary> params;
  double r_hat_max = 0.0;
};

inline FitSummary summarize_fit(const PosteriorSamples& samples,
                                std::span<const std::string> names) {
  FitSummary s;
  const double probs[] = {0.25, 0.5, 0.75};
  for (const auto& n : names) {
    const auto q = posterior_quantiles(samples, n, probs);
    s.params[n] = {q[0], q[1], q[2]};
  }
  s.r_hat_max = samples.max_r_hat();
  return s;
}

/// Fits one synthetic dataset and summarises the shared parameters.
using Fitter = std::function<FitSummary(const Dataset&, const Hyperparameters&, std::uint64_t seed)>;

inline Fitter mcmc_fitter(SamplerConfig cfg) {
  return [cfg](const Dataset& data, const Hyperparameters& h, std::uint64_t seed) {
    SamplerConfig c = cfg;
    c.seed = seed;
    const FitResult fit = fit_model(data, h, c);
    const auto names = shared_parameter_names(data.K, h);
    return summarize_fit(fit.samples, names);
  };
}

struct ExperimentRow {
  std::string parameter;
  std::size_t setting = 0;  // N for recovery, M for noise
  std::size_t replication = 0;
  double error = 0.0;       // |median - truth| (recovery) or median - truth (noise)
  double q25_error = 0.0;   // posterior 25th percentile - truth
  double q75_error = 0.0;   // posterior 75th percentile - truth
  double r_hat_max = 0.0;
};

inline constexpr double kRhatThreshold = 1.2;

struct ExperimentTable {
  std::string setting_name;  // "N" or "M"
  std::vector<ExperimentRow> rows;

  std::vector<std::size_t> settings() const {
    std::vector<std::size_t> s;
    for (const auto& r : rows) {
      if (std::find(s.begin(), s.end(), r.setting) == s.end()) s.push_back(r.setting);
    }
    return s;
  }

  /// Mean of `error` over replications for one parameter and setting.
  double mean_error(const std::string& parameter, std::size_t setting) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.parameter == parameter && r.setting == setting) {
        sum += r.error;
        ++n;
      }
    }
    if (n == 0) throw std::out_of_range("no rows for " + parameter);
    return sum / static_cast<double>(n);
  }

  /// Replications (per setting) whose fit failed the R-hat threshold.
  std::vector<std::pair<std::size_t, std::size_t>> unconverged() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& r : rows) {
      const std::pair<std::size_t, std::size_t> key{r.setting, r.replication};
      if (!(r.r_hat_max < kRhatThreshold) &&
          std::find(out.begin(), out.end(), key) == out.end()) {
        out.push_back(key);
      }
    }
    return out;
  }

  void write_csv(std::ostream& os) const {
    os << "parameter," << setting_name << ",replication,error,q25_error,q75_error,r_hat_max,converged\n";
    for (const auto& r : rows) {
      os << r.parameter << ',' << r.setting << ',' << r.replication << ',' << r.error << ','
         << r.q25_error << ',' << r.q75_error << ',' << r.r_hat_max << ','
         << (r.r_hat_max < kRhatThreshold ? 1 : 0) << '\n';
    }
  }

  /// Long format: one (parameter, setting, statistic, value) per line.
  void write_long(std::ostream& os, const std::string& experiment) const {
    os << "experiment,parameter,setting,statistic,value\n";
    std::vector<std::string> params;
    for (const auto& r : rows) {
      if (std::find(params.begin(), params.end(), r.parameter) == params.end()) {
        params.push_back(r.parameter);
      }
    }
    for (const auto& p : params) {
      for (std::size_t s : settings()) {
        os << experiment << ',' << p << ',' << s << ",mean_error," << mean_error(p, s) << '\n';
        for (const auto& r : rows) {
          if (r.parameter != p || r.setting != s) continue;
          os << experiment << ',' << p << ',' << s << ",q25_error," << r.q25_error << '\n';
          os << experiment << ',' << p << ',' << s << ",q75_error," << r.q75_error << '\n';
        }
      }
    }
  }
};

struct RecoveryExperimentConfig {
  SharedParams truth = reference_truth();
  Hyperparameters hyper = reference_hyper();
  std::vector<std::size_t> sizes = {100, 316, 1000};
  std::size_t replications = 5;
  std::vector<double> times = survey_months();
  std::uint64_t seed = 1;
};

/// For every N: simulate `replications` datasets, fit each, and record
/// |posterior median - truth| per shared parameter.
inline ExperimentTable recovery_experiment(const RecoveryExperimentConfig& cfg,
                                           const Fitter& fitter) {
  ExperimentTable table{"N", {}};
  const auto names = shared_parameter_names(cfg.truth.b_A.size(), cfg.hyper);
  for (std::size_t n : cfg.sizes) {
    for (std::size_t rep = 0; rep < cfg.replications; ++rep) {
      SimulationSpec spec{cfg.truth, cfg.hyper, n, cfg.times,
                          cfg.seed * 1000003ULL + n * 101ULL + rep};
      const auto sim = simulate_dataset(spec);
      const FitSummary fit = fitter(sim.data, cfg.hyper, spec.seed + 17);
      for (const auto& name : names) {
        const double truth = shared_value(cfg.truth, name);
        const auto& ps = fit.params.at(name);
        table.rows.push_back({name, n, rep, std::abs(ps.median - truth), ps.q25 - truth,
                              ps.q75 - truth, fit.r_hat_max});
      }
    }
  }
  return table;
}

struct NoiseExperimentConfig {
  SharedParams truth = reference_truth();
  Hyperparameters hyper = reference_hyper();
  std::size_t base_size = 5000;
  std::vector<std::size_t> noise_counts = {0, 200, 1000};
  std::vector<double> times = survey_months();
  std::uint64_t seed = 1;
};

/// One base dataset, contaminated with each M in turn; records the signed
/// error (posterior median - truth) with the posterior 25th/75th percentile
/// errors.
inline ExperimentTable noise_experiment(const NoiseExperimentConfig& cfg, const Fitter& fitter) {
  ExperimentTable table{"M", {}};
  const auto names = shared_parameter_names(cfg.truth.b_A.size(), cfg.hyper);
  SimulationSpec spec{cfg.truth, cfg.hyper, cfg.base_size, cfg.times, cfg.seed};
  const auto base = simulate_dataset(spec);
  for (std::size_t m : cfg.noise_counts) {
    auto rng = derived_rng(cfg.seed, m, 0xbad);
    const auto noisy = contaminate(base, m, cfg.times, rng);
    const FitSummary fit = fitter(noisy.data, cfg.hyper, cfg.seed + 31 + m);
    for (const auto& name : names) {
      const double truth = shared_value(cfg.truth, name);
      const auto& ps = fit.params.at(name);
      table.rows.push_back({name, m, 0, ps.median - truth, ps.q25 - truth, ps.q75 - truth,
                            fit.r_hat_max});
    }
  }
  return table;
}

}  // namespace recovery
