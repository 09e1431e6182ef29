#pragma once

// Fitting the hierarchical model and drawing posterior-predictive recovery
// curves for new covariate profiles.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "recovery/curves.hpp"
#include "recovery/dists.hpp"
#include "recovery/model.hpp"
#include "recovery/sampler.hpp"

namespace recovery {

struct FitResult {
  PosteriorSamples samples;
  Hyperparameters hyper;
  std::size_t K = 0;
};

inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream,
                                   std::uint64_t salt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

/// Runs the sampler on the full posterior. Only shared parameters are stored
/// unless `record_patients` is set; R-hat always covers every parameter.
inline FitResult fit_model(const Dataset& data, const Hyperparameters& hyper,
                           SamplerConfig cfg, bool record_patients = false) {
  const HierarchicalPosterior posterior(data, hyper);
  std::vector<std::vector<double>> inits;
  for (std::size_t c = 0; c < cfg.n_chains; ++c) {
    auto rng = derived_rng(cfg.seed, c, 0x1417);
    inits.push_back(posterior.initial_point(rng));
  }
  if (!record_patients) cfg.record_limit = posterior.layout().shared_dimension();
  return {run_mcmc(posterior, inits, cfg), hyper, data.K};
}

/// Shared-parameter draws pooled over chains. Fixed spreads come from the
/// hyperparameters.
inline std::vector<SharedParams> shared_draws(const PosteriorSamples& samples,
                                              std::size_t K, const Hyperparameters& h) {
  auto col = [&](const std::string& n) { return samples.index(n); };
  std::vector<std::size_t> iA, iB, iC;
  for (std::size_t k = 0; k < K; ++k) {
    const std::string idx = "[" + std::to_string(k) + "]";
    iA.push_back(col("b_A" + idx));
    iB.push_back(col("b_B" + idx));
    iC.push_back(col("b_C" + idx));
  }
  const auto opt = [&](const std::optional<double>& fixed, const char* n) {
    return fixed ? ParameterLayout::npos : col(n);
  };
  const std::size_t jA = opt(h.phi_A, "phi_A");
  const std::size_t jB = opt(h.phi_B, "phi_B");
  const std::size_t jC = opt(h.phi_C, "phi_C");
  const std::size_t jt = col("theta"), jp = col("p"), jm = col("phi_M");

  std::vector<SharedParams> out;
  out.reserve(samples.n_chains() * samples.n_draws());
  for (std::size_t c = 0; c < samples.n_chains(); ++c) {
    for (std::size_t d = 0; d < samples.n_draws(); ++d) {
      SharedParams s;
      for (std::size_t k = 0; k < K; ++k) {
        s.b_A.push_back(samples.at(c, d, iA[k]));
        s.b_B.push_back(samples.at(c, d, iB[k]));
        s.b_C.push_back(samples.at(c, d, iC[k]));
      }
      s.phi_A = h.phi_A ? *h.phi_A : samples.at(c, d, jA);
      s.phi_B = h.phi_B ? *h.phi_B : samples.at(c, d, jB);
      s.phi_C = h.phi_C ? *h.phi_C : samples.at(c, d, jC);
      s.theta = samples.at(c, d, jt);
      s.p = samples.at(c, d, jp);
      s.phi_M = samples.at(c, d, jm);
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// One draw of (A, B, C) from the conditional given shared parameters.
template <class Rng>
PatientParams sample_patient(const SharedParams& s, std::span<const double> x,
                             const BiasTerms& z, Rng& rng) {
  PatientParams q;
  q.A = sample_beta(ModeSpreadBeta(mode_A(x, s.b_A, z.z_A), s.phi_A), rng);
  q.B = sample_beta(ModeSpreadBeta(mode_B(x, s.b_B, z.z_B), s.phi_B), rng);
  const double log_m = log_mode_C(x, s.b_C, z.z_C);
  q.C = sample_standard_gamma(1.0 / s.phi_C, rng) *
        std::exp(log_m - std::log(1.0 / s.phi_C - 1.0));
  return q;
}

/// One observation from the mixture likelihood.
template <class Rng>
double sample_observation(double f, const SharedParams& s, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (unif(rng) < s.theta) return unif(rng) < s.p ? 1.0 : 0.0;
  return sample_beta(ModeSpreadBeta(clamp_curve_mode(f), s.phi_M), rng);
}

/// Shared parameters drawn from the prior (fixed spreads respected).
template <class Rng>
SharedParams sample_prior(const Hyperparameters& h, std::size_t K, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto trunc_exp = [&](double rate) {
    // Inverse CDF of Exponential(rate) truncated to (0,1).
    const double u = unif(rng);
    double v = -std::log1p(u * std::expm1(-rate)) / rate;
    return std::clamp(v, 1e-12, 1.0 - 1e-12);
  };
  SharedParams s;
  for (std::size_t k = 0; k < K; ++k) {
    s.b_A.push_back(h.s_A * normal(rng));
    s.b_B.push_back(h.s_B * normal(rng));
    s.b_C.push_back(h.s_C * normal(rng));
  }
  s.phi_A = h.phi_A ? *h.phi_A : trunc_exp(h.lambda_A);
  s.phi_B = h.phi_B ? *h.phi_B : trunc_exp(h.lambda_B);
  s.phi_C = h.phi_C ? *h.phi_C : trunc_exp(h.lambda_C);
  s.theta = std::clamp(unif(rng), 1e-12, 1.0 - 1e-12);
  s.p = std::clamp(unif(rng), 1e-12, 1.0 - 1e-12);
  s.phi_M = trunc_exp(h.lambda_M);
  return s;
}

/// Per-time quantiles of f(t) over posterior-predictive draws.
/// values[t][q] is the q-th requested quantile at the t-th time.
struct CurveBand {
  std::vector<double> times;
  std::vector<double> probs;
  std::vector<std::vector<double>> values;
};

struct PredictiveOptions {
  std::uint64_t seed = 1;
  bool observation_noise = false;  // add the mixture observation layer
};

/// Curves for one covariate profile: each shared draw is paired with one
/// conditional (A, B, C) draw, f(t) = S g(t) is evaluated per draw, and the
/// per-time quantiles are taken. f(0) = S. With observation noise the
/// mixture draw is taken on the scaled value g(t) and then multiplied by S.
inline std::vector<std::vector<double>> predictive_curves(
    std::span<const SharedParams> draws, const BiasTerms& z, std::span<const double> x,
    double S, std::span<const double> times, const PredictiveOptions& opts = {}) {
  if (!(S > 0.0 && S <= 1.0)) throw std::invalid_argument("predictive: S must lie in (0,1]");
  auto rng = derived_rng(opts.seed, 0x9e37, 0x51);
  std::vector<std::vector<double>> curves(draws.size(), std::vector<double>(times.size()));
  for (std::size_t d = 0; d < draws.size(); ++d) {
    const PatientParams q = sample_patient(draws[d], x, z, rng);
    for (std::size_t j = 0; j < times.size(); ++j) {
      const double t = times[j];
      if (t < 0.0) throw std::invalid_argument("predictive: times must be >= 0");
      if (t == 0.0) {
        curves[d][j] = S;
        continue;
      }
      double g = detail::shape_value(q.A, q.B, q.C, t);
      if (opts.observation_noise) g = sample_observation(g, draws[d], rng);
      curves[d][j] = S * g;
    }
  }
  return curves;
}

inline CurveBand curve_band(const std::vector<std::vector<double>>& curves,
                            std::span<const double> times, std::span<const double> probs) {
  if (curves.empty()) throw std::invalid_argument("curve_band: no draws");
  CurveBand band{{times.begin(), times.end()}, {probs.begin(), probs.end()}, {}};
  std::vector<double> column(curves.size());
  for (std::size_t j = 0; j < times.size(); ++j) {
    for (std::size_t d = 0; d < curves.size(); ++d) column[d] = curves[d][j];
    band.values.push_back(quantiles(column, probs));
  }
  return band;
}

inline CurveBand posterior_median_curve(const PosteriorSamples& samples,
                                        const Hyperparameters& hyper, std::size_t K,
                                        std::span<const double> x, double S,
                                        std::span<const double> times,
                                        std::span<const double> probs,
                                        const PredictiveOptions& opts = {}) {
  if (samples.empty()) throw std::invalid_argument("posterior_median_curve: empty samples");
  const auto draws = shared_draws(samples, K, hyper);
  const auto curves = predictive_curves(draws, bias_terms(hyper), x, S, times, opts);
  return curve_band(curves, times, probs);
}

}  // namespace recovery
