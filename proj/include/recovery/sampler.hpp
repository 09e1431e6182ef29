#pragma once

// Adaptive random-walk Metropolis-within-Gibbs over an unconstrained space.
//
// Each block is visited once per sweep; inside a block every coordinate gets
// its own scalar Gaussian proposal whose scale is tuned by Robbins-Monro
// toward a target acceptance rate during warmup. Adaptation is frozen once
// warmup ends. Chains are independent, each seeded with base_seed + chain.
//
// Targets may also expose group moves: a scalar step that moves many
// coordinates at once through a deterministic map (for example shifting a
// regression coefficient together with every latent it drives). A group
// move is accepted with pi(x') / pi(x) * |dx'/dx|, and its step size is
// tuned like a coordinate's.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "recovery/model.hpp"

namespace recovery {

template <class D>
concept BlockedLogDensity = requires(const D& d, std::span<const double> x,
                                     std::span<double> out, std::size_t b) {
  { d.dimension() } -> std::convertible_to<std::size_t>;
  { d.blocks() } -> std::convertible_to<const std::vector<Block>&>;
  { d.block_log_density(b, x) } -> std::convertible_to<double>;
  { d.parameter_names() } -> std::convertible_to<const std::vector<std::string>&>;
  d.constrain(x, out);
};

/// Optional capability: group_log_density(g, x) must contain every term of
/// the log density touched by move g; apply_group_move(g, x, step) moves x
/// in place and returns log |dx'/dx|. apply_group_move(g, x, -step) must
/// invert apply_group_move(g, x, step).
template <class D>
concept HasGroupMoves = requires(const D& d, std::size_t g, std::span<const double> cx,
                                 std::span<double> x, double step) {
  { d.group_moves() } -> std::convertible_to<const std::vector<std::string>&>;
  { d.group_log_density(g, cx) } -> std::convertible_to<double>;
  { d.apply_group_move(g, x, step) } -> std::convertible_to<double>;
};

class McmcError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SamplerConfig {
  std::size_t n_chains = 4;
  std::size_t n_warmup = 2500;
  std::size_t n_keep = 2500;
  std::size_t thinning = 1;
  std::uint64_t seed = 1;
  double target_acceptance = 0.44;
  double initial_scale = 0.5;
  // Store draws only for the first `record_limit` parameters; R-hat is
  // still tracked for every parameter.
  std::size_t record_limit = std::numeric_limits<std::size_t>::max();
  bool parallel_chains = true;

  void validate() const {
    if (n_chains == 0 || n_keep == 0 || thinning == 0) {
      throw std::invalid_argument("sampler: chain, draw and thinning counts must be positive");
    }
    if (!(target_acceptance > 0.0 && target_acceptance < 1.0)) {
      throw std::invalid_argument("sampler: target acceptance must lie in (0,1)");
    }
    if (!(initial_scale > 0.0)) {
      throw std::invalid_argument("sampler: initial scale must be > 0");
    }
  }
};

struct BlockAcceptance {
  std::string name;
  double rate = 0.0;  // post-warmup, pooled over chains
};

/// Running mean/variance for one chain and parameter.
struct RunningMoments {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void push(double v) noexcept {
    ++n;
    const double d = v - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (v - mean);
  }
  double variance() const noexcept {
    return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
  }
};

/// Between/within-chain potential scale reduction (no chain splitting).
///   W = mean within-chain variance, B/n = variance of chain means,
///   R = sqrt(((n-1)/n W + B/n) / W)
/// Zero within-chain variance gives 1 when the chains agree and +inf
/// otherwise.
inline double gelman_rubin_from_moments(std::span<const RunningMoments> chains) {
  if (chains.size() < 2) throw std::invalid_argument("gelman_rubin: need >= 2 chains");
  const std::size_t n = chains.front().n;
  for (const auto& c : chains) {
    if (c.n != n) throw std::invalid_argument("gelman_rubin: chains differ in length");
  }
  if (n < 2) throw std::invalid_argument("gelman_rubin: need >= 2 draws per chain");
  const double m = static_cast<double>(chains.size());
  const double nn = static_cast<double>(n);
  double grand = 0.0;
  double W = 0.0;
  for (const auto& c : chains) {
    grand += c.mean;
    W += c.variance();
  }
  grand /= m;
  W /= m;
  double between = 0.0;  // B / n
  for (const auto& c : chains) between += (c.mean - grand) * (c.mean - grand);
  between /= (m - 1.0);
  if (W <= 0.0) {
    return between <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  }
  const double var_plus = (nn - 1.0) / nn * W + between;
  return std::sqrt(var_plus / W);
}

class PosteriorSamples {
 public:
  PosteriorSamples() = default;
  PosteriorSamples(std::vector<std::string> names, std::size_t n_chains,
                   std::size_t n_draws)
      : names_(std::move(names)), n_chains_(n_chains), n_draws_(n_draws),
        values_(names_.size() * n_chains * n_draws, 0.0) {
    index_names();
  }

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t n_chains() const noexcept { return n_chains_; }
  std::size_t n_draws() const noexcept { return n_draws_; }
  std::size_t n_params() const noexcept { return names_.size(); }
  bool empty() const noexcept { return n_chains_ * n_draws_ == 0; }

  bool contains(const std::string& name) const { return lookup_.count(name) != 0; }

  std::size_t index(const std::string& name) const {
    const auto it = lookup_.find(name);
    if (it == lookup_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  double& at(std::size_t chain, std::size_t draw, std::size_t param) {
    return values_[(chain * n_draws_ + draw) * names_.size() + param];
  }
  double at(std::size_t chain, std::size_t draw, std::size_t param) const {
    return values_[(chain * n_draws_ + draw) * names_.size() + param];
  }

  std::vector<double> chain_values(std::size_t chain, const std::string& name) const {
    const std::size_t j = index(name);
    std::vector<double> out(n_draws_);
    for (std::size_t d = 0; d < n_draws_; ++d) out[d] = at(chain, d, j);
    return out;
  }

  std::vector<double> pooled(const std::string& name) const {
    const std::size_t j = index(name);
    std::vector<double> out;
    out.reserve(n_chains_ * n_draws_);
    for (std::size_t c = 0; c < n_chains_; ++c) {
      for (std::size_t d = 0; d < n_draws_; ++d) out.push_back(at(c, d, j));
    }
    return out;
  }

  // Diagnostics over every sampled parameter, recorded or not.
  std::vector<std::string> rhat_names;
  std::vector<double> rhat_values;
  std::vector<BlockAcceptance> acceptance;
  std::vector<std::string> warnings;

  double max_r_hat() const {
    double mx = 0.0;
    for (double r : rhat_values) mx = std::max(mx, std::isnan(r) ? std::numeric_limits<double>::infinity() : r);
    return mx;
  }

  double r_hat(const std::string& name) const {
    for (std::size_t j = 0; j < rhat_names.size(); ++j) {
      if (rhat_names[j] == name) return rhat_values[j];
    }
    throw std::out_of_range("no R-hat for '" + name + "'");
  }

 private:
  void index_names() {
    for (std::size_t j = 0; j < names_.size(); ++j) lookup_[names_[j]] = j;
  }

  std::vector<std::string> names_;
  std::size_t n_chains_ = 0;
  std::size_t n_draws_ = 0;
  std::vector<double> values_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

namespace detail {

struct ChainOutput {
  std::vector<double> recorded;  // [draw][param]
  std::vector<RunningMoments> moments;
  std::vector<std::size_t> accepted;
  std::vector<std::size_t> proposed;
};

template <BlockedLogDensity D>
ChainOutput run_chain(const D& density, std::vector<double> x,
                      const SamplerConfig& cfg, std::size_t chain,
                      std::size_t n_record) {
  const auto& blocks = density.blocks();
  const std::size_t dim = density.dimension();
  if (x.size() != dim) {
    throw McmcError("chain " + std::to_string(chain) + ": initial point has wrong dimension");
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const double v = density.block_log_density(b, x);
    if (!std::isfinite(v)) {
      throw McmcError("chain " + std::to_string(chain) +
                      ": non-finite log density at initial point in block '" +
                      blocks[b].name + "'");
    }
  }

  std::mt19937_64 rng(cfg.seed + chain);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> log_scale(dim, std::log(cfg.initial_scale));

  ChainOutput out;
  out.recorded.reserve(cfg.n_keep * n_record);
  out.moments.assign(dim, {});
  out.accepted.assign(blocks.size(), 0);
  out.proposed.assign(blocks.size(), 0);
  std::vector<double> constrained(dim);

  std::size_t n_groups = 0;
  if constexpr (HasGroupMoves<D>) n_groups = density.group_moves().size();
  std::vector<double> group_scale(n_groups, std::log(cfg.initial_scale));
  out.accepted.resize(blocks.size() + n_groups, 0);
  out.proposed.resize(blocks.size() + n_groups, 0);
  std::vector<double> saved;

  const std::size_t total = cfg.n_warmup + cfg.n_keep * cfg.thinning;
  for (std::size_t it = 0; it < total; ++it) {
    const bool warmup = it < cfg.n_warmup;
    const double gain = warmup ? std::pow(static_cast<double>(it) + 1.0, -0.6) : 0.0;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      double current = density.block_log_density(b, x);
      for (std::size_t k : blocks[b].coords) {
        const double old = x[k];
        x[k] = old + std::exp(log_scale[k]) * normal(rng);
        const double proposal = density.block_log_density(b, x);
        const double log_u = std::log(unif(rng));
        const bool accept = !std::isnan(proposal) && log_u < proposal - current;
        if (accept) current = proposal;
        else x[k] = old;
        if (warmup) {
          log_scale[k] += gain * ((accept ? 1.0 : 0.0) - cfg.target_acceptance);
          log_scale[k] = std::clamp(log_scale[k], -20.0, 5.0);
        } else {
          ++out.proposed[b];
          if (accept) ++out.accepted[b];
        }
      }
    }
    if constexpr (HasGroupMoves<D>) {
      for (std::size_t g = 0; g < n_groups; ++g) {
        const double current = density.group_log_density(g, x);
        saved = x;
        const double log_jac =
            density.apply_group_move(g, std::span<double>(x), std::exp(group_scale[g]) * normal(rng));
        const double proposal = density.group_log_density(g, x);
        const double log_u = std::log(unif(rng));
        const bool accept = !std::isnan(proposal) && log_u < proposal - current + log_jac;
        if (!accept) x = saved;
        if (warmup) {
          group_scale[g] += gain * ((accept ? 1.0 : 0.0) - cfg.target_acceptance);
          group_scale[g] = std::clamp(group_scale[g], -20.0, 5.0);
        } else {
          ++out.proposed[blocks.size() + g];
          if (accept) ++out.accepted[blocks.size() + g];
        }
      }
    }
    if (!warmup && (it - cfg.n_warmup + 1) % cfg.thinning == 0) {
      density.constrain(x, constrained);
      out.recorded.insert(out.recorded.end(), constrained.begin(),
                          constrained.begin() + static_cast<std::ptrdiff_t>(n_record));
      for (std::size_t j = 0; j < dim; ++j) out.moments[j].push(constrained[j]);
    }
  }
  return out;
}

}  // namespace detail

/// Runs cfg.n_chains chains from the given initial points (one per chain).
template <BlockedLogDensity D>
PosteriorSamples run_mcmc(const D& density,
                          const std::vector<std::vector<double>>& initial_points,
                          const SamplerConfig& cfg) {
  cfg.validate();
  if (initial_points.size() != cfg.n_chains) {
    throw std::invalid_argument("run_mcmc: need one initial point per chain");
  }
  const auto& names = density.parameter_names();
  const std::size_t dim = density.dimension();
  const std::size_t n_record = std::min(cfg.record_limit, dim);

  std::vector<detail::ChainOutput> outputs(cfg.n_chains);
  if (cfg.parallel_chains && cfg.n_chains > 1) {
    std::vector<std::future<detail::ChainOutput>> jobs;
    for (std::size_t c = 0; c < cfg.n_chains; ++c) {
      jobs.push_back(std::async(std::launch::async, [&, c] {
        return detail::run_chain(density, initial_points[c], cfg, c, n_record);
      }));
    }
    for (std::size_t c = 0; c < cfg.n_chains; ++c) outputs[c] = jobs[c].get();
  } else {
    for (std::size_t c = 0; c < cfg.n_chains; ++c) {
      outputs[c] = detail::run_chain(density, initial_points[c], cfg, c, n_record);
    }
  }

  PosteriorSamples samples(
      std::vector<std::string>(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(n_record)),
      cfg.n_chains, cfg.n_keep);
  for (std::size_t c = 0; c < cfg.n_chains; ++c) {
    for (std::size_t d = 0; d < cfg.n_keep; ++d) {
      for (std::size_t j = 0; j < n_record; ++j) {
        samples.at(c, d, j) = outputs[c].recorded[d * n_record + j];
      }
    }
  }

  if (cfg.n_chains >= 2 && cfg.n_keep >= 2) {
    samples.rhat_names = names;
    samples.rhat_values.resize(dim);
    std::vector<RunningMoments> per_chain(cfg.n_chains);
    for (std::size_t j = 0; j < dim; ++j) {
      for (std::size_t c = 0; c < cfg.n_chains; ++c) per_chain[c] = outputs[c].moments[j];
      samples.rhat_values[j] = gelman_rubin_from_moments(per_chain);
    }
  }

  const auto& blocks = density.blocks();
  std::vector<std::string> move_names;
  for (const auto& b : blocks) move_names.push_back(b.name);
  if constexpr (HasGroupMoves<D>) {
    for (const auto& g : density.group_moves()) move_names.push_back("group:" + g);
  }
  for (std::size_t b = 0; b < move_names.size(); ++b) {
    std::size_t acc = 0, prop = 0;
    for (const auto& o : outputs) {
      acc += o.accepted[b];
      prop += o.proposed[b];
    }
    const double rate = prop ? static_cast<double>(acc) / static_cast<double>(prop) : 0.0;
    samples.acceptance.push_back({move_names[b], rate});
    if (prop > 0 && acc == 0) {
      samples.warnings.push_back("block '" + move_names[b] +
                                 "' accepted no proposals after warmup");
    }
  }
  return samples;
}

/// R-hat of one recorded parameter, computed from the stored draws.
inline double gelman_rubin(const PosteriorSamples& samples, const std::string& name) {
  if (samples.n_chains() < 2) throw std::invalid_argument("gelman_rubin: need >= 2 chains");
  if (samples.n_draws() < 10) throw std::invalid_argument("gelman_rubin: need >= 10 draws");
  std::vector<RunningMoments> m(samples.n_chains());
  const std::size_t j = samples.index(name);
  for (std::size_t c = 0; c < samples.n_chains(); ++c) {
    for (std::size_t d = 0; d < samples.n_draws(); ++d) m[c].push(samples.at(c, d, j));
  }
  return gelman_rubin_from_moments(m);
}

// ---------------------------------------------------------------------------
// Quantiles
// ---------------------------------------------------------------------------

/// Linear interpolation between order statistics: with the values sorted
/// ascending as x[0..n-1], h = (n-1) q and
/// Q(q) = x[floor h] + (h - floor h) (x[floor h + 1] - x[floor h]).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile: empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: q must lie in [0,1]");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline std::vector<double> quantiles(std::vector<double> values,
                                     std::span<const double> qs) {
  std::sort(values.begin(), values.end());
  std::vector<double> out;
  out.reserve(qs.size());
  for (double q : qs) out.push_back(quantile_sorted(values, q));
  return out;
}

inline std::vector<double> posterior_quantiles(const PosteriorSamples& samples,
                                               const std::string& name,
                                               std::span<const double> qs) {
  if (samples.empty()) throw std::invalid_argument("posterior_quantiles: empty samples");
  return quantiles(samples.pooled(name), qs);
}

inline double posterior_median(const PosteriorSamples& samples, const std::string& name) {
  const double half[] = {0.5};
  return posterior_quantiles(samples, name, half).front();
}

// ---------------------------------------------------------------------------
// Adapter for plain functions
// ---------------------------------------------------------------------------

/// Wraps a log density over R^n as a single-block target; `transform` maps
/// unconstrained draws to the recorded scale (identity by default).
class FunctionDensity {
 public:
  using LogDensity = std::function<double(std::span<const double>)>;
  using Transform = std::function<double(std::size_t, double)>;

  FunctionDensity(std::size_t dim, LogDensity f, std::vector<std::string> names = {},
                  Transform transform = {})
      : dim_(dim), f_(std::move(f)), names_(std::move(names)),
        transform_(std::move(transform)) {
    if (names_.empty()) {
      for (std::size_t k = 0; k < dim_; ++k) names_.push_back("x[" + std::to_string(k) + "]");
    }
    if (names_.size() != dim_) throw std::invalid_argument("FunctionDensity: name count != dim");
    Block all{"x", {}};
    for (std::size_t k = 0; k < dim_; ++k) all.coords.push_back(k);
    blocks_.push_back(std::move(all));
  }

  std::size_t dimension() const noexcept { return dim_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  const std::vector<std::string>& parameter_names() const noexcept { return names_; }
  double block_log_density(std::size_t, std::span<const double> x) const { return f_(x); }
  void constrain(std::span<const double> x, std::span<double> out) const {
    for (std::size_t k = 0; k < dim_; ++k) out[k] = transform_ ? transform_(k, x[k]) : x[k];
  }

 private:
  std::size_t dim_;
  LogDensity f_;
  std::vector<std::string> names_;
  Transform transform_;
  std::vector<Block> blocks_;
};

}  // namespace recovery
