#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "recovery/fit.hpp"
#include "recovery/sampler.hpp"

using namespace recovery;

namespace {

SamplerConfig small_config(std::uint64_t seed = 7) {
  SamplerConfig c;
  c.n_chains = 4;
  c.n_warmup = 1000;
  c.n_keep = 4000;
  c.seed = seed;
  return c;
}

std::vector<std::vector<double>> inits(std::size_t chains, std::size_t dim, double spread) {
  std::vector<std::vector<double>> out;
  for (std::size_t c = 0; c < chains; ++c) {
    out.emplace_back(dim, spread * (static_cast<double>(c) - 1.5));
  }
  return out;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

FunctionDensity standard_normal() {
  return FunctionDensity(1, [](std::span<const double> x) { return -0.5 * x[0] * x[0]; });
}

}  // namespace

TEST(Sampler, StandardNormalMoments) {
  const auto d = standard_normal();
  const auto s = run_mcmc(d, inits(4, 1, 1.0), small_config());
  const auto v = s.pooled("x[0]");
  EXPECT_EQ(v.size(), 16000u);
  EXPECT_GT(mean(v), -0.1);
  EXPECT_LT(mean(v), 0.1);
  EXPECT_GT(sd(v), 0.9);
  EXPECT_LT(sd(v), 1.1);
  EXPECT_LT(s.max_r_hat(), 1.05);
  ASSERT_EQ(s.acceptance.size(), 1u);
  EXPECT_GT(s.acceptance[0].rate, 0.3);
  EXPECT_LT(s.acceptance[0].rate, 0.6);
}

TEST(Sampler, BetaThroughLogitWithJacobian) {
  // Beta(1.5, 1.5) on (0,1), sampled as u = logit(v).
  FunctionDensity d(
      1,
      [](std::span<const double> x) {
        const double v = logistic(x[0]);
        return 0.5 * std::log(v) + 0.5 * std::log1p(-v) + detail::log_jacobian_logit(x[0]);
      },
      {"v"}, [](std::size_t, double u) { return logistic(u); });
  const auto s = run_mcmc(d, inits(4, 1, 0.5), small_config(3));
  const auto v = s.pooled("v");
  EXPECT_NEAR(mean(v), 0.5, 0.02);
  // Var of Beta(1.5,1.5) = 1/16.
  EXPECT_NEAR(sd(v), 0.25, 0.02);
  for (double x : v) {
    EXPECT_GT(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
}

TEST(Sampler, SameSeedIsBitwiseIdentical) {
  const auto d = standard_normal();
  auto cfg = small_config(11);
  cfg.n_keep = 500;
  const auto a = run_mcmc(d, inits(4, 1, 1.0), cfg);
  const auto b = run_mcmc(d, inits(4, 1, 1.0), cfg);
  cfg.parallel_chains = false;
  const auto c = run_mcmc(d, inits(4, 1, 1.0), cfg);
  for (std::size_t ch = 0; ch < 4; ++ch) {
    EXPECT_EQ(a.chain_values(ch, "x[0]"), b.chain_values(ch, "x[0]"));
    EXPECT_EQ(a.chain_values(ch, "x[0]"), c.chain_values(ch, "x[0]"));
  }
  cfg.seed = 12;
  const auto e = run_mcmc(d, inits(4, 1, 1.0), cfg);
  EXPECT_NE(a.chain_values(0, "x[0]"), e.chain_values(0, "x[0]"));
}

TEST(Sampler, NonFiniteInitialDensityNamesBlock) {
  FunctionDensity d(1, [](std::span<const double> x) {
    return x[0] > 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  });
  auto cfg = small_config();
  cfg.n_keep = 10;
  try {
    run_mcmc(d, inits(4, 1, 1.0), cfg);
    FAIL() << "expected McmcError";
  } catch (const McmcError& e) {
    EXPECT_NE(std::string(e.what()).find("x"), std::string::npos);
  }
}

TEST(Sampler, ConfigValidation) {
  SamplerConfig c;
  c.n_chains = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.thinning = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  const auto d = standard_normal();
  EXPECT_THROW(run_mcmc(d, inits(3, 1, 1.0), SamplerConfig{}), std::invalid_argument);
}

TEST(Sampler, StreamingRhatMatchesStoredDraws) {
  const auto d = standard_normal();
  auto cfg = small_config(5);
  cfg.n_keep = 800;
  cfg.thinning = 2;
  const auto s = run_mcmc(d, inits(4, 1, 1.0), cfg);
  EXPECT_EQ(s.n_draws(), 800u);
  EXPECT_NEAR(s.r_hat("x[0]"), gelman_rubin(s, "x[0]"), 1e-12);
}

namespace {

// u ~ N(0,1), y | u ~ N(0, e^{2u}); the group move scales y with e^u.
struct Funnel {
  std::vector<Block> blocks_{{"u", {0}}, {"y", {1}}};
  std::vector<std::string> names_{"u", "y"};
  std::vector<std::string> groups_{"scale"};

  std::size_t dimension() const { return 2; }
  const std::vector<Block>& blocks() const { return blocks_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  void constrain(std::span<const double> x, std::span<double> out) const {
    out[0] = x[0];
    out[1] = x[1];
  }
  static double full(std::span<const double> x) {
    return -0.5 * x[0] * x[0] - x[0] - 0.5 * x[1] * x[1] * std::exp(-2.0 * x[0]);
  }
  double block_log_density(std::size_t, std::span<const double> x) const { return full(x); }
  const std::vector<std::string>& group_moves() const { return groups_; }
  double group_log_density(std::size_t, std::span<const double> x) const { return full(x); }
  double apply_group_move(std::size_t, std::span<double> x, double step) const {
    x[0] += step;
    x[1] *= std::exp(step);
    return step;
  }
};

}  // namespace

TEST(Sampler, GroupMovesKeepTarget) {
  static_assert(HasGroupMoves<Funnel>);
  auto cfg = small_config(17);
  cfg.n_keep = 20000;
  const auto s = run_mcmc(Funnel{}, inits(4, 2, 0.5), cfg);
  const auto u = s.pooled("u");
  EXPECT_NEAR(mean(u), 0.0, 0.08);
  EXPECT_NEAR(sd(u), 1.0, 0.08);
  // E[y^2] = E[e^{2u}] = e^2 has a heavy tail; check P(|y| < e^u) = 0.6827 instead.
  const auto y = s.pooled("y");
  std::size_t inside = 0;
  for (std::size_t i = 0; i < y.size(); ++i) inside += std::abs(y[i]) < std::exp(u[i]);
  EXPECT_NEAR(static_cast<double>(inside) / y.size(), 0.6827, 0.02);
  ASSERT_EQ(s.acceptance.size(), 3u);
  EXPECT_EQ(s.acceptance[2].name, "group:scale");
  EXPECT_GT(s.acceptance[2].rate, 0.2);
}

// --- Gelman-Rubin ----------------------------------------------------------

namespace {

PosteriorSamples from_chains(const std::vector<std::vector<double>>& chains) {
  PosteriorSamples s({"v"}, chains.size(), chains.front().size());
  for (std::size_t c = 0; c < chains.size(); ++c) {
    for (std::size_t d = 0; d < chains[c].size(); ++d) s.at(c, d, 0) = chains[c][d];
  }
  return s;
}

}  // namespace

TEST(GelmanRubin, IdenticalChains) {
  std::vector<double> base;
  for (int i = 0; i < 100; ++i) base.push_back(std::sin(0.37 * i));
  const auto s = from_chains({base, base, base, base});
  // B = 0 so R-hat = sqrt((n-1)/n).
  EXPECT_NEAR(gelman_rubin(s, "v"), std::sqrt(99.0 / 100.0), 1e-12);
}

TEST(GelmanRubin, HandComputed) {
  // Two chains of 10: {0..9} and {1..10}. W = 110/12, B/n = 0.5.
  std::vector<double> a, b;
  for (int i = 0; i < 10; ++i) {
    a.push_back(i);
    b.push_back(i + 1);
  }
  const double W = 110.0 / 12.0;
  const double expected = std::sqrt((0.9 * W + 0.5) / W);
  EXPECT_NEAR(gelman_rubin(from_chains({a, b}), "v"), expected, 1e-12);
}

TEST(GelmanRubin, IndependentSameTarget) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> chains(4);
  for (auto& c : chains) {
    for (int i = 0; i < 2000; ++i) c.push_back(n(rng));
  }
  EXPECT_LT(gelman_rubin(from_chains(chains), "v"), 1.05);
}

TEST(GelmanRubin, DisjointConstants) {
  std::vector<std::vector<double>> chains;
  for (int c = 0; c < 4; ++c) chains.emplace_back(50, static_cast<double>(c));
  EXPECT_TRUE(std::isinf(gelman_rubin(from_chains(chains), "v")));
  EXPECT_GT(gelman_rubin(from_chains({std::vector<double>(50, 0.0), std::vector<double>(50, 1.0)}), "v"),
            1.2);
  // Separated but noisy chains.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int c = 0; c < 4; ++c) {
    for (auto& v : chains[c]) v = 10.0 * c + n(rng);
  }
  EXPECT_GT(gelman_rubin(from_chains(chains), "v"), 1.2);
}

TEST(GelmanRubin, ConstantChainsAgree) {
  std::vector<std::vector<double>> chains(3, std::vector<double>(20, 2.5));
  EXPECT_DOUBLE_EQ(gelman_rubin(from_chains(chains), "v"), 1.0);
}

TEST(GelmanRubin, Errors) {
  EXPECT_THROW(gelman_rubin(from_chains({std::vector<double>(50, 1.0)}), "v"),
               std::invalid_argument);
  EXPECT_THROW(gelman_rubin(from_chains({std::vector<double>(5, 1.0), std::vector<double>(5, 1.0)}), "v"),
               std::invalid_argument);
}

// --- Quantiles ---------------------------------------------------------------

TEST(Quantiles, LinearInterpolation) {
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.5), 50.5);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 1.0), 100.0);
  EXPECT_DOUBLE_EQ(quantile_sorted(v, 0.25), 25.75);
  const double qs[] = {0.1, 0.5, 0.9};
  std::vector<double> shuffled(v.rbegin(), v.rend());
  const auto q = quantiles(shuffled, qs);
  EXPECT_DOUBLE_EQ(q[0], 10.9);
  EXPECT_DOUBLE_EQ(q[1], 50.5);
  EXPECT_DOUBLE_EQ(q[2], 90.1);
}

TEST(Quantiles, ConstantAndErrors) {
  std::vector<double> c(17, 3.25);
  for (double q : {0.0, 0.3, 0.5, 1.0}) EXPECT_DOUBLE_EQ(quantile_sorted(c, q), 3.25);
  EXPECT_THROW(quantile_sorted(std::vector<double>{}, 0.5), std::invalid_argument);
  EXPECT_THROW(quantile_sorted(c, 1.5), std::invalid_argument);
}

// --- Predictive bands ----------------------------------------------------------

TEST(Predictive, BandsAreOrderedAndStartAtS) {
  std::mt19937_64 rng(4);
  const Hyperparameters h;
  std::vector<SharedParams> draws;
  for (int i = 0; i < 500; ++i) draws.push_back(sample_prior(h, 2, rng));
  const std::vector<double> x = {0.3, 1.0};
  const std::vector<double> times = {0, 1, 6, 12, 24, 48};
  const std::vector<double> probs = {0.05, 0.25, 0.5, 0.75, 0.95};
  const auto curves = predictive_curves(draws, bias_terms(h), x, 0.8, times);
  const auto band = curve_band(curves, times, probs);
  ASSERT_EQ(band.values.size(), times.size());
  for (double v : band.values[0]) EXPECT_DOUBLE_EQ(v, 0.8);
  for (const auto& row : band.values) {
    for (std::size_t q = 1; q < row.size(); ++q) EXPECT_LE(row[q - 1], row[q]);
    for (double v : row) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 0.8);
    }
  }
  EXPECT_THROW(predictive_curves(draws, bias_terms(h), x, 1.5, times), std::invalid_argument);
}
