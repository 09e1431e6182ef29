#pragma once

// Mode/spread parameterizations of the beta and gamma families.
//
// beta(m, phi)  = Beta(1 + s*m, 1 + s*(1-m)),  s = 1/phi - 1
// gamma(m, phi) = Gamma(shape = 1/phi, rate = (1/phi - 1)/m)
//
// For phi in (0,1) both are unimodal with mode exactly m, and the variance
// grows with phi. Parameters outside the valid ranges are rejected, never
// clamped.

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace recovery {

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct StandardBeta {
  double alpha = 1.0;
  double beta = 1.0;
};

struct StandardGamma {
  double shape = 1.0;
  double rate = 1.0;
};

namespace detail {

inline bool open_unit(double v) noexcept { return v > 0.0 && v < 1.0; }

inline void check_spread(double phi, const char* who) {
  if (!open_unit(phi)) {
    throw ParameterError(std::string(who) + ": spread must lie in (0,1), got " +
                         std::to_string(phi));
  }
}

}  // namespace detail

inline StandardBeta beta_to_standard(double mode, double spread) {
  detail::check_spread(spread, "beta_to_standard");
  if (!detail::open_unit(mode)) {
    throw ParameterError("beta_to_standard: mode must lie in (0,1), got " +
                         std::to_string(mode));
  }
  const double s = 1.0 / spread - 1.0;
  return {1.0 + s * mode, 1.0 + s * (1.0 - mode)};
}

inline StandardGamma gamma_to_standard(double mode, double spread) {
  detail::check_spread(spread, "gamma_to_standard");
  if (!(mode > 0.0) || !std::isfinite(mode)) {
    throw ParameterError("gamma_to_standard: mode must be > 0, got " +
                         std::to_string(mode));
  }
  const double shape = 1.0 / spread;
  return {shape, (shape - 1.0) / mode};
}

class ModeSpreadBeta {
 public:
  ModeSpreadBeta(double mode, double spread)
      : mode_(mode), spread_(spread), std_(beta_to_standard(mode, spread)) {}

  double mode() const noexcept { return mode_; }
  double spread() const noexcept { return spread_; }
  const StandardBeta& standard() const noexcept { return std_; }

 private:
  double mode_;
  double spread_;
  StandardBeta std_;
};

class ModeSpreadGamma {
 public:
  ModeSpreadGamma(double mode, double spread)
      : mode_(mode), spread_(spread), std_(gamma_to_standard(mode, spread)) {}

  double mode() const noexcept { return mode_; }
  double spread() const noexcept { return spread_; }
  const StandardGamma& standard() const noexcept { return std_; }

 private:
  double mode_;
  double spread_;
  StandardGamma std_;
};

// ---------------------------------------------------------------------------
// Densities. Points outside the open support give -inf.
// ---------------------------------------------------------------------------

inline double log_pdf_standard_beta(double x, double alpha, double beta) {
  if (!(x > 0.0 && x < 1.0)) return -std::numeric_limits<double>::infinity();
  return std::lgamma(alpha + beta) - std::lgamma(alpha) - std::lgamma(beta) +
         (alpha - 1.0) * std::log(x) + (beta - 1.0) * std::log1p(-x);
}

inline double log_pdf_beta(double x, const ModeSpreadBeta& d) {
  return log_pdf_standard_beta(x, d.standard().alpha, d.standard().beta);
}

/// Gamma log density with the mode given on the log scale, so callers with
/// an exponential link never materialise exp(z) and overflow.
inline double log_pdf_gamma_log_mode(double x, double log_mode, double spread) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    return -std::numeric_limits<double>::infinity();
  }
  const double shape = 1.0 / spread;
  const double log_rate = std::log(shape - 1.0) - log_mode;
  const double rate = std::exp(log_rate);
  return shape * log_rate - std::lgamma(shape) + (shape - 1.0) * std::log(x) -
         rate * x;
}

inline double log_pdf_gamma(double x, const ModeSpreadGamma& d) {
  return log_pdf_gamma_log_mode(x, std::log(d.mode()), d.spread());
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Marsaglia-Tsang squeeze/rejection sampler for Gamma(shape, 1), valid for
/// shape >= 1. Every mode/spread gamma has shape 1/phi > 1.
template <class Rng>
double sample_standard_gamma(double shape, Rng& rng) {
  if (!(shape >= 1.0)) {
    throw ParameterError("sample_standard_gamma: shape must be >= 1");
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0.0;
    double v = 0.0;
    do {
      x = normal(rng);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = unif(rng);
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) {
      return d * v;
    }
  }
}

template <class Rng>
double sample_beta(const ModeSpreadBeta& d, Rng& rng) {
  const double x = sample_standard_gamma(d.standard().alpha, rng);
  const double y = sample_standard_gamma(d.standard().beta, rng);
  double r = x / (x + y);
  // Keep draws in the open interval so they never masquerade as the
  // boundary masses of the observation mixture.
  if (r <= 0.0) r = std::numeric_limits<double>::min();
  if (r >= 1.0) r = std::nextafter(1.0, 0.0);
  return r;
}

template <class Rng>
double sample_gamma(const ModeSpreadGamma& d, Rng& rng) {
  return sample_standard_gamma(d.standard().shape, rng) / d.standard().rate;
}

}  // namespace recovery
