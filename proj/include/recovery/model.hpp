#pragma once

// Hierarchical recovery-curve model.
//
//   A_i ~ beta(logistic(z_A + b_A.x_i), phi_A)
//   B_i ~ beta(logistic(z_B + b_B.x_i), phi_B)
//   C_i ~ gamma(exp(z_C + b_C.x_i), phi_C)
//   y_i(t) ~ theta * bernoulli(p) + (1 - theta) * beta(S_i g(t; A_i,B_i,C_i), phi_M)
//
//   b_* ~ normal(0, s_*)        (s is a standard deviation)
//   phi_* ~ exp(lambda_*) truncated to (0,1)
//   theta, p ~ uniform(0,1)
//
// Bias terms centre the prior on an average shape (mu_A, mu_B, mu_C):
// z_A = logit(mu_A), z_B = logit(mu_B), z_C = log(mu_C).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "recovery/curves.hpp"
#include "recovery/dists.hpp"

namespace recovery {

inline double logistic(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double u) {
  if (!(u > 0.0 && u < 1.0)) {
    throw std::domain_error("logit: argument must lie in (0,1)");
  }
  return std::log(u) - std::log1p(-u);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) noexcept {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

struct Hyperparameters {
  double mu_A = 0.4;
  double mu_B = 0.7;
  double mu_C = 5.0;
  double s_A = 1.0;
  double s_B = 1.0;
  double s_C = 1.0;
  double lambda_A = 10.0;
  double lambda_B = 10.0;
  double lambda_C = 10.0;
  double lambda_M = 10.0;
  // When set, the spread is held fixed instead of sampled.
  std::optional<double> phi_A;
  std::optional<double> phi_B;
  std::optional<double> phi_C;

  void validate() const {
    auto open_unit = [](double v) { return v > 0.0 && v < 1.0; };
    auto require = [](bool ok, const char* what) {
      if (!ok) throw ParameterError(std::string("hyperparameter ") + what);
    };
    require(open_unit(mu_A), "mu_a must lie in (0,1)");
    require(open_unit(mu_B), "mu_b must lie in (0,1)");
    require(mu_C > 0.0 && std::isfinite(mu_C), "mu_c must be > 0");
    require(s_A > 0.0 && s_B > 0.0 && s_C > 0.0, "s_* must be > 0");
    require(lambda_A > 0.0 && lambda_B > 0.0 && lambda_C > 0.0 && lambda_M > 0.0,
            "lambda_* must be > 0");
    require(!phi_A || open_unit(*phi_A), "phi_a must lie in (0,1)");
    require(!phi_B || open_unit(*phi_B), "phi_b must lie in (0,1)");
    require(!phi_C || open_unit(*phi_C), "phi_c must lie in (0,1)");
  }
};

/// Reads `key = value` lines; `#` starts a comment. Keys: mu_a, mu_b, mu_c,
/// s_a, s_b, s_c, lambda_a, lambda_b, lambda_c, lambda_m, phi_a, phi_b, phi_c.
/// Missing keys keep their defaults; absent phi_* keys mean the spread is
/// sampled.
inline Hyperparameters parse_hyperparameters(std::istream& in) {
  Hyperparameters h;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string{};
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string text = trim(line.substr(eq + 1));
    double value = 0.0;
    {
      std::istringstream vs(text);
      vs >> value;
      if (!vs || !(vs >> std::ws).eof()) {
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    ": value for '" + key + "' is not a number");
      }
    }
    if (key == "mu_a") h.mu_A = value;
    else if (key == "mu_b") h.mu_B = value;
    else if (key == "mu_c") h.mu_C = value;
    else if (key == "s_a") h.s_A = value;
    else if (key == "s_b") h.s_B = value;
    else if (key == "s_c") h.s_C = value;
    else if (key == "lambda_a") h.lambda_A = value;
    else if (key == "lambda_b") h.lambda_B = value;
    else if (key == "lambda_c") h.lambda_C = value;
    else if (key == "lambda_m") h.lambda_M = value;
    else if (key == "phi_a") h.phi_A = value;
    else if (key == "phi_b") h.phi_B = value;
    else if (key == "phi_c") h.phi_C = value;
    else {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": unknown key '" + key + "'");
    }
  }
  h.validate();
  return h;
}

inline Hyperparameters load_hyperparameters(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path);
  return parse_hyperparameters(in);
}

// ---------------------------------------------------------------------------
// Links
// ---------------------------------------------------------------------------

struct BiasTerms {
  double z_A = 0.0;
  double z_B = 0.0;
  double z_C = 0.0;
};

inline BiasTerms bias_terms(const Hyperparameters& h) {
  if (!(h.mu_C > 0.0)) throw std::domain_error("bias_terms: mu_C must be > 0");
  return {logit(h.mu_A), logit(h.mu_B), std::log(h.mu_C)};
}

namespace detail {

inline double linear_predictor(std::span<const double> x,
                               std::span<const double> b, double z) {
  if (x.size() != b.size()) {
    throw std::invalid_argument("covariate/coefficient dimension mismatch");
  }
  double eta = z;
  for (std::size_t k = 0; k < x.size(); ++k) eta += x[k] * b[k];
  return eta;
}

// Saturated logistic values are pulled back inside (0,1) so the beta
// conversion stays valid for extreme coefficients.
inline double interior_mode(double m) noexcept {
  constexpr double eps = 1e-12;
  return std::clamp(m, eps, 1.0 - eps);
}

}  // namespace detail

inline double mode_A(std::span<const double> x, std::span<const double> b_A,
                     double z_A) {
  return detail::interior_mode(logistic(detail::linear_predictor(x, b_A, z_A)));
}

inline double mode_B(std::span<const double> x, std::span<const double> b_B,
                     double z_B) {
  return detail::interior_mode(logistic(detail::linear_predictor(x, b_B, z_B)));
}

inline double log_mode_C(std::span<const double> x, std::span<const double> b_C,
                         double z_C) {
  return detail::linear_predictor(x, b_C, z_C);
}

inline double mode_C(std::span<const double> x, std::span<const double> b_C,
                     double z_C) {
  return std::exp(log_mode_C(x, b_C, z_C));
}

// ---------------------------------------------------------------------------
// Parameters and data
// ---------------------------------------------------------------------------

struct SharedParams {
  std::vector<double> b_A, b_B, b_C;
  double phi_A = 0.5;
  double phi_B = 0.5;
  double phi_C = 0.5;
  double theta = 0.5;
  double p = 0.5;
  double phi_M = 0.5;

  std::size_t K() const noexcept { return b_A.size(); }
};

struct PatientParams {
  double A = 0.5;
  double B = 0.5;
  double C = 1.0;
};

struct Observation {
  double t = 0.0;  // months, > 0
  double y = 0.0;  // scaled value in [0,1]
};

struct PatientData {
  std::vector<double> x;  // covariates, length K
  double S = 1.0;         // pre-treatment level, > 0
  std::vector<Observation> obs;
};

struct Dataset {
  std::size_t K = 0;
  std::vector<PatientData> patients;

  std::size_t observation_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : patients) n += p.obs.size();
    return n;
  }

  void validate() const {
    for (std::size_t i = 0; i < patients.size(); ++i) {
      const auto& p = patients[i];
      const std::string where = "patient " + std::to_string(i) + ": ";
      if (p.x.size() != K) throw std::invalid_argument(where + "covariate length != K");
      if (!(p.S > 0.0 && p.S <= 1.0)) throw std::invalid_argument(where + "S must lie in (0,1]");
      for (const auto& o : p.obs) {
        if (!(o.t > 0.0) || !std::isfinite(o.t)) {
          throw std::invalid_argument(where + "observation times must be > 0");
        }
        if (!(o.y >= 0.0 && o.y <= 1.0)) {
          throw std::invalid_argument(where + "observations must lie in [0,1]");
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Densities
// ---------------------------------------------------------------------------

inline constexpr double kCurveClamp = 1e-6;

inline double clamp_curve_mode(double f) noexcept {
  return std::clamp(f, kCurveClamp, 1.0 - kCurveClamp);
}

/// Mixed discrete/continuous observation density: a point mass at {0,1}
/// with weight theta (Bernoulli(p) between the two), and a beta centred at
/// f with spread phi_M otherwise.
inline double log_likelihood_obs(double y, double f, double theta, double p,
                                 double phi_M) {
  if (y == 0.0) return std::log(theta) + std::log1p(-p);
  if (y == 1.0) return std::log(theta) + std::log(p);
  if (!(y > 0.0 && y < 1.0)) return -std::numeric_limits<double>::infinity();
  const ModeSpreadBeta beta(clamp_curve_mode(f), phi_M);
  return std::log1p(-theta) + log_pdf_beta(y, beta);
}

/// Exponential(rate) truncated on the right at 1.
inline double log_truncated_exponential(double x, double rate) {
  if (!(x > 0.0 && x < 1.0)) return -std::numeric_limits<double>::infinity();
  if (rate == 0.0) return 0.0;
  return std::log(rate) - rate * x - std::log(-std::expm1(-rate));
}

inline double log_normal_density(double x, double sd) {
  const double z = x / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double log_prior(const SharedParams& s, const Hyperparameters& h) {
  double lp = 0.0;
  for (double b : s.b_A) lp += log_normal_density(b, h.s_A);
  for (double b : s.b_B) lp += log_normal_density(b, h.s_B);
  for (double b : s.b_C) lp += log_normal_density(b, h.s_C);
  if (!h.phi_A) lp += log_truncated_exponential(s.phi_A, h.lambda_A);
  if (!h.phi_B) lp += log_truncated_exponential(s.phi_B, h.lambda_B);
  if (!h.phi_C) lp += log_truncated_exponential(s.phi_C, h.lambda_C);
  lp += log_truncated_exponential(s.phi_M, h.lambda_M);
  return lp;  // theta, p uniform
}

/// Conditional log density of one patient's (A, B, C) given shared
/// parameters and covariates.
inline double log_patient_prior(const PatientParams& q, std::span<const double> x,
                                 const SharedParams& s, const BiasTerms& z) {
  const double mA = mode_A(x, s.b_A, z.z_A);
  const double mB = mode_B(x, s.b_B, z.z_B);
  const double lmC = log_mode_C(x, s.b_C, z.z_C);
  return log_pdf_beta(q.A, ModeSpreadBeta(mA, s.phi_A)) +
         log_pdf_beta(q.B, ModeSpreadBeta(mB, s.phi_B)) +
         log_pdf_gamma_log_mode(q.C, lmC, s.phi_C);
}

inline double log_patient_likelihood(const PatientParams& q,
                                     const PatientData& d,
                                     const SharedParams& s) {
  double ll = 0.0;
  for (const auto& o : d.obs) {
    const double f = d.S * detail::shape_value(q.A, q.B, q.C, o.t);
    ll += log_likelihood_obs(o.y, f, s.theta, s.p, s.phi_M);
  }
  return ll;
}

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unnormalised joint log density over constrained parameters.
inline double log_posterior(const SharedParams& s,
                            std::span<const PatientParams> patients,
                            const Dataset& data, const Hyperparameters& h) {
  if (patients.size() != data.patients.size()) {
    throw std::invalid_argument("log_posterior: patient count mismatch");
  }
  if (s.b_A.size() != data.K || s.b_B.size() != data.K || s.b_C.size() != data.K) {
    throw std::invalid_argument("log_posterior: coefficient length != K");
  }
  SharedParams eff = s;
  if (h.phi_A) eff.phi_A = *h.phi_A;
  if (h.phi_B) eff.phi_B = *h.phi_B;
  if (h.phi_C) eff.phi_C = *h.phi_C;
  const BiasTerms z = bias_terms(h);
  double lp = log_prior(eff, h);
  for (std::size_t i = 0; i < patients.size(); ++i) {
    lp += log_patient_prior(patients[i], data.patients[i].x, eff, z);
    lp += log_patient_likelihood(patients[i], data.patients[i], eff);
  }
  if (std::isnan(lp) || lp == std::numeric_limits<double>::infinity()) {
    throw ModelError("log_posterior: non-finite value");
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Unconstrained parameterization
// ---------------------------------------------------------------------------

struct ModelState {
  SharedParams shared;
  std::vector<PatientParams> patients;
};

struct UnconstrainedPoint {
  std::vector<double> x;
  double log_jacobian = 0.0;  // log |d constrained / d unconstrained|
};

namespace detail {

inline double log_jacobian_logit(double x) noexcept {
  return -softplus(-x) - softplus(x);
}

inline double to_logit_checked(double u, const char* what) {
  if (!(u > 0.0 && u < 1.0)) {
    throw std::domain_error(std::string("to_unconstrained: ") + what +
                            " must lie in (0,1)");
  }
  return logit(u);
}

}  // namespace detail

/// Layout of the unconstrained vector:
///   b_A[K] b_B[K] b_C[K] phi_A phi_B phi_C theta p phi_M | A B C per patient
/// Fixed spreads are omitted. (0,1) quantities use logit, C uses log.
class ParameterLayout {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  ParameterLayout(std::size_t K, std::size_t n_patients, const Hyperparameters& h)
      : K_(K), n_patients_(n_patients), fixed_A_(h.phi_A), fixed_B_(h.phi_B),
        fixed_C_(h.phi_C) {
    std::size_t at = 3 * K;
    phi_A_ = fixed_A_ ? npos : at++;
    phi_B_ = fixed_B_ ? npos : at++;
    phi_C_ = fixed_C_ ? npos : at++;
    theta_ = at++;
    p_ = at++;
    phi_M_ = at++;
    patients_ = at;
  }

  std::size_t K() const noexcept { return K_; }
  std::size_t n_patients() const noexcept { return n_patients_; }
  std::size_t shared_dimension() const noexcept { return patients_; }
  std::size_t dimension() const noexcept { return patients_ + 3 * n_patients_; }

  std::size_t b_A() const noexcept { return 0; }
  std::size_t b_B() const noexcept { return K_; }
  std::size_t b_C() const noexcept { return 2 * K_; }
  std::size_t phi_A() const noexcept { return phi_A_; }
  std::size_t phi_B() const noexcept { return phi_B_; }
  std::size_t phi_C() const noexcept { return phi_C_; }
  std::size_t theta() const noexcept { return theta_; }
  std::size_t p() const noexcept { return p_; }
  std::size_t phi_M() const noexcept { return phi_M_; }
  std::size_t patient(std::size_t i) const noexcept { return patients_ + 3 * i; }

  SharedParams shared(std::span<const double> x) const {
    SharedParams s;
    s.b_A.assign(x.begin(), x.begin() + K_);
    s.b_B.assign(x.begin() + K_, x.begin() + 2 * K_);
    s.b_C.assign(x.begin() + 2 * K_, x.begin() + 3 * K_);
    s.phi_A = fixed_A_ ? *fixed_A_ : logistic(x[phi_A_]);
    s.phi_B = fixed_B_ ? *fixed_B_ : logistic(x[phi_B_]);
    s.phi_C = fixed_C_ ? *fixed_C_ : logistic(x[phi_C_]);
    s.theta = logistic(x[theta_]);
    s.p = logistic(x[p_]);
    s.phi_M = logistic(x[phi_M_]);
    return s;
  }

  PatientParams patient(std::span<const double> x, std::size_t i) const {
    const std::size_t at = patient(i);
    return {logistic(x[at]), logistic(x[at + 1]), std::exp(x[at + 2])};
  }

  ModelState from_unconstrained(std::span<const double> x) const {
    check_size(x.size());
    ModelState st{shared(x), {}};
    st.patients.reserve(n_patients_);
    for (std::size_t i = 0; i < n_patients_; ++i) st.patients.push_back(patient(x, i));
    return st;
  }

  UnconstrainedPoint to_unconstrained(const SharedParams& s,
                                      std::span<const PatientParams> patients) const {
    if (s.b_A.size() != K_ || s.b_B.size() != K_ || s.b_C.size() != K_) {
      throw std::invalid_argument("to_unconstrained: coefficient length != K");
    }
    if (patients.size() != n_patients_) {
      throw std::invalid_argument("to_unconstrained: patient count mismatch");
    }
    UnconstrainedPoint out;
    out.x.resize(dimension());
    std::copy(s.b_A.begin(), s.b_A.end(), out.x.begin());
    std::copy(s.b_B.begin(), s.b_B.end(), out.x.begin() + K_);
    std::copy(s.b_C.begin(), s.b_C.end(), out.x.begin() + 2 * K_);
    if (!fixed_A_) out.x[phi_A_] = detail::to_logit_checked(s.phi_A, "phi_A");
    if (!fixed_B_) out.x[phi_B_] = detail::to_logit_checked(s.phi_B, "phi_B");
    if (!fixed_C_) out.x[phi_C_] = detail::to_logit_checked(s.phi_C, "phi_C");
    out.x[theta_] = detail::to_logit_checked(s.theta, "theta");
    out.x[p_] = detail::to_logit_checked(s.p, "p");
    out.x[phi_M_] = detail::to_logit_checked(s.phi_M, "phi_M");
    for (std::size_t i = 0; i < n_patients_; ++i) {
      const std::size_t at = patient(i);
      out.x[at] = detail::to_logit_checked(patients[i].A, "A");
      out.x[at + 1] = detail::to_logit_checked(patients[i].B, "B");
      if (!(patients[i].C > 0.0) || !std::isfinite(patients[i].C)) {
        throw std::domain_error("to_unconstrained: C must be > 0");
      }
      out.x[at + 2] = std::log(patients[i].C);
    }
    out.log_jacobian = log_jacobian(out.x);
    return out;
  }

  double log_jacobian(std::span<const double> x) const {
    check_size(x.size());
    double lj = 0.0;
    for (std::size_t k = 3 * K_; k < patients_; ++k) lj += detail::log_jacobian_logit(x[k]);
    for (std::size_t i = 0; i < n_patients_; ++i) {
      const std::size_t at = patient(i);
      lj += detail::log_jacobian_logit(x[at]) + detail::log_jacobian_logit(x[at + 1]) +
            x[at + 2];
    }
    return lj;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> n;
    n.reserve(dimension());
    for (const char* tag : {"b_A", "b_B", "b_C"}) {
      for (std::size_t k = 0; k < K_; ++k) {
        n.push_back(std::string(tag) + "[" + std::to_string(k) + "]");
      }
    }
    if (!fixed_A_) n.emplace_back("phi_A");
    if (!fixed_B_) n.emplace_back("phi_B");
    if (!fixed_C_) n.emplace_back("phi_C");
    n.emplace_back("theta");
    n.emplace_back("p");
    n.emplace_back("phi_M");
    for (std::size_t i = 0; i < n_patients_; ++i) {
      const std::string idx = "[" + std::to_string(i) + "]";
      n.push_back("A" + idx);
      n.push_back("B" + idx);
      n.push_back("C" + idx);
    }
    return n;
  }

 private:
  void check_size(std::size_t n) const {
    if (n != dimension()) {
      throw std::invalid_argument("unconstrained vector has wrong dimension");
    }
  }

  std::size_t K_;
  std::size_t n_patients_;
  std::optional<double> fixed_A_, fixed_B_, fixed_C_;
  std::size_t phi_A_ = npos, phi_B_ = npos, phi_C_ = npos;
  std::size_t theta_ = 0, p_ = 0, phi_M_ = 0, patients_ = 0;
};

// ---------------------------------------------------------------------------
// Blocked posterior for Metropolis-within-Gibbs
// ---------------------------------------------------------------------------

struct Block {
  std::string name;
  std::vector<std::size_t> coords;
};

/// The joint posterior in unconstrained space, split into blocks: one per
/// shared coefficient vector or scalar, and one (A,B,C) triple per patient.
/// block_log_density(b, x) returns every term of the log density that
/// depends on block b, so differences between two points that differ only
/// in block b equal differences of the full log density.
///
/// Immutable after construction; safe to share across chains.
class HierarchicalPosterior {
 public:
  HierarchicalPosterior(Dataset data, Hyperparameters hyper)
      : data_(std::move(data)), hyper_(std::move(hyper)),
        layout_(data_.K, data_.patients.size(), hyper_) {
    hyper_.validate();
    data_.validate();
    bias_ = bias_terms(hyper_);
    prepare();
    build_blocks();
    build_groups();
    names_ = layout_.names();
  }

  const Dataset& data() const noexcept { return data_; }
  const Hyperparameters& hyper() const noexcept { return hyper_; }
  const ParameterLayout& layout() const noexcept { return layout_; }
  const BiasTerms& bias() const noexcept { return bias_; }

  std::size_t dimension() const noexcept { return layout_.dimension(); }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  const std::vector<std::string>& parameter_names() const noexcept { return names_; }

  void constrain(std::span<const double> x, std::span<double> out) const {
    const std::size_t shared_end = layout_.shared_dimension();
    for (std::size_t k = 0; k < 3 * data_.K; ++k) out[k] = x[k];
    for (std::size_t k = 3 * data_.K; k < shared_end; ++k) out[k] = logistic(x[k]);
    for (std::size_t i = 0; i < data_.patients.size(); ++i) {
      const std::size_t at = layout_.patient(i);
      out[at] = logistic(x[at]);
      out[at + 1] = logistic(x[at + 1]);
      out[at + 2] = std::exp(x[at + 2]);
    }
  }

  /// Full log density in unconstrained space, including the Jacobian.
  double log_density(std::span<const double> x) const {
    const ModelState st = layout_.from_unconstrained(x);
    return log_posterior(st.shared, st.patients, data_, hyper_) + layout_.log_jacobian(x);
  }

  double block_log_density(std::size_t block, std::span<const double> x) const {
    const std::size_t n_shared_blocks = shared_blocks_.size();
    if (block >= n_shared_blocks) return patient_term(block - n_shared_blocks, x);
    const SharedParams s = layout_.shared(x);
    switch (shared_blocks_[block]) {
      case SharedBlock::b_A: {
        double lp = 0.0;
        for (double b : s.b_A) lp += log_normal_density(b, hyper_.s_A);
        return lp + sum_A(s, x);
      }
      case SharedBlock::b_B: {
        double lp = 0.0;
        for (double b : s.b_B) lp += log_normal_density(b, hyper_.s_B);
        return lp + sum_B(s, x);
      }
      case SharedBlock::b_C: {
        double lp = 0.0;
        for (double b : s.b_C) lp += log_normal_density(b, hyper_.s_C);
        return lp + sum_C(s, x);
      }
      case SharedBlock::phi_A:
        return log_truncated_exponential(s.phi_A, hyper_.lambda_A) +
               detail::log_jacobian_logit(x[layout_.phi_A()]) + sum_A(s, x);
      case SharedBlock::phi_B:
        return log_truncated_exponential(s.phi_B, hyper_.lambda_B) +
               detail::log_jacobian_logit(x[layout_.phi_B()]) + sum_B(s, x);
      case SharedBlock::phi_C:
        return log_truncated_exponential(s.phi_C, hyper_.lambda_C) +
               detail::log_jacobian_logit(x[layout_.phi_C()]) + sum_C(s, x);
      case SharedBlock::theta:
        return detail::log_jacobian_logit(x[layout_.theta()]) +
               static_cast<double>(n_zero_ + n_one_) * std::log(s.theta) +
               static_cast<double>(n_interior_) * std::log1p(-s.theta);
      case SharedBlock::p:
        return detail::log_jacobian_logit(x[layout_.p()]) +
               static_cast<double>(n_one_) * std::log(s.p) +
               static_cast<double>(n_zero_) * std::log1p(-s.p);
      case SharedBlock::phi_M: {
        double lp = log_truncated_exponential(s.phi_M, hyper_.lambda_M) +
                    detail::log_jacobian_logit(x[layout_.phi_M()]);
        const ObsBeta ob(s.phi_M);
        for (std::size_t i = 0; i < data_.patients.size(); ++i) {
          lp += interior_likelihood(i, layout_.patient(x, i), ob);
        }
        return lp;
      }
    }
    return 0.0;
  }

  /// Group moves on the C family. "b_C[k]" shifts b_C[k] by the step and
  /// every log C_i by x_ik times the step. "phi_C" steps logit(phi_C) and
  /// rescales every log C_i about its log mode by sqrt(phi_C' / phi_C).
  const std::vector<std::string>& group_moves() const noexcept { return group_names_; }

  double group_log_density(std::size_t, std::span<const double> x) const {
    const SharedParams s = layout_.shared(x);
    double lp = 0.0;
    for (double b : s.b_C) lp += log_normal_density(b, hyper_.s_C);
    if (!hyper_.phi_C) {
      lp += log_truncated_exponential(s.phi_C, hyper_.lambda_C) +
            detail::log_jacobian_logit(x[layout_.phi_C()]);
    }
    const ObsBeta ob(s.phi_M);
    for (std::size_t i = 0; i < data_.patients.size(); ++i) {
      const std::size_t at = layout_.patient(i);
      const PatientParams q = layout_.patient(x, i);
      const double lm = log_mode_C(data_.patients[i].x, s.b_C, bias_.z_C);
      lp += x[at + 2] + log_pdf_gamma_log_mode(q.C, lm, s.phi_C) + interior_likelihood(i, q, ob);
    }
    return lp;
  }

  double apply_group_move(std::size_t g, std::span<double> x, double step) const {
    const std::size_t n = data_.patients.size();
    if (g < data_.K) {
      x[layout_.b_C() + g] += step;
      for (std::size_t i = 0; i < n; ++i) x[layout_.patient(i) + 2] += data_.patients[i].x[g] * step;
      return 0.0;
    }
    const std::size_t j = layout_.phi_C();
    // log(phi'/phi) / 2 computed stably on the logit scale.
    const double half_log_ratio =
        0.5 * (-softplus(-(x[j] + step)) + softplus(-x[j]));
    x[j] += step;
    const double r = std::exp(half_log_ratio);
    std::vector<double> b_C(x.begin() + static_cast<std::ptrdiff_t>(layout_.b_C()),
                            x.begin() + static_cast<std::ptrdiff_t>(layout_.b_C() + data_.K));
    for (std::size_t i = 0; i < n; ++i) {
      const double lm = log_mode_C(data_.patients[i].x, b_C, bias_.z_C);
      double& lc = x[layout_.patient(i) + 2];
      lc = lm + r * (lc - lm);
    }
    return static_cast<double>(n) * half_log_ratio;
  }

  /// Draws a starting point: shared coordinates uniform in [-2, 2] on the
  /// unconstrained scale, patients at their covariate-implied modes.
  template <class Rng>
  std::vector<double> initial_point(Rng& rng) const {
    std::uniform_real_distribution<double> unif(-2.0, 2.0);
    std::vector<double> x(dimension());
    for (std::size_t k = 0; k < layout_.shared_dimension(); ++k) x[k] = unif(rng);
    const SharedParams s = layout_.shared(x);
    for (std::size_t i = 0; i < data_.patients.size(); ++i) {
      const auto& px = data_.patients[i].x;
      const std::size_t at = layout_.patient(i);
      x[at] = logit(mode_A(px, s.b_A, bias_.z_A));
      x[at + 1] = logit(mode_B(px, s.b_B, bias_.z_B));
      x[at + 2] = std::clamp(log_mode_C(px, s.b_C, bias_.z_C), -20.0, 20.0);
    }
    return x;
  }

 private:
  enum class SharedBlock { b_A, b_B, b_C, phi_A, phi_B, phi_C, theta, p, phi_M };

  struct InteriorObs {
    double t, log_y, log_1my;
  };

  struct PatientCache {
    std::vector<InteriorObs> interior;
  };

  // Beta(y; mode f, phi_M) pieces that do not depend on f.
  struct ObsBeta {
    explicit ObsBeta(double phi_M)
        : s(1.0 / phi_M - 1.0), lgamma_total(std::lgamma(2.0 + s)) {}
    double s;
    double lgamma_total;
  };

  void prepare() {
    cache_.resize(data_.patients.size());
    for (std::size_t i = 0; i < data_.patients.size(); ++i) {
      for (const auto& o : data_.patients[i].obs) {
        if (o.y == 0.0) ++n_zero_;
        else if (o.y == 1.0) ++n_one_;
        else {
          ++n_interior_;
          cache_[i].interior.push_back({o.t, std::log(o.y), std::log1p(-o.y)});
        }
      }
    }
  }

  void build_blocks() {
    const std::size_t K = data_.K;
    auto coords = [](std::size_t from, std::size_t n) {
      std::vector<std::size_t> c(n);
      for (std::size_t k = 0; k < n; ++k) c[k] = from + k;
      return c;
    };
    auto add = [&](SharedBlock kind, std::string name, std::vector<std::size_t> c) {
      if (c.empty()) return;
      shared_blocks_.push_back(kind);
      blocks_.push_back({std::move(name), std::move(c)});
    };
    add(SharedBlock::b_A, "b_A", coords(layout_.b_A(), K));
    add(SharedBlock::b_B, "b_B", coords(layout_.b_B(), K));
    add(SharedBlock::b_C, "b_C", coords(layout_.b_C(), K));
    if (!hyper_.phi_A) add(SharedBlock::phi_A, "phi_A", {layout_.phi_A()});
    if (!hyper_.phi_B) add(SharedBlock::phi_B, "phi_B", {layout_.phi_B()});
    if (!hyper_.phi_C) add(SharedBlock::phi_C, "phi_C", {layout_.phi_C()});
    add(SharedBlock::theta, "theta", {layout_.theta()});
    add(SharedBlock::p, "p", {layout_.p()});
    add(SharedBlock::phi_M, "phi_M", {layout_.phi_M()});
    for (std::size_t i = 0; i < data_.patients.size(); ++i) {
      blocks_.push_back({"patient[" + std::to_string(i) + "]", coords(layout_.patient(i), 3)});
    }
  }

  void build_groups() {
    if (data_.patients.empty()) return;
    for (std::size_t k = 0; k < data_.K; ++k) group_names_.push_back("b_C[" + std::to_string(k) + "]");
    if (!hyper_.phi_C) group_names_.push_back("phi_C");
  }

  double interior_likelihood(std::size_t i, const PatientParams& q,
                             const ObsBeta& ob) const {
    const double S = data_.patients[i].S;
    double ll = 0.0;
    for (const auto& o : cache_[i].interior) {
      const double f = clamp_curve_mode(S * detail::shape_value(q.A, q.B, q.C, o.t));
      const double a = 1.0 + ob.s * f;
      const double b = 1.0 + ob.s * (1.0 - f);
      ll += ob.lgamma_total - std::lgamma(a) - std::lgamma(b) + (a - 1.0) * o.log_y +
            (b - 1.0) * o.log_1my;
    }
    return ll;
  }

  double sum_A(const SharedParams& s, std::span<const double> x) const {
    double lp = 0.0;
    for (std::size_t i = 0; i < data_.patients.size(); ++i) {
      const double m = mode_A(data_.patients[i].x, s.b_A, bias_.z_A);
      lp += log_pdf_beta(logistic(x[layout_.patient(i)]), ModeSpreadBeta(m, s.phi_A));
    }
    return lp;
  }

  double sum_B(const SharedParams& s, std::span<const double> x) const {
    double lp = 0.0;
    for (std::size_t i = 0; i < data_.patients.size(); ++i) {
      const double m = mode_B(data_.patients[i].x, s.b_B, bias_.z_B);
      lp += log_pdf_beta(logistic(x[layout_.patient(i) + 1]), ModeSpreadBeta(m, s.phi_B));
    }
    return lp;
  }

  double sum_C(const SharedParams& s, std::span<const double> x) const {
    double lp = 0.0;
    for (std::size_t i = 0; i < data_.patients.size(); ++i) {
      const double lm = log_mode_C(data_.patients[i].x, s.b_C, bias_.z_C);
      lp += log_pdf_gamma_log_mode(std::exp(x[layout_.patient(i) + 2]), lm, s.phi_C);
    }
    return lp;
  }

  // Only terms that vary with (A_i, B_i, C_i) are kept: normalising
  // constants of the conditional priors depend on shared parameters alone.
  double patient_term(std::size_t i, std::span<const double> x) const {
    const std::size_t K = data_.K;
    const auto& px = data_.patients[i].x;
    const double phi_A = hyper_.phi_A ? *hyper_.phi_A : logistic(x[layout_.phi_A()]);
    const double phi_B = hyper_.phi_B ? *hyper_.phi_B : logistic(x[layout_.phi_B()]);
    const double phi_C = hyper_.phi_C ? *hyper_.phi_C : logistic(x[layout_.phi_C()]);
    const StandardBeta pa = beta_to_standard(mode_A(px, x.subspan(0, K), bias_.z_A), phi_A);
    const StandardBeta pb = beta_to_standard(mode_B(px, x.subspan(K, K), bias_.z_B), phi_B);
    const double shape = 1.0 / phi_C;
    const double rate =
        std::exp(std::log(shape - 1.0) - log_mode_C(px, x.subspan(2 * K, K), bias_.z_C));

    const std::size_t at = layout_.patient(i);
    const PatientParams q = layout_.patient(x, i);
    // With the logit/log Jacobians folded in, the prior terms become
    // alpha log A + beta log(1-A) and shape log C - rate C.
    const double log_A = -softplus(-x[at]), log_1mA = -softplus(x[at]);
    const double log_B = -softplus(-x[at + 1]), log_1mB = -softplus(x[at + 1]);
    double lp = pa.alpha * log_A + pa.beta * log_1mA + pb.alpha * log_B + pb.beta * log_1mB +
                shape * x[at + 2] - rate * q.C;
    lp += interior_likelihood(i, q, ObsBeta(logistic(x[layout_.phi_M()])));
    return lp;
  }

  Dataset data_;
  Hyperparameters hyper_;
  ParameterLayout layout_;
  BiasTerms bias_;
  std::vector<PatientCache> cache_;
  std::size_t n_zero_ = 0, n_one_ = 0, n_interior_ = 0;
  std::vector<SharedBlock> shared_blocks_;
  std::vector<Block> blocks_;
  std::vector<std::string> names_;
  std::vector<std::string> group_names_;
};

}  // namespace recovery
