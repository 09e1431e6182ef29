#pragma once

// Cross-validated evaluation: fold splits, absolute-error loss curves,
// baseline predictors, the model predictor, grid search, and the one-sided
// z-test used to compare subgroups.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "recovery/curves.hpp"
#include "recovery/data.hpp"
#include "recovery/fit.hpp"
#include "recovery/model.hpp"
#include "recovery/sampler.hpp"

namespace recovery {

struct Subject {
  PatientRecord record;                // absolute observations
  std::optional<PatientParams> truth;  // known only for synthetic cohorts
};

using Cohort = std::vector<Subject>;

inline Cohort cohort_from_records(const std::vector<PatientRecord>& records,
                                  const std::vector<PatientParams>& truth = {}) {
  if (!truth.empty() && truth.size() != records.size()) {
    throw std::invalid_argument("cohort: truth and records differ in length");
  }
  Cohort out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back({records[i], truth.empty() ? std::nullopt : std::optional(truth[i])});
  }
  return out;
}

inline std::vector<PatientRecord> records_of(std::span<const Subject> subjects) {
  std::vector<PatientRecord> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) out.push_back(s.record);
  return out;
}

/// Maps a subject to absolute predictions at the requested months.
using Predictor = std::function<std::vector<double>(const Subject&, std::span<const int> months)>;
/// Builds a predictor from a training set.
using Trainer = std::function<Predictor(std::span<const Subject> train)>;

struct Method {
  std::string name;
  Trainer train;
};

// ---------------------------------------------------------------------------
// Folds and losses
// ---------------------------------------------------------------------------

/// Shuffles 0..n-1 with the seed and deals them into k folds whose sizes
/// differ by at most one.
inline std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k,
                                                         std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split: need k >= 2");
  if (k > n) throw std::invalid_argument("kfold_split: more folds than patients");
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t i = 0; i < n; ++i) folds[i % k].push_back(ids[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

struct LossCurve {
  std::vector<int> months;
  std::vector<double> mean;     // mean absolute error per month
  std::vector<double> sem;      // standard error of that mean
  std::vector<std::size_t> n;   // test observations per month
  double pooled = 0.0;          // mean over every test observation

  double at(int month) const {
    const auto it = std::find(months.begin(), months.end(), month);
    if (it == months.end()) throw std::out_of_range("loss curve has no month " + std::to_string(month));
    return mean[static_cast<std::size_t>(it - months.begin())];
  }
};

inline LossCurve loss_curve(const std::map<int, std::vector<double>>& errors) {
  LossCurve c;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& [m, e] : errors) {
    const double n = static_cast<double>(e.size());
    const double mu = std::accumulate(e.begin(), e.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : e) ss += (v - mu) * (v - mu);
    c.months.push_back(m);
    c.mean.push_back(mu);
    c.sem.push_back(e.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0);
    c.n.push_back(e.size());
    total += std::accumulate(e.begin(), e.end(), 0.0);
    count += e.size();
  }
  c.pooled = count ? total / static_cast<double>(count) : 0.0;
  return c;
}

/// Out-of-fold predictions: entry i holds subject i's predictions at its own
/// observed months, from a predictor trained without i's fold.
inline std::vector<std::vector<double>> cross_validated_predictions(
    const Trainer& trainer, const std::vector<std::vector<std::size_t>>& folds,
    const Cohort& cohort) {
  std::vector<std::vector<double>> out(cohort.size());
  std::vector<char> in_fold(cohort.size());
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::fill(in_fold.begin(), in_fold.end(), 0);
    for (std::size_t i : folds[f]) in_fold.at(i) = 1;
    Cohort train;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      if (!in_fold[i]) train.push_back(cohort[i]);
    }
    try {
      const Predictor predict = trainer(train);
      for (std::size_t i : folds[f]) {
        std::vector<int> months;
        for (const auto& [m, v] : cohort[i].record.obs) months.push_back(m);
        out[i] = predict(cohort[i], months);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("fold " + std::to_string(f) + ": " + e.what());
    }
  }
  return out;
}

/// Pools per-observation absolute errors over the test folds.
inline LossCurve evaluate_model(const Trainer& trainer,
                                const std::vector<std::vector<std::size_t>>& folds,
                                const Cohort& cohort) {
  const auto pred = cross_validated_predictions(trainer, folds, cohort);
  std::map<int, std::vector<double>> errors;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    std::size_t j = 0;
    for (const auto& [m, v] : cohort[i].record.obs) errors[m].push_back(std::abs(pred[i].at(j++) - v));
  }
  return loss_curve(errors);
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> lookup_months(const std::map<int, double>& table, double scale,
                                         std::span<const int> months) {
  std::vector<double> out;
  for (int m : months) {
    const auto it = table.find(m);
    if (it == table.end()) {
      throw std::invalid_argument("timepoint " + std::to_string(m) + " absent from training data");
    }
    out.push_back(scale * it->second);
  }
  return out;
}

// Per-month means of absolute (scaled = false) or clipped scaled values.
inline std::map<int, double> monthly_means(std::span<const Subject> train, bool scaled) {
  std::map<int, std::pair<double, std::size_t>> acc;
  for (const auto& s : train) {
    if (scaled) {
      for (const auto& o : scaled_observations(s.record).obs) {
        auto& a = acc[static_cast<int>(o.t)];
        a.first += o.y;
        ++a.second;
      }
    } else {
      for (const auto& [m, v] : s.record.obs) {
        auto& a = acc[m];
        a.first += v;
        ++a.second;
      }
    }
  }
  std::map<int, double> out;
  for (const auto& [m, a] : acc) out[m] = a.first / static_cast<double>(a.second);
  return out;
}

inline double median_of(std::vector<double> v) {
  const double half[] = {0.5};
  return quantiles(std::move(v), half).front();
}

}  // namespace detail

/// Per-month training mean of the absolute values.
inline Trainer average_value_trainer() {
  return [](std::span<const Subject> train) -> Predictor {
    auto means = detail::monthly_means(train, false);
    return [means](const Subject&, std::span<const int> months) {
      return detail::lookup_months(means, 1.0, months);
    };
  };
}

/// Per-month training mean of the scaled values, times the subject's S.
inline Trainer average_scaled_trainer() {
  return [](std::span<const Subject> train) -> Predictor {
    auto means = detail::monthly_means(train, true);
    return [means](const Subject& s, std::span<const int> months) {
      return detail::lookup_months(means, s.record.S, months);
    };
  };
}

struct LogisticFit {
  Eigen::VectorXd b;
  double sse = 0.0;
  bool ridge = false;  // the normal equations needed the ridge fallback
};

/// Minimises sum (y - logistic(x b))^2 by damped Gauss-Newton from several
/// starts, with coefficients kept in [-bound, bound]. A rank-deficient
/// design falls back to a 1e-6 ridge on the normal equations.
inline LogisticFit fit_logistic_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                              double bound = 20.0) {
  const Eigen::Index n = X.rows(), k = X.cols();
  if (n == 0 || k == 0) throw std::invalid_argument("logistic fit: empty design");
  constexpr double kRidge = 1e-6;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(X);
  const bool rank_deficient = lu.rank() < k;

  auto sse = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = X * b;
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double r = y[i] - logistic(eta[i]);
      s += r * r;
    }
    return s;
  };

  // Starts: zero, the mean through the link on every column that is
  // constant, and a clipped linear-probability solve on the logit scale.
  std::vector<Eigen::VectorXd> starts;
  starts.push_back(Eigen::VectorXd::Zero(k));
  const double ybar = std::clamp(y.mean(), 1e-3, 1.0 - 1e-3);
  {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
    for (Eigen::Index j = 0; j < k; ++j) {
      if ((X.col(j).array() == 1.0).all()) {
        b[j] = logit(ybar);
        break;
      }
    }
    starts.push_back(b);
  }
  {
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = logit(std::clamp(y[i], 1e-3, 1.0 - 1e-3));
    Eigen::MatrixXd A = X.transpose() * X;
    A.diagonal().array() += kRidge;
    starts.push_back(A.ldlt().solve(X.transpose() * z).cwiseMax(-bound).cwiseMin(bound));
  }

  LogisticFit best;
  best.sse = std::numeric_limits<double>::infinity();
  for (auto b : starts) {
    double current = sse(b);
    double damping = 1e-3;
    for (int it = 0; it < 200; ++it) {
      const Eigen::VectorXd eta = X * b;
      Eigen::VectorXd r(n);
      Eigen::MatrixXd J(n, k);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = logistic(eta[i]);
        r[i] = y[i] - mu;
        J.row(i) = mu * (1.0 - mu) * X.row(i);
      }
      const Eigen::MatrixXd JtJ = J.transpose() * J;
      const Eigen::VectorXd g = J.transpose() * r;
      bool improved = false;
      while (damping < 1e12) {
        Eigen::MatrixXd A = JtJ;
        A.diagonal().array() += damping * (1.0 + JtJ.diagonal().array());
        if (rank_deficient) A.diagonal().array() += kRidge;
        const Eigen::VectorXd step = A.ldlt().solve(g);
        const Eigen::VectorXd cand = (b + step).cwiseMax(-bound).cwiseMin(bound);
        const double s = sse(cand);
        if (s < current) {
          const double gain = current - s;
          b = cand;
          current = s;
          damping = std::max(damping * 0.3, 1e-12);
          improved = true;
          if (gain < 1e-14 * (1.0 + current)) it = 200;
          break;
        }
        damping *= 10.0;
      }
      if (!improved) break;
    }
    if (current < best.sse) best = {b, current, rank_deficient};
  }
  return best;
}

/// Separate logistic-link least-squares regressions per month on the
/// encoded class features. The scaled variant regresses y / S and
/// multiplies its prediction by the subject's S.
inline Trainer timewise_regression_trainer(bool scaled) {
  return [scaled](std::span<const Subject> train) -> Predictor {
    const FeatureSpec spec = fit_feature_spec(records_of(train));
    std::map<int, std::vector<std::pair<std::vector<double>, double>>> rows;
    for (const auto& s : train) {
      const auto x = encode_features(s.record, spec);
      if (scaled) {
        for (const auto& o : scaled_observations(s.record).obs) rows[static_cast<int>(o.t)].push_back({x, o.y});
      } else {
        for (const auto& [m, v] : s.record.obs) rows[m].push_back({x, v});
      }
    }
    auto coef = std::make_shared<std::map<int, Eigen::VectorXd>>();
    for (const auto& [m, data] : rows) {
      Eigen::MatrixXd X(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(kFeatures));
      Eigen::VectorXd y(static_cast<Eigen::Index>(data.size()));
      for (std::size_t i = 0; i < data.size(); ++i) {
        for (std::size_t j = 0; j < kFeatures; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data[i].first[j];
        y[static_cast<Eigen::Index>(i)] = data[i].second;
      }
      (*coef)[m] = fit_logistic_least_squares(X, y).b;
    }
    return [coef, spec, scaled](const Subject& s, std::span<const int> months) {
      const auto x = encode_features(s.record, spec);
      const Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
      std::vector<double> out;
      for (int m : months) {
        const auto it = coef->find(m);
        if (it == coef->end()) {
          throw std::invalid_argument("timepoint " + std::to_string(m) + " absent from training data");
        }
        const double v = logistic(xv.dot(it->second));
        out.push_back(scaled ? s.record.S * v : v);
      }
      return out;
    };
  };
}

/// In-sample by design: medians of the scaled values per (class, month)
/// over the whole cohort, ignoring the training split, times the subject's
/// S. A class without data at a month falls back to the global median.
inline Trainer median_by_class_trainer(const Cohort& all, const FeatureSpec& bins = {}) {
  std::map<std::pair<std::size_t, int>, std::vector<double>> by_class;
  std::map<int, std::vector<double>> global;
  for (const auto& s : all) {
    const std::size_t c = class_of(s.record.age, s.record.S, bins);
    for (const auto& o : scaled_observations(s.record).obs) {
      by_class[{c, static_cast<int>(o.t)}].push_back(o.y);
      global[static_cast<int>(o.t)].push_back(o.y);
    }
  }
  auto class_median = std::make_shared<std::map<std::pair<std::size_t, int>, double>>();
  auto global_median = std::make_shared<std::map<int, double>>();
  for (auto& [k, v] : by_class) (*class_median)[k] = detail::median_of(v);
  for (auto& [m, v] : global) (*global_median)[m] = detail::median_of(v);
  return [class_median, global_median, bins](std::span<const Subject>) -> Predictor {
    return [class_median, global_median, bins](const Subject& s, std::span<const int> months) {
      const std::size_t c = class_of(s.record.age, s.record.S, bins);
      std::vector<double> out;
      for (int m : months) {
        const auto it = class_median->find({c, m});
        if (it != class_median->end()) {
          out.push_back(s.record.S * it->second);
          continue;
        }
        out.push_back(detail::lookup_months(*global_median, s.record.S, std::span<const int>(&m, 1)).front());
      }
      return out;
    };
  };
}

/// Predicts S g(t) from each subject's true (A, B, C).
inline Trainer truth_oracle_trainer() {
  return [](std::span<const Subject>) -> Predictor {
    return [](const Subject& s, std::span<const int> months) {
      if (!s.truth) throw std::invalid_argument("truth oracle: subject '" + s.record.id + "' has no truth");
      std::vector<double> out;
      for (int m : months) out.push_back(s.record.S * detail::shape_value(s.truth->A, s.truth->B, s.truth->C, m));
      return out;
    };
  };
}

// ---------------------------------------------------------------------------
// Model predictor
// ---------------------------------------------------------------------------

/// Constrained shape fit to the per-month means of the scaled values.
inline ShapeFit fit_average_shape(std::span<const Subject> train) {
  if (train.empty()) throw std::invalid_argument("fit_average_shape: empty training set");
  std::vector<CurvePoint> pts;
  for (const auto& [m, v] : detail::monthly_means(train, true)) pts.push_back({static_cast<double>(m), v});
  return fit_shape(pts, Asymptote::constrained);
}

/// Average-shape anchors as hyperparameters; A and B are kept in
/// [1e-3, 1 - 1e-3] so that their logits stay finite.
inline Hyperparameters with_average_shape(Hyperparameters h, const ShapeFit& avg) {
  h.mu_A = std::clamp(avg.A, 1e-3, 1.0 - 1e-3);
  h.mu_B = std::clamp(avg.B, 1e-3, 1.0 - 1e-3);
  h.mu_C = avg.C;
  return h;
}

struct ModelTrainerOptions {
  Hyperparameters hyper;  // mu_* are replaced by the fold's average shape
  SamplerConfig sampler;
  std::uint64_t seed = 1;
};

struct ModelFitRecord {
  Hyperparameters hyper;
  double r_hat_max = 0.0;
  std::size_t n_train = 0;
};

/// Fits the hierarchical model on the training subjects and predicts the
/// posterior-predictive median of f(t). The encoded covariates depend only
/// on the class, so the median scaled curve is computed once per class and
/// multiplied by each subject's S. Diagnostics are appended to `log`.
inline Trainer model_trainer(ModelTrainerOptions opts,
                             std::shared_ptr<std::vector<ModelFitRecord>> log = nullptr) {
  return [opts, log](std::span<const Subject> train) -> Predictor {
    const auto records = records_of(train);
    const FeatureSpec spec = fit_feature_spec(records);
    const Hyperparameters hyper = with_average_shape(opts.hyper, fit_average_shape(train));
    const EncodedData enc = encode_dataset(records, spec);
    const FitResult fit = fit_model(enc.data, hyper, opts.sampler);
    if (log) log->push_back({hyper, fit.samples.max_r_hat(), train.size()});

    const auto draws = std::make_shared<std::vector<SharedParams>>(shared_draws(fit.samples, kFeatures, hyper));
    const BiasTerms z = bias_terms(hyper);
    const std::uint64_t seed = opts.seed;
    auto cache = std::make_shared<std::map<std::size_t, std::map<int, double>>>();
    return [draws, z, spec, seed, cache](const Subject& s, std::span<const int> months) {
      const std::size_t c = class_of(s.record.age, s.record.S, spec);
      auto& curve = (*cache)[c];
      std::vector<double> missing;
      for (int m : months) {
        if (!curve.count(m)) missing.push_back(m);
      }
      if (!missing.empty()) {
        const auto x = encode_features(s.record, spec);
        const double half[] = {0.5};
        const auto band = curve_band(predictive_curves(*draws, z, x, 1.0, missing, {seed + c, false}), missing, half);
        for (std::size_t j = 0; j < missing.size(); ++j) curve[static_cast<int>(missing[j])] = band.values[j][0];
      }
      std::vector<double> out;
      for (int m : months) out.push_back(s.record.S * curve.at(m));
      return out;
    };
  };
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// phi_A = phi_B = 0.3, phi_C = 0.8, s = 1, lambda_M = 10 with the spreads
/// fixed.
inline Hyperparameters grid_center() {
  Hyperparameters h;
  h.phi_A = 0.3;
  h.phi_B = 0.3;
  h.phi_C = 0.8;
  h.s_A = h.s_B = h.s_C = 1.0;
  h.lambda_M = 10.0;
  return h;
}

/// phi_A = phi_B tied and swept over `values`.
inline std::vector<Hyperparameters> tied_phi_grid(std::span<const double> values,
                                                  const Hyperparameters& base = grid_center()) {
  std::vector<Hyperparameters> out;
  for (double v : values) {
    Hyperparameters h = base;
    h.phi_A = v;
    h.phi_B = v;
    out.push_back(h);
  }
  return out;
}

/// s_A = s_B = s_C tied and swept over `values`.
inline std::vector<Hyperparameters> tied_s_grid(std::span<const double> values,
                                                const Hyperparameters& base = grid_center()) {
  std::vector<Hyperparameters> out;
  for (double v : values) {
    Hyperparameters h = base;
    h.s_A = h.s_B = h.s_C = v;
    out.push_back(h);
  }
  return out;
}

struct GridCell {
  Hyperparameters hyper;
  std::optional<LossCurve> loss;  // empty when evaluation failed
  std::string error;
  double objective() const {
    return loss ? loss->pooled : std::numeric_limits<double>::infinity();
  }
};

struct GridResult {
  std::vector<GridCell> cells;
  std::size_t best = 0;
  const Hyperparameters& best_hyper() const { return cells.at(best).hyper; }
};

/// Evaluates every cell; the lowest pooled loss wins, ties going to the
/// earliest cell. A cell whose evaluation throws is kept with its message.
inline GridResult grid_search(const std::vector<Hyperparameters>& grid,
                              const std::function<Trainer(const Hyperparameters&)>& make_trainer,
                              const std::vector<std::vector<std::size_t>>& folds, const Cohort& cohort) {
  if (grid.empty()) throw std::invalid_argument("grid_search: empty grid");
  GridResult out;
  for (const auto& h : grid) {
    GridCell cell{h, std::nullopt, {}};
    try {
      cell.loss = evaluate_model(make_trainer(h), folds, cohort);
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    out.cells.push_back(std::move(cell));
  }
  for (std::size_t i = 1; i < out.cells.size(); ++i) {
    if (out.cells[i].objective() < out.cells[out.best].objective()) out.best = i;
  }
  if (!out.cells[out.best].loss) {
    throw std::runtime_error("grid_search: every cell failed; first error: " + out.cells.front().error);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Long format: model,time,loss,stderr.
inline void write_loss_table(std::ostream& os, const std::vector<std::pair<std::string, LossCurve>>& curves) {
  os << "model,time,loss,stderr\n";
  for (const auto& [name, c] : curves) {
    for (std::size_t j = 0; j < c.months.size(); ++j) {
      os << name << ',' << c.months[j] << ',' << c.mean[j] << ',' << c.sem[j] << '\n';
    }
  }
}

/// One row per grid cell per month.
inline void write_sensitivity_table(std::ostream& os, const GridResult& g) {
  auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("sampled"); };
  os << "cell,phi_a,phi_b,phi_c,s_a,s_b,s_c,lambda_m,time,loss,stderr,error\n";
  for (std::size_t i = 0; i < g.cells.size(); ++i) {
    const auto& c = g.cells[i];
    const auto& h = c.hyper;
    const std::string prefix = std::to_string(i) + ',' + opt(h.phi_A) + ',' + opt(h.phi_B) + ',' +
                               opt(h.phi_C) + ',' + std::to_string(h.s_A) + ',' + std::to_string(h.s_B) +
                               ',' + std::to_string(h.s_C) + ',' + std::to_string(h.lambda_M) + ',';
    if (!c.loss) {
      os << prefix << ",,," << c.error << '\n';
      continue;
    }
    for (std::size_t j = 0; j < c.loss->months.size(); ++j) {
      os << prefix << c.loss->months[j] << ',' << c.loss->mean[j] << ',' << c.loss->sem[j] << ",\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Subgroup comparison
// ---------------------------------------------------------------------------

struct ZTest {
  double z = 0.0;
  double p = 0.5;  // upper tail: evidence that group a exceeds group b
};

/// Two-sample z statistic (mean_a - mean_b) / sqrt(var_a / n_a + var_b / n_b)
/// with sample variances, and its upper-tail p-value.
inline ZTest one_sided_ztest(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("z-test: each group needs >= 2 values");
  auto moments = [](std::span<const double> v) {
    const double n = static_cast<double>(v.size());
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, ss / (n - 1.0) / n};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double se = std::sqrt(va + vb);
  if (!(se > 0.0)) throw std::invalid_argument("z-test: zero pooled variance");
  ZTest t;
  t.z = (ma - mb) / se;
  t.p = 0.5 * std::erfc(t.z / std::sqrt(2.0));
  return t;
}

}  // namespace recovery
