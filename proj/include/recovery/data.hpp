#pragma once

// Longitudinal study data: CSV ingestion, patient filters, class binning and
// covariate encoding.
//
// patients.csv      id,age,pre_treatment[,extra columns...]
// observations.csv  id,month,value

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "recovery/curves.hpp"
#include "recovery/fit.hpp"
#include "recovery/model.hpp"
#include "recovery/simulate.hpp"

namespace recovery {

struct PatientRecord {
  std::string id;
  double age = 0.0;
  double S = 0.0;                                   // pre-treatment level
  std::map<int, double> obs;                        // month -> absolute value
  std::vector<std::pair<std::string, std::string>> extra;  // carried, unused
};

struct LoadIssue {
  std::string file;
  std::size_t line = 0;  // 1-based, header is line 1
  std::string message;
};

class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, std::vector<LoadIssue> issues = {})
      : std::runtime_error(what), issues_(std::move(issues)) {}
  const std::vector<LoadIssue>& issues() const noexcept { return issues_; }

 private:
  std::vector<LoadIssue> issues_;
};

struct LoadResult {
  std::vector<PatientRecord> records;
  std::vector<LoadIssue> issues;  // rows that were rejected
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const auto b = cell.find_first_not_of(" \t");
    const auto e = cell.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<int> parse_int(const std::string& s) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Reads the header and checks that it starts with `required`.
inline std::vector<std::string> read_header(std::istream& in, const std::string& file,
                                            const std::vector<std::string>& required) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(file + ": missing header");
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  auto cols = split_csv_line(line);
  if (cols.size() < required.size() ||
      !std::equal(required.begin(), required.end(), cols.begin())) {
    std::string want;
    for (const auto& r : required) want += (want.empty() ? "" : ",") + r;
    throw DataError(file + ": header must start with '" + want + "'");
  }
  return cols;
}

}  // namespace detail

/// Parses the two CSV streams. Unparseable or invalid rows are collected in
/// `issues`; in strict mode any issue raises DataError instead.
inline LoadResult read_patients(std::istream& patients, std::istream& observations,
                                bool strict = true) {
  LoadResult out;
  std::map<std::string, std::size_t> index;
  auto issue = [&](const char* file, std::size_t line, std::string msg) {
    out.issues.push_back({file, line, std::move(msg)});
  };

  const auto cols = detail::read_header(patients, "patients.csv", {"id", "age", "pre_treatment"});
  std::string line;
  std::size_t ln = 1;
  while (std::getline(patients, line)) {
    ++ln;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != cols.size()) {
      issue("patients.csv", ln, "expected " + std::to_string(cols.size()) + " columns");
      continue;
    }
    PatientRecord r;
    r.id = cells[0];
    const auto age = detail::parse_double(cells[1]);
    const auto S = detail::parse_double(cells[2]);
    if (r.id.empty()) {
      issue("patients.csv", ln, "empty id");
    } else if (index.count(r.id)) {
      issue("patients.csv", ln, "duplicate id '" + r.id + "'");
    } else if (!age || !(*age > 0.0)) {
      issue("patients.csv", ln, "age must be a positive number");
    } else if (!S || *S < 0.0 || *S > 1.0) {
      issue("patients.csv", ln, "pre_treatment must lie in [0,1]");
    } else {
      r.age = *age;
      r.S = *S;
      for (std::size_t c = 3; c < cols.size(); ++c) r.extra.emplace_back(cols[c], cells[c]);
      index[r.id] = out.records.size();
      out.records.push_back(std::move(r));
    }
  }

  detail::read_header(observations, "observations.csv", {"id", "month", "value"});
  ln = 1;
  while (std::getline(observations, line)) {
    ++ln;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 3) {
      issue("observations.csv", ln, "expected 3 columns");
      continue;
    }
    const auto it = index.find(cells[0]);
    const auto month = detail::parse_int(cells[1]);
    const auto value = detail::parse_double(cells[2]);
    if (it == index.end()) {
      issue("observations.csv", ln, "unknown id '" + cells[0] + "'");
    } else if (!month || *month <= 0) {
      issue("observations.csv", ln, "month must be a positive integer");
    } else if (!value || *value < 0.0 || *value > 1.0) {
      issue("observations.csv", ln, "value must lie in [0,1]");
    } else {
      auto& obs = out.records[it->second].obs;
      if (!obs.emplace(*month, *value).second) {
        issue("observations.csv", ln,
              "duplicate observation for id '" + cells[0] + "' month " + cells[1]);
      }
    }
  }

  if (strict && !out.issues.empty()) {
    const auto& f = out.issues.front();
    throw DataError(f.file + ":" + std::to_string(f.line) + ": " + f.message +
                        (out.issues.size() > 1
                             ? " (and " + std::to_string(out.issues.size() - 1) + " more)"
                             : ""),
                    out.issues);
  }
  return out;
}

/// Loads `dir`/patients.csv and `dir`/observations.csv.
inline LoadResult load_patients(const std::filesystem::path& dir, bool strict = true) {
  std::ifstream p(dir / "patients.csv"), o(dir / "observations.csv");
  if (!p) throw DataError("cannot open " + (dir / "patients.csv").string());
  if (!o) throw DataError("cannot open " + (dir / "observations.csv").string());
  return read_patients(p, o, strict);
}

inline void write_patients(std::ostream& patients, std::ostream& observations,
                           const std::vector<PatientRecord>& records) {
  patients << "id,age,pre_treatment";
  if (!records.empty()) {
    for (const auto& [k, v] : records.front().extra) patients << ',' << k;
  }
  patients << '\n';
  observations << "id,month,value\n";
  for (const auto& r : records) {
    patients << r.id << ',' << detail::format_double(r.age) << ',' << detail::format_double(r.S);
    for (const auto& [k, v] : r.extra) patients << ',' << v;
    patients << '\n';
    for (const auto& [m, v] : r.obs) observations << r.id << ',' << m << ',' << detail::format_double(v) << '\n';
  }
}

inline void save_patients(const std::filesystem::path& dir, const std::vector<PatientRecord>& records) {
  std::filesystem::create_directories(dir);
  std::ofstream p(dir / "patients.csv"), o(dir / "observations.csv");
  if (!p || !o) throw DataError("cannot write to " + dir.string());
  write_patients(p, o, records);
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

enum class RemovalReason {
  pre_treatment_low,
  too_few_timepoints,
  curve_exceeds_pre_treatment,
  consecutive_zeros,
};

inline const char* to_string(RemovalReason r) {
  switch (r) {
    case RemovalReason::pre_treatment_low: return "pre_treatment_low";
    case RemovalReason::too_few_timepoints: return "too_few_timepoints";
    case RemovalReason::curve_exceeds_pre_treatment: return "curve_exceeds_pre_treatment";
    case RemovalReason::consecutive_zeros: return "consecutive_zeros";
  }
  return "unknown";
}

struct FilterOptions {
  double min_pre_treatment = 0.1;
  std::size_t min_timepoints = 6;
  std::size_t zero_run = 3;
  double curve_month = 48.0;
  std::vector<int> schedule = {1, 2, 4, 8, 12, 18, 24, 30, 36, 42, 48};
};

struct Removal {
  std::string id;
  std::vector<RemovalReason> reasons;
};

struct FilterResult {
  std::vector<PatientRecord> kept;
  std::vector<Removal> removed;

  std::size_t count(RemovalReason r) const {
    return static_cast<std::size_t>(std::count_if(removed.begin(), removed.end(), [&](const Removal& m) {
      return std::find(m.reasons.begin(), m.reasons.end(), r) != m.reasons.end();
    }));
  }
};

/// Longest run of scheduled months observed at exactly 0. A scheduled month
/// without an observation ends the run.
inline std::size_t longest_zero_run(const PatientRecord& r, const std::vector<int>& schedule) {
  std::size_t run = 0, best = 0;
  for (int m : schedule) {
    const auto it = r.obs.find(m);
    run = (it != r.obs.end() && it->second == 0.0) ? run + 1 : 0;
    best = std::max(best, run);
  }
  return best;
}

/// Fits the free-asymptote shape to the absolute values and reports whether
/// the curve at `month` lies above S. Needs at least three observations.
inline bool curve_exceeds_pre_treatment(const PatientRecord& r, double month) {
  if (r.obs.size() < 3) return false;
  std::vector<CurvePoint> pts;
  for (const auto& [m, v] : r.obs) pts.push_back({static_cast<double>(m), v});
  const ShapeFit fit = fit_shape(pts, Asymptote::free);
  return fit(month) > r.S + 1e-9;
}

inline std::vector<RemovalReason> removal_reasons(const PatientRecord& r,
                                                  const FilterOptions& opt = {}) {
  std::vector<RemovalReason> reasons;
  if (r.S < opt.min_pre_treatment) reasons.push_back(RemovalReason::pre_treatment_low);
  if (r.obs.size() < opt.min_timepoints) reasons.push_back(RemovalReason::too_few_timepoints);
  if (curve_exceeds_pre_treatment(r, opt.curve_month)) {
    reasons.push_back(RemovalReason::curve_exceeds_pre_treatment);
  }
  if (longest_zero_run(r, opt.schedule) >= opt.zero_run) {
    reasons.push_back(RemovalReason::consecutive_zeros);
  }
  return reasons;
}

inline FilterResult filter_patients(const std::vector<PatientRecord>& records,
                                    const FilterOptions& opt = {}) {
  FilterResult out;
  for (const auto& r : records) {
    auto reasons = removal_reasons(r, opt);
    if (reasons.empty()) out.kept.push_back(r);
    else out.removed.push_back({r.id, std::move(reasons)});
  }
  return out;
}

/// CSV with columns id,reasons; several reasons are joined with ';'.
inline void write_filter_report(std::ostream& os, const std::vector<Removal>& removed) {
  os << "id,reasons\n";
  for (const auto& m : removed) {
    os << m.id << ',';
    for (std::size_t k = 0; k < m.reasons.size(); ++k) os << (k ? ";" : "") << to_string(m.reasons[k]);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Classes and covariates
// ---------------------------------------------------------------------------

inline constexpr std::size_t kAgeBins = 3;
inline constexpr std::size_t kInitBins = 4;
inline constexpr std::size_t kClasses = kAgeBins * kInitBins;
inline constexpr std::size_t kIndicators = (kAgeBins - 1) + (kInitBins - 1);
inline constexpr std::size_t kFeatures = kIndicators + 1;  // plus bias

struct FeatureSpec {
  std::vector<double> age_edges = {55.0, 65.0};
  std::vector<double> init_edges = {0.41, 0.60, 0.80};
  // Training-set statistics of the indicator columns; empty until fitted.
  std::vector<double> mean;
  std::vector<double> sd;

  bool fitted() const noexcept { return mean.size() == kIndicators && sd.size() == kIndicators; }

  void validate() const {
    auto increasing = [](const std::vector<double>& e) {
      return std::adjacent_find(e.begin(), e.end(), std::greater_equal<>()) == e.end();
    };
    if (age_edges.size() != kAgeBins - 1 || !increasing(age_edges)) {
      throw std::invalid_argument("feature spec: need 2 strictly increasing age edges");
    }
    if (init_edges.size() != kInitBins - 1 || !increasing(init_edges)) {
      throw std::invalid_argument("feature spec: need 3 strictly increasing init edges");
    }
  }
};

namespace detail {

// Half-open bins [lo, hi): a value on an edge goes to the upper bin.
inline std::size_t bin_of(double v, const std::vector<double>& edges) {
  return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin());
}

}  // namespace detail

inline std::size_t bin_age(double age, const FeatureSpec& spec = {}) {
  if (!(age > 0.0)) throw std::invalid_argument("bin_age: age must be > 0");
  return detail::bin_of(age, spec.age_edges);
}

inline std::size_t bin_init(double S, const FeatureSpec& spec = {}) {
  if (!(S > 0.0 && S <= 1.0)) throw std::invalid_argument("bin_init: S must lie in (0,1]");
  return detail::bin_of(S, spec.init_edges);
}

inline std::size_t class_id(std::size_t age_bin, std::size_t init_bin) {
  if (age_bin >= kAgeBins || init_bin >= kInitBins) throw std::out_of_range("class_id: bin out of range");
  return age_bin * kInitBins + init_bin;
}

inline std::size_t class_of(double age, double S, const FeatureSpec& spec = {}) {
  return class_id(bin_age(age, spec), bin_init(S, spec));
}

/// Raw 0/1 indicators: age bins 1..2, then init bins 1..3.
inline std::array<double, kIndicators> class_indicators(std::size_t age_bin, std::size_t init_bin) {
  std::array<double, kIndicators> d{};
  if (age_bin > 0) d[age_bin - 1] = 1.0;
  if (init_bin > 0) d[(kAgeBins - 1) + init_bin - 1] = 1.0;
  return d;
}

/// Learns per-column mean and standard deviation (population form) of the
/// indicators over the training records. A constant column keeps sd = 1.
inline FeatureSpec fit_feature_spec(const std::vector<PatientRecord>& train, FeatureSpec spec = {}) {
  spec.validate();
  if (train.empty()) throw std::invalid_argument("fit_feature_spec: empty training set");
  spec.mean.assign(kIndicators, 0.0);
  spec.sd.assign(kIndicators, 0.0);
  std::vector<std::array<double, kIndicators>> rows;
  for (const auto& r : train) rows.push_back(class_indicators(bin_age(r.age, spec), bin_init(r.S, spec)));
  const double n = static_cast<double>(rows.size());
  for (const auto& d : rows) {
    for (std::size_t j = 0; j < kIndicators; ++j) spec.mean[j] += d[j] / n;
  }
  for (const auto& d : rows) {
    for (std::size_t j = 0; j < kIndicators; ++j) spec.sd[j] += (d[j] - spec.mean[j]) * (d[j] - spec.mean[j]) / n;
  }
  for (auto& s : spec.sd) s = s > 0.0 ? std::sqrt(s) : 1.0;
  return spec;
}

inline std::vector<double> encode_class(std::size_t age_bin, std::size_t init_bin,
                                        const FeatureSpec& spec) {
  if (!spec.fitted()) throw std::logic_error("encode_features: feature spec is not fitted");
  const auto d = class_indicators(age_bin, init_bin);
  std::vector<double> x(kFeatures);
  for (std::size_t j = 0; j < kIndicators; ++j) x[j] = (d[j] - spec.mean[j]) / spec.sd[j];
  x[kIndicators] = 1.0;  // bias, not standardized
  return x;
}

inline std::vector<double> encode_features(double age, double S, const FeatureSpec& spec) {
  return encode_class(bin_age(age, spec), bin_init(S, spec), spec);
}

inline std::vector<double> encode_features(const PatientRecord& r, const FeatureSpec& spec) {
  return encode_features(r.age, r.S, spec);
}

// ---------------------------------------------------------------------------
// Scaling
// ---------------------------------------------------------------------------

inline constexpr double kClipValue = 1.0 - 1e-6;

struct ScaledObservations {
  std::vector<Observation> obs;  // month, y / S
  std::size_t clipped = 0;       // values above S, replaced by kClipValue
};

/// y / S per month. A ratio of exactly 1 stays 1 (a boundary observation);
/// ratios above 1 are clipped to just below 1 and counted.
inline ScaledObservations scaled_observations(const PatientRecord& r) {
  if (!(r.S > 0.0)) throw std::invalid_argument("scaled_observations: S must be > 0 for '" + r.id + "'");
  ScaledObservations out;
  for (const auto& [m, v] : r.obs) {
    double y = v / r.S;
    if (y > 1.0) {
      y = kClipValue;
      ++out.clipped;
    }
    out.obs.push_back({static_cast<double>(m), y});
  }
  return out;
}

struct EncodedData {
  Dataset data;
  std::size_t clipped = 0;
};

/// Model input for filtered records: encoded covariates and scaled values.
/// The model sees scaled values, so its curve level is 1; absolute
/// predictions multiply by the patient's own S afterwards.
inline EncodedData encode_dataset(const std::vector<PatientRecord>& records, const FeatureSpec& spec) {
  EncodedData out;
  out.data.K = kFeatures;
  for (const auto& r : records) {
    auto scaled = scaled_observations(r);
    out.clipped += scaled.clipped;
    out.data.patients.push_back({encode_features(r, spec), 1.0, std::move(scaled.obs)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Study-style synthetic cohort
// ---------------------------------------------------------------------------

/// Shared parameters over the encoded class covariates
/// (age bins 1-2, init bins 1-3, bias).
inline SharedParams study_truth() {
  SharedParams s;
  s.b_A = {0.3, 0.6, -0.2, -0.4, -0.6, 0.0};
  s.b_B = {0.2, 0.4, -0.1, -0.3, -0.5, 0.0};
  s.b_C = {0.1, 0.2, -0.1, -0.2, -0.3, 0.0};
  s.phi_A = s.phi_B = s.phi_C = 0.05;
  s.theta = 0.1;
  s.p = 0.3;
  s.phi_M = 0.02;
  return s;
}

struct StudySpec {
  std::size_t n_patients = 300;
  std::uint64_t seed = 1;
  SharedParams truth = study_truth();
  Hyperparameters hyper = reference_hyper();
  double age_min = 45.0, age_max = 80.0;
  double S_min = 0.15, S_max = 1.0;
  double response_rate = 0.9;  // chance each scheduled survey is returned
  std::vector<int> schedule = {1, 2, 4, 8, 12, 18, 24, 30, 36, 42, 48};
};

struct StudyCohort {
  std::vector<PatientRecord> records;
  std::vector<PatientParams> truth;  // per record
  FeatureSpec features;              // fitted on the whole cohort
};

/// Ages and S are uniform, covariates are the encoded classes, and each
/// returned survey is S times a draw from the mixture about g(t).
inline StudyCohort simulate_study(const StudySpec& spec) {
  if (spec.n_patients == 0) throw std::invalid_argument("simulate_study: need at least one patient");
  if (spec.truth.b_A.size() != kFeatures) throw std::invalid_argument("simulate_study: truth must have K = 6");
  spec.hyper.validate();
  auto rng = derived_rng(spec.seed, 0x57d7);
  std::uniform_real_distribution<double> age(spec.age_min, spec.age_max);
  std::uniform_real_distribution<double> level(spec.S_min, spec.S_max);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  StudyCohort out;
  for (std::size_t i = 0; i < spec.n_patients; ++i) {
    PatientRecord r;
    char id[16];
    std::snprintf(id, sizeof id, "P%05zu", i + 1);
    r.id = id;
    r.age = std::round(age(rng) * 10.0) / 10.0;
    r.S = std::round(level(rng) * 1000.0) / 1000.0;
    out.records.push_back(std::move(r));
  }
  out.features = fit_feature_spec(out.records);
  const BiasTerms z = bias_terms(spec.hyper);
  for (auto& r : out.records) {
    const auto x = encode_features(r, out.features);
    const PatientParams q = sample_patient(spec.truth, x, z, rng);
    for (int m : spec.schedule) {
      if (unif(rng) >= spec.response_rate) continue;
      const double g = detail::shape_value(q.A, q.B, q.C, m);
      r.obs[m] = r.S * sample_observation(g, spec.truth, rng);
    }
    out.truth.push_back(q);
  }
  return out;
}

}  // namespace recovery
