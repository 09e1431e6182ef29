#pragma once

// Request handling for the prediction service, independent of any HTTP
// library: each handler maps a request body to a status and a JSON body.
//
//   GET  /health   liveness and the loaded fit id
//   GET  /classes  the 12 age x init classes with their bin edges
//   POST /predict  posterior-predictive quantiles of f(t) for one profile

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recovery/posterior_io.hpp"

namespace recovery {

struct Reply {
  int status = 200;
  json body;
};

inline const std::vector<double>& default_quantiles() {
  static const std::vector<double> q = {0.1, 0.25, 0.5, 0.75, 0.9};
  return q;
}

inline const std::vector<double>& default_times() {
  static const std::vector<double> t = {0, 1, 2, 4, 8, 12, 18, 24, 30, 36, 42, 48};
  return t;
}

/// A posterior ready to serve: shared draws are unpacked once.
struct LoadedPosterior {
  StoredPosterior stored;
  std::vector<SharedParams> draws;
  BiasTerms bias;
  double r_hat_max = 0.0;

  explicit LoadedPosterior(StoredPosterior p)
      : stored(std::move(p)),
        draws(shared_draws(stored.samples, stored.K, stored.hyper)),
        bias(bias_terms(stored.hyper)),
        r_hat_max(stored.samples.max_r_hat()) {
    if (stored.K != kFeatures) throw std::runtime_error("posterior: expected the 12-class feature encoding");
    if (!stored.features.fitted()) throw std::runtime_error("posterior: feature spec is not fitted");
  }
};

namespace detail {

inline json bin_range(const std::vector<double>& edges, std::size_t b) {
  return json::array({b == 0 ? json(nullptr) : json(edges[b - 1]), b == edges.size() ? json(nullptr) : json(edges[b])});
}

inline json class_json(std::size_t age_bin, std::size_t init_bin, const FeatureSpec& f) {
  return {{"id", class_id(age_bin, init_bin)},
          {"age_bin", age_bin},
          {"init_bin", init_bin},
          {"age_range", bin_range(f.age_edges, age_bin)},
          {"init_range", bin_range(f.init_edges, init_bin)}};
}

// Reads an optional number; records a message when present but invalid.
inline std::optional<double> number_field(const json& body, const char* key, json& errors) {
  if (!body.contains(key) || body.at(key).is_null()) return std::nullopt;
  if (!body.at(key).is_number()) {
    errors[key] = "must be a number";
    return std::nullopt;
  }
  return body.at(key).get<double>();
}

inline std::optional<std::vector<double>> number_list(const json& body, const char* key, json& errors) {
  if (!body.contains(key)) return std::nullopt;
  const json& v = body.at(key);
  if (!v.is_array() || v.empty()) {
    errors[key] = "must be a non-empty array of numbers";
    return std::nullopt;
  }
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) {
      errors[key] = "must be a non-empty array of numbers";
      return std::nullopt;
    }
    out.push_back(e.get<double>());
  }
  return out;
}

inline std::optional<std::size_t> index_field(const json& body, const char* key, std::size_t limit, json& errors) {
  if (!body.contains(key) || body.at(key).is_null()) return std::nullopt;
  const json& v = body.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0 || v.get<long long>() >= static_cast<long long>(limit)) {
    errors[key] = "must be an integer in [0, " + std::to_string(limit - 1) + "]";
    return std::nullopt;
  }
  return v.get<std::size_t>();
}

inline Reply bad_request(json fields) {
  return {400, {{"error", "invalid request"}, {"fields", std::move(fields)}}};
}

}  // namespace detail

class PredictionService {
 public:
  PredictionService() = default;
  explicit PredictionService(std::shared_ptr<const LoadedPosterior> p) : posterior_(std::move(p)) {}

  /// Replaces the served posterior; requests in flight keep the old one.
  void load(std::shared_ptr<const LoadedPosterior> p) {
    std::lock_guard lock(mutex_);
    posterior_ = std::move(p);
  }

  std::shared_ptr<const LoadedPosterior> posterior() const {
    std::lock_guard lock(mutex_);
    return posterior_;
  }

  Reply health() const {
    const auto p = posterior();
    json body = {{"status", "ok"}, {"posterior_loaded", p != nullptr}};
    if (p) {
      body["fit_id"] = p->stored.fit_id;
      body["r_hat_max"] = p->r_hat_max;
    }
    return {200, body};
  }

  /// Bin edges come from the loaded posterior's feature spec, or the
  /// defaults when none is loaded.
  Reply classes() const {
    const auto p = posterior();
    const FeatureSpec f = p ? p->stored.features : FeatureSpec{};
    json list = json::array();
    for (std::size_t a = 0; a < kAgeBins; ++a) {
      for (std::size_t i = 0; i < kInitBins; ++i) list.push_back(detail::class_json(a, i, f));
    }
    json body = {{"age_edges", f.age_edges}, {"init_edges", f.init_edges}, {"classes", list}};
    if (p) body["fit_id"] = p->stored.fit_id;
    return {200, body};
  }

  /// Body fields: S (required, in (0,1]); age or age_bin (one required);
  /// init_bin (optional, defaults to the bin of S); times (ascending,
  /// >= 0); quantiles (ascending, in [0,1]); observation_noise (bool).
  Reply predict(const std::string& text) const {
    const auto p = posterior();
    if (!p) return {409, {{"error", "no posterior loaded"}}};

    json body;
    try {
      body = json::parse(text);
    } catch (const json::exception&) {
      return detail::bad_request({{"body", "must be a JSON object"}});
    }
    if (!body.is_object()) return detail::bad_request({{"body", "must be a JSON object"}});

    json errors = json::object();
    const FeatureSpec& f = p->stored.features;
    const auto S = detail::number_field(body, "S", errors);
    if (!S && !errors.contains("S")) errors["S"] = "is required";
    if (S && !(*S > 0.0 && *S <= 1.0)) errors["S"] = "must lie in (0, 1]";

    const auto age = detail::number_field(body, "age", errors);
    const auto age_bin = detail::index_field(body, "age_bin", kAgeBins, errors);
    const auto init_bin = detail::index_field(body, "init_bin", kInitBins, errors);
    if (age && !(*age > 0.0)) errors["age"] = "must be > 0";
    if (age && age_bin) errors["age"] = "give either age or age_bin, not both";
    if (!age && !age_bin && !errors.contains("age") && !errors.contains("age_bin")) {
      errors["age"] = "age or age_bin is required";
    }

    auto times = detail::number_list(body, "times", errors).value_or(default_times());
    if (!errors.contains("times")) {
      for (std::size_t j = 0; j < times.size(); ++j) {
        if (!(times[j] >= 0.0) || !std::isfinite(times[j]) || (j > 0 && !(times[j] > times[j - 1]))) {
          errors["times"] = "must be finite, >= 0 and strictly ascending";
          break;
        }
      }
    }
    auto probs = detail::number_list(body, "quantiles", errors).value_or(default_quantiles());
    if (!errors.contains("quantiles")) {
      for (std::size_t j = 0; j < probs.size(); ++j) {
        if (!(probs[j] >= 0.0 && probs[j] <= 1.0) || (j > 0 && !(probs[j] > probs[j - 1]))) {
          errors["quantiles"] = "must lie in [0, 1] and be strictly ascending";
          break;
        }
      }
    }
    bool noise = false;
    if (body.contains("observation_noise")) {
      if (!body.at("observation_noise").is_boolean()) errors["observation_noise"] = "must be a boolean";
      else noise = body.at("observation_noise").get<bool>();
    }
    if (!errors.empty()) return detail::bad_request(std::move(errors));

    const std::size_t ab = age_bin ? *age_bin : bin_age(*age, f);
    const std::size_t ib = init_bin ? *init_bin : bin_init(*S, f);
    const auto x = encode_class(ab, ib, f);
    // The seed depends only on the posterior and the class, so identical
    // requests give identical replies.
    const std::uint64_t seed = std::stoull(p->stored.fit_id.substr(0, 15), nullptr, 16) ^ (class_id(ab, ib) + 1);
    const auto curves = predictive_curves(p->draws, p->bias, x, *S, times, {seed, noise});
    const CurveBand band = curve_band(curves, times, probs);

    json values = json::array();
    for (auto row : band.values) {
      // Quantile interpolation can round a hair past the envelope.
      for (double& v : row) v = std::clamp(v, 0.0, *S);
      values.push_back(row);
    }
    return {200,
            {{"fit_id", p->stored.fit_id},
             {"r_hat_max", p->r_hat_max},
             {"class", detail::class_json(ab, ib, f)},
             {"S", *S},
             {"observation_noise", noise},
             {"times", times},
             {"quantiles", probs},
             {"values", values},
             {"n_draws", curves.size()}}};
  }

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const LoadedPosterior> posterior_;
};

}  // namespace recovery
