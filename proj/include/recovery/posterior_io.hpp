#pragma once

// Posterior persistence. A posterior directory holds
//   draws.ndjson  one record per kept draw: {"chain", "iteration", "values"}
//   summary.json  R-hat per parameter, acceptance rates, hyperparameters,
//                 the feature spec and a fit id derived from the draws.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recovery/data.hpp"
#include "recovery/fit.hpp"

namespace recovery {

using json = nlohmann::json;

struct StoredPosterior {
  PosteriorSamples samples;  // shared parameters only
  Hyperparameters hyper;
  FeatureSpec features;
  std::size_t K = 0;
  std::string fit_id;
  std::size_t n_train = 0;
};

inline json hyper_to_json(const Hyperparameters& h) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"mu_a", h.mu_A},         {"mu_b", h.mu_B},         {"mu_c", h.mu_C},
          {"s_a", h.s_A},           {"s_b", h.s_B},           {"s_c", h.s_C},
          {"lambda_a", h.lambda_A}, {"lambda_b", h.lambda_B}, {"lambda_c", h.lambda_C},
          {"lambda_m", h.lambda_M}, {"phi_a", opt(h.phi_A)},  {"phi_b", opt(h.phi_B)},
          {"phi_c", opt(h.phi_C)}};
}

inline Hyperparameters hyper_from_json(const json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return j.at(k).get<double>();
  };
  Hyperparameters h;
  h.mu_A = j.at("mu_a").get<double>();
  h.mu_B = j.at("mu_b").get<double>();
  h.mu_C = j.at("mu_c").get<double>();
  h.s_A = j.at("s_a").get<double>();
  h.s_B = j.at("s_b").get<double>();
  h.s_C = j.at("s_c").get<double>();
  h.lambda_A = j.at("lambda_a").get<double>();
  h.lambda_B = j.at("lambda_b").get<double>();
  h.lambda_C = j.at("lambda_c").get<double>();
  h.lambda_M = j.at("lambda_m").get<double>();
  h.phi_A = opt("phi_a");
  h.phi_B = opt("phi_b");
  h.phi_C = opt("phi_c");
  h.validate();
  return h;
}

inline json features_to_json(const FeatureSpec& f) {
  return {{"age_edges", f.age_edges}, {"init_edges", f.init_edges}, {"mean", f.mean}, {"sd", f.sd}};
}

inline FeatureSpec features_from_json(const json& j) {
  FeatureSpec f;
  j.at("age_edges").get_to(f.age_edges);
  j.at("init_edges").get_to(f.init_edges);
  j.at("mean").get_to(f.mean);
  j.at("sd").get_to(f.sd);
  f.validate();
  return f;
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fingerprint(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Draw records, one JSON object per line. Iteration numbers count sampler
/// iterations after warmup.
inline std::string draws_ndjson(const PosteriorSamples& s, std::size_t thinning = 1) {
  std::string out;
  for (std::size_t c = 0; c < s.n_chains(); ++c) {
    for (std::size_t d = 0; d < s.n_draws(); ++d) {
      json values = json::object();
      for (std::size_t j = 0; j < s.n_params(); ++j) values[s.names()[j]] = s.at(c, d, j);
      out += json{{"chain", c}, {"iteration", (d + 1) * thinning}, {"values", values}}.dump();
      out += '\n';
    }
  }
  return out;
}

inline json summary_json(const StoredPosterior& p, const PosteriorSamples& diagnostics) {
  json rhat = json::object();
  for (std::size_t j = 0; j < diagnostics.rhat_names.size(); ++j) {
    const double r = diagnostics.rhat_values[j];
    rhat[diagnostics.rhat_names[j]] = std::isfinite(r) ? json(r) : json(nullptr);
  }
  json acc = json::object();
  for (const auto& a : diagnostics.acceptance) acc[a.name] = a.rate;
  const double mx = diagnostics.max_r_hat();
  return {{"fit_id", p.fit_id},
          {"K", p.K},
          {"n_train", p.n_train},
          {"n_chains", p.samples.n_chains()},
          {"n_draws", p.samples.n_draws()},
          {"parameters", p.samples.names()},
          {"r_hat", rhat},
          {"r_hat_max", std::isfinite(mx) ? json(mx) : json(nullptr)},
          {"acceptance", acc},
          {"warnings", diagnostics.warnings},
          {"hyperparameters", hyper_to_json(p.hyper)},
          {"features", features_to_json(p.features)}};
}

/// Writes draws.ndjson and summary.json into `dir` (created if needed) and
/// returns the fit id.
inline std::string save_posterior(const std::filesystem::path& dir, const FitResult& fit,
                                  const FeatureSpec& features, std::size_t n_train,
                                  std::size_t thinning = 1) {
  std::filesystem::create_directories(dir);
  const std::string draws = draws_ndjson(fit.samples, thinning);
  StoredPosterior p{fit.samples, fit.hyper, features, fit.K, {}, n_train};
  p.fit_id = fingerprint(draws + hyper_to_json(fit.hyper).dump() + features_to_json(features).dump());
  std::ofstream(dir / "draws.ndjson", std::ios::binary) << draws;
  std::ofstream(dir / "summary.json", std::ios::binary) << summary_json(p, fit.samples).dump(2) << '\n';
  return p.fit_id;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline StoredPosterior load_posterior(const std::filesystem::path& dir) {
  json summary;
  try {
    summary = json::parse(read_file(dir / "summary.json"));
  } catch (const json::exception& e) {
    throw std::runtime_error("summary.json: " + std::string(e.what()));
  }
  StoredPosterior p;
  try {
    p.hyper = hyper_from_json(summary.at("hyperparameters"));
    p.features = features_from_json(summary.at("features"));
    p.K = summary.at("K").get<std::size_t>();
    p.fit_id = summary.at("fit_id").get<std::string>();
    p.n_train = summary.value("n_train", std::size_t{0});
    const auto names = summary.at("parameters").get<std::vector<std::string>>();
    const auto n_chains = summary.at("n_chains").get<std::size_t>();
    const auto n_draws = summary.at("n_draws").get<std::size_t>();
    p.samples = PosteriorSamples(names, n_chains, n_draws);
    for (const auto& [name, r] : summary.at("r_hat").items()) {
      p.samples.rhat_names.push_back(name);
      p.samples.rhat_values.push_back(r.is_null() ? std::numeric_limits<double>::infinity() : r.get<double>());
    }
    for (const auto& [name, a] : summary.at("acceptance").items()) p.samples.acceptance.push_back({name, a.get<double>()});
  } catch (const json::exception& e) {
    throw std::runtime_error("summary.json: " + std::string(e.what()));
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("summary.json: " + std::string(e.what()));
  }

  std::istringstream draws(read_file(dir / "draws.ndjson"));
  std::vector<std::size_t> seen(p.samples.n_chains(), 0);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(draws, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      const auto c = rec.at("chain").get<std::size_t>();
      if (c >= seen.size() || seen[c] >= p.samples.n_draws()) throw std::runtime_error("unexpected chain or draw count");
      const auto& values = rec.at("values");
      for (std::size_t j = 0; j < p.samples.n_params(); ++j) {
        p.samples.at(c, seen[c], j) = values.at(p.samples.names()[j]).get<double>();
      }
      ++seen[c];
    } catch (const std::exception& e) {
      throw std::runtime_error("draws.ndjson line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (seen[c] != p.samples.n_draws()) {
      throw std::runtime_error("draws.ndjson: chain " + std::to_string(c) + " has " + std::to_string(seen[c]) +
                               " draws, summary says " + std::to_string(p.samples.n_draws()));
    }
  }
  return p;
}

}  // namespace recovery
