// recovery: simulate cohorts, fit the hierarchical model, cross-validate,
// predict and serve posterior-predictive recovery curves.
//
// Exit codes: 0 success, 1 bad input or failure, 3 fit finished but some
// R-hat >= 1.2 (outputs are still written).

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "recovery/evaluate.hpp"
#include "recovery/http.hpp"
#include "recovery/posterior_io.hpp"
#include "recovery/service.hpp"
#include "recovery/simulate.hpp"

namespace fs = std::filesystem;
using namespace recovery;

namespace {

constexpr int kExitError = 1;
constexpr int kExitUnconverged = 3;

int fail(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
  return kExitError;
}

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  std::string out = ".";
};

Hyperparameters hyper_of(const Common& c, Hyperparameters fallback = {}) {
  return c.config.empty() ? fallback : load_hyperparameters(c.config);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

// --- simulate -------------------------------------------------------------

struct SimulateArgs {
  std::size_t n = 300;
  std::size_t m = 0;
};

int run_simulate(const Common& c, const SimulateArgs& a) {
  StudySpec spec;
  spec.n_patients = a.n;
  spec.seed = c.seed;
  spec.hyper = hyper_of(c, spec.hyper);
  auto cohort = simulate_study(spec);

  // Optional uniform-noise patients, flagged in the truth file.
  auto rng = derived_rng(c.seed, a.m, 0xbad);
  std::uniform_real_distribution<double> unif(0.0, 1.0), age(spec.age_min, spec.age_max), level(spec.S_min, spec.S_max);
  for (std::size_t i = 0; i < a.m; ++i) {
    PatientRecord r;
    char id[16];
    std::snprintf(id, sizeof id, "N%05zu", i + 1);
    r.id = id;
    r.age = std::round(age(rng) * 10.0) / 10.0;
    r.S = std::round(level(rng) * 1000.0) / 1000.0;
    for (int mth : spec.schedule) r.obs[mth] = r.S * unif(rng);
    cohort.records.push_back(std::move(r));
  }

  const fs::path out(c.out);
  fs::create_directories(out);
  save_patients(out, cohort.records);
  auto truth = open_out(out / "truth.csv");
  truth << "id,A,B,C,noise\n";
  for (std::size_t i = 0; i < cohort.records.size(); ++i) {
    truth << cohort.records[i].id << ',';
    if (i < cohort.truth.size()) {
      const auto& t = cohort.truth[i];
      truth << detail::format_double(t.A) << ',' << detail::format_double(t.B) << ',' << detail::format_double(t.C) << ",0\n";
    } else {
      truth << ",,,1\n";
    }
  }
  json shared = json::object();
  for (const auto& name : shared_parameter_names(kFeatures, Hyperparameters{})) shared[name] = shared_value(spec.truth, name);
  open_out(out / "truth_shared.json") << shared.dump(2) << '\n';
  std::cout << json{{"patients", a.n}, {"noise_patients", a.m}, {"out", out.string()}}.dump() << '\n';
  return 0;
}

// --- fit ------------------------------------------------------------------

struct FitArgs {
  std::string data;
  bool no_filter = false;
  bool keep_mu = false;
  std::size_t chains = 4, warmup = 2500, draws = 2500, thinning = 1;
};

SamplerConfig sampler_of(const Common& c, const FitArgs& a) {
  SamplerConfig cfg;
  cfg.n_chains = a.chains;
  cfg.n_warmup = a.warmup;
  cfg.n_keep = a.draws;
  cfg.thinning = a.thinning;
  cfg.seed = c.seed;
  cfg.validate();
  return cfg;
}

// Loads and, unless disabled, filters the records; the filter report is
// written next to the other outputs.
std::vector<PatientRecord> prepared_records(const std::string& data, bool no_filter, const fs::path& out) {
  auto loaded = load_patients(data, true).records;
  if (no_filter) return loaded;
  auto filtered = filter_patients(loaded);
  fs::create_directories(out);
  auto report = open_out(out / "filter_report.csv");
  write_filter_report(report, filtered.removed);
  if (filtered.kept.empty()) throw std::invalid_argument("no patients left after filtering");
  return filtered.kept;
}

int run_fit(const Common& c, const FitArgs& a) {
  const fs::path out(c.out);
  const auto records = prepared_records(a.data, a.no_filter, out);
  Hyperparameters h = hyper_of(c);
  if (!a.keep_mu) {
    Cohort cohort = cohort_from_records(records);
    h = with_average_shape(h, fit_average_shape(cohort));
  }
  const FeatureSpec spec = fit_feature_spec(records);
  const EncodedData enc = encode_dataset(records, spec);
  const FitResult fit = fit_model(enc.data, h, sampler_of(c, a));
  const std::string id = save_posterior(out, fit, spec, records.size(), a.thinning);
  const double r = fit.samples.max_r_hat();
  std::cout << json{{"fit_id", id},
                    {"patients", records.size()},
                    {"clipped_values", enc.clipped},
                    {"r_hat_max", std::isfinite(r) ? json(r) : json(nullptr)},
                    {"out", out.string()}}
                   .dump()
            << '\n';
  if (!(r < kRhatThreshold)) {
    std::cerr << json{{"warning", "unconverged"}, {"r_hat_max", std::isfinite(r) ? json(r) : json(nullptr)}}.dump() << '\n';
    return kExitUnconverged;
  }
  return 0;
}

// --- cv -------------------------------------------------------------------

struct CvArgs {
  FitArgs fit;
  std::size_t folds = 5;
  std::string grid = "none";
  bool skip_model = false;
};

int run_cv(const Common& c, const CvArgs& a) {
  const fs::path out(c.out);
  const auto records = prepared_records(a.fit.data, a.fit.no_filter, out);
  const Cohort cohort = cohort_from_records(records);
  const auto folds = kfold_split(cohort.size(), a.folds, c.seed);
  const Hyperparameters base = c.config.empty() ? grid_center() : load_hyperparameters(c.config);
  const SamplerConfig sampler = sampler_of(c, a.fit);

  std::vector<std::pair<std::string, Trainer>> methods = {
      {"average_value", average_value_trainer()},
      {"average_scaled_value", average_scaled_trainer()},
      {"regression", timewise_regression_trainer(false)},
      {"scaled_regression", timewise_regression_trainer(true)},
      {"median_in_sample", median_by_class_trainer(cohort)},
  };
  if (!a.skip_model) methods.push_back({"model", model_trainer({base, sampler, c.seed})});

  std::vector<std::pair<std::string, LossCurve>> curves;
  json pooled = json::object();
  for (const auto& [name, trainer] : methods) {
    curves.push_back({name, evaluate_model(trainer, folds, cohort)});
    pooled[name] = curves.back().second.pooled;
  }
  fs::create_directories(out);
  auto table = open_out(out / "loss_table.csv");
  write_loss_table(table, curves);

  if (a.grid != "none") {
    std::vector<Hyperparameters> grid;
    if (a.grid == "phi") {
      const double v[] = {0.1, 0.2, 0.3, 0.4, 0.5};
      grid = tied_phi_grid(v, base);
    } else {
      const double v[] = {0.25, 0.5, 1.0, 2.0, 4.0};
      grid = tied_s_grid(v, base);
    }
    const auto make = [&](const Hyperparameters& h) { return model_trainer({h, sampler, c.seed}); };
    const auto g = grid_search(grid, make, folds, cohort);
    auto sens = open_out(out / "sensitivity.csv");
    write_sensitivity_table(sens, g);
    pooled["grid_best_cell"] = g.best;
  }
  std::cout << pooled.dump() << '\n';
  return 0;
}

// --- predict / serve --------------------------------------------------------

struct PredictArgs {
  std::string posterior;
  std::optional<double> age;
  std::optional<std::size_t> age_bin;
  std::optional<std::size_t> init_bin;
  double S = 1.0;
  std::vector<double> times;
  std::vector<double> quantiles;
  bool noise = false;
};

std::shared_ptr<const LoadedPosterior> open_posterior(const std::string& dir) {
  if (dir.empty()) throw std::invalid_argument("--posterior is required");
  return std::make_shared<const LoadedPosterior>(load_posterior(dir));
}

int run_predict(const PredictArgs& a) {
  const PredictionService service(open_posterior(a.posterior));
  json req = {{"S", a.S}, {"observation_noise", a.noise}};
  if (a.age) req["age"] = *a.age;
  if (a.age_bin) req["age_bin"] = *a.age_bin;
  if (a.init_bin) req["init_bin"] = *a.init_bin;
  if (!a.times.empty()) req["times"] = a.times;
  if (!a.quantiles.empty()) req["quantiles"] = a.quantiles;
  const Reply r = service.predict(req.dump());
  if (r.status != 200) {
    std::cerr << json{{"error", "invalid_request"}, {"fields", r.body.value("fields", json::object())}}.dump() << '\n';
    return kExitError;
  }
  std::cout << r.body.dump() << '\n';
  return 0;
}

httplib::Server* active_server = nullptr;

int run_serve(const std::string& posterior, const std::string& host, int port) {
  PredictionService service;
  if (!posterior.empty()) service.load(open_posterior(posterior));
  auto server = make_http_server(service);
  active_server = server.get();
  std::signal(SIGINT, [](int) {
    if (active_server) active_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (active_server) active_server->stop();
  });
  if (!server->bind_to_port(host, port)) return fail("bind", "cannot listen on " + host + ":" + std::to_string(port));
  std::cout << json{{"listening", host + ":" + std::to_string(port)}}.dump() << std::endl;
  server->listen_after_bind();
  active_server = nullptr;
  return 0;
}

// --- experiment -------------------------------------------------------------

struct ExperimentArgs {
  std::string kind = "recovery";
  std::size_t replications = 3;
  std::size_t warmup = 2500, draws = 2500;
};

int run_experiment(const Common& c, const ExperimentArgs& a) {
  SamplerConfig cfg;
  cfg.n_warmup = a.warmup;
  cfg.n_keep = a.draws;
  ExperimentTable table;
  if (a.kind == "recovery") {
    RecoveryExperimentConfig e;
    e.hyper = hyper_of(c, e.hyper);
    e.replications = a.replications;
    e.seed = c.seed;
    table = recovery_experiment(e, mcmc_fitter(cfg));
  } else {
    NoiseExperimentConfig e;
    e.hyper = hyper_of(c, e.hyper);
    e.base_size = 1000;
    e.seed = c.seed;
    table = noise_experiment(e, mcmc_fitter(cfg));
  }
  const fs::path out(c.out);
  fs::create_directories(out);
  auto csv = open_out(out / (a.kind + ".csv"));
  table.write_csv(csv);
  auto longf = open_out(out / (a.kind + "_long.csv"));
  table.write_long(longf, a.kind);
  return table.unconverged().empty() ? 0 : kExitUnconverged;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian recovery-curve toolkit"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Hyperparameter file (key = value)")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Random seed");
    sub->add_option("--out", common.out, "Output directory");
  };
  auto add_sampler = [](CLI::App* sub, FitArgs& f) {
    sub->add_option("--data", f.data, "Directory with patients.csv and observations.csv")->required();
    sub->add_flag("--no-filter", f.no_filter, "Skip the patient inclusion filters");
    sub->add_option("--chains", f.chains, "Chains");
    sub->add_option("--warmup", f.warmup, "Warmup iterations per chain");
    sub->add_option("--draws", f.draws, "Kept draws per chain");
    sub->add_option("--thinning", f.thinning, "Keep every k-th iteration");
  };

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Write a synthetic study cohort");
  add_common(simulate);
  simulate->add_option("--n", sim.n, "Patients")->check(CLI::PositiveNumber);
  simulate->add_option("--m", sim.m, "Extra uniform-noise patients");

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit the model and write the posterior");
  add_common(fit_cmd);
  add_sampler(fit_cmd, fit);
  fit_cmd->add_flag("--keep-mu", fit.keep_mu, "Use mu_* from the config instead of the average-shape fit");

  CvArgs cv;
  auto* cv_cmd = app.add_subcommand("cv", "Cross-validated loss curves for the model and baselines");
  add_common(cv_cmd);
  add_sampler(cv_cmd, cv.fit);
  cv_cmd->add_option("--folds", cv.folds, "Folds")->check(CLI::Range(2, 1000));
  cv_cmd->add_option("--grid", cv.grid, "Sensitivity sweep")->check(CLI::IsMember({"none", "phi", "s"}));
  cv_cmd->add_flag("--baselines-only", cv.skip_model, "Skip the model");

  PredictArgs pred;
  auto* predict = app.add_subcommand("predict", "Posterior-predictive quantiles for one profile");
  predict->add_option("--posterior", pred.posterior, "Posterior directory")->required();
  auto* age_opt = predict->add_option("--age", pred.age, "Age in years");
  auto* bin_opt = predict->add_option("--age-bin", pred.age_bin, "Age bin (0-2)");
  age_opt->excludes(bin_opt);
  predict->add_option("--init-bin", pred.init_bin, "Init bin (0-3), default from --S");
  predict->add_option("--S", pred.S, "Pre-treatment level in (0,1]")->required();
  predict->add_option("--times", pred.times, "Months")->delimiter(',');
  predict->add_option("--quantiles", pred.quantiles, "Quantile levels")->delimiter(',');
  predict->add_flag("--noise", pred.noise, "Include the observation layer");

  std::string serve_posterior, host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "HTTP service");
  serve->add_option("--posterior", serve_posterior, "Posterior directory");
  serve->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "Bind address");

  ExperimentArgs exp;
  auto* experiment = app.add_subcommand("experiment", "Parameter recovery or noise robustness tables");
  add_common(experiment);
  experiment->add_option("kind", exp.kind, "recovery or noise")->check(CLI::IsMember({"recovery", "noise"}));
  experiment->add_option("--replications", exp.replications, "Replications per size");
  experiment->add_option("--warmup", exp.warmup, "Warmup iterations per chain");
  experiment->add_option("--draws", exp.draws, "Kept draws per chain");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*simulate) return run_simulate(common, sim);
    if (*fit_cmd) return run_fit(common, fit);
    if (*cv_cmd) return run_cv(common, cv);
    if (*predict) return run_predict(pred);
    if (*serve) return run_serve(serve_posterior, host, port);
    if (*experiment) return run_experiment(common, exp);
  } catch (const DataError& e) {
    return fail("data", e.what());
  } catch (const std::invalid_argument& e) {
    return fail("invalid_input", e.what());
  } catch (const std::exception& e) {
    return fail("failed", e.what());
  }
  return kExitError;
}
