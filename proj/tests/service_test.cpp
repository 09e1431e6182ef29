#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "recovery/http.hpp"
#include "recovery/posterior_io.hpp"
#include "recovery/service.hpp"
#include "recovery/simulate.hpp"

using namespace recovery;
namespace fs = std::filesystem;

namespace {

// A posterior over the 12-class encoding with draws scattered around the
// study truth; no sampling involved.
FitResult synthetic_fit(std::uint64_t seed) {
  const Hyperparameters h;
  const auto names = shared_parameter_names(kFeatures, h);
  const SharedParams truth = study_truth();
  FitResult fit{PosteriorSamples(names, 2, 300), h, kFeatures};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t d = 0; d < 300; ++d) {
      for (std::size_t j = 0; j < names.size(); ++j) {
        const double v = shared_value(truth, names[j]);
        const bool coefficient = names[j].rfind("b_", 0) == 0;
        fit.samples.at(c, d, j) = coefficient ? v + jitter(rng) : std::clamp(v * (1.0 + jitter(rng)), 1e-3, 0.999);
      }
    }
  }
  for (const auto& n : names) {
    fit.samples.rhat_names.push_back(n);
    fit.samples.rhat_values.push_back(1.01);
  }
  fit.samples.acceptance.push_back({"b_A", 0.41});
  return fit;
}

FeatureSpec synthetic_features() {
  StudySpec spec;
  spec.n_patients = 60;
  return simulate_study(spec).features;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("recovery_service_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::shared_ptr<const LoadedPosterior> loaded(const std::string& name) {
  const auto dir = scratch_dir(name);
  save_posterior(dir, synthetic_fit(1), synthetic_features(), 60);
  auto p = std::make_shared<const LoadedPosterior>(load_posterior(dir));
  fs::remove_all(dir);
  return p;
}

}  // namespace

TEST(PosteriorFiles, RoundTrip) {
  const auto dir = scratch_dir("roundtrip");
  const FitResult fit = synthetic_fit(2);
  const FeatureSpec f = synthetic_features();
  const std::string id = save_posterior(dir, fit, f, 60);
  EXPECT_EQ(id.size(), 16u);
  const StoredPosterior p = load_posterior(dir);
  EXPECT_EQ(p.fit_id, id);
  EXPECT_EQ(p.K, kFeatures);
  EXPECT_EQ(p.n_train, 60u);
  EXPECT_EQ(p.samples.names(), fit.samples.names());
  ASSERT_EQ(p.samples.n_draws(), 300u);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t d = 0; d < 300; d += 37) {
      for (std::size_t j = 0; j < p.samples.n_params(); ++j) EXPECT_EQ(p.samples.at(c, d, j), fit.samples.at(c, d, j));
    }
  }
  EXPECT_EQ(p.features.mean, f.mean);
  EXPECT_EQ(p.features.sd, f.sd);
  EXPECT_FALSE(p.hyper.phi_A.has_value());
  EXPECT_EQ(p.hyper.mu_C, fit.hyper.mu_C);
  EXPECT_DOUBLE_EQ(p.samples.max_r_hat(), 1.01);

  // One line per kept draw, each with chain, iteration and named values.
  std::ifstream in(dir / "draws.ndjson");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const json rec = json::parse(line);
    EXPECT_TRUE(rec.contains("chain") && rec.contains("iteration") && rec.at("values").contains("theta"));
    ++lines;
  }
  EXPECT_EQ(lines, 600u);

  // Same draws, same id.
  const auto dir2 = scratch_dir("roundtrip2");
  EXPECT_EQ(save_posterior(dir2, fit, f, 60), id);
  EXPECT_NE(save_posterior(dir2, synthetic_fit(3), f, 60), id);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(PosteriorFiles, DamagedFilesAreRejected) {
  const auto dir = scratch_dir("damaged");
  save_posterior(dir, synthetic_fit(2), synthetic_features(), 60);
  {
    std::ofstream trunc(dir / "draws.ndjson", std::ios::app);
    trunc << "{\"chain\": 0, \"iteration\": 9, \"values\": {}}\n";
  }
  EXPECT_THROW(load_posterior(dir), std::runtime_error);
  { std::ofstream(dir / "summary.json") << "{"; }
  EXPECT_THROW(load_posterior(dir), std::runtime_error);
  fs::remove_all(dir);
  EXPECT_THROW(load_posterior(dir), std::runtime_error);
}

TEST(Service, HealthAndClassesWithoutPosterior) {
  const PredictionService s;
  const Reply h = s.health();
  EXPECT_EQ(h.status, 200);
  EXPECT_FALSE(h.body.at("posterior_loaded").get<bool>());
  const Reply c = s.classes();
  ASSERT_EQ(c.body.at("classes").size(), 12u);
  EXPECT_EQ(c.body.at("age_edges"), json({55.0, 65.0}));
  EXPECT_EQ(c.body.at("init_edges"), json({0.41, 0.60, 0.80}));
  const json& first = c.body.at("classes").at(0);
  EXPECT_EQ(first.at("age_range"), json::array({nullptr, 55.0}));
  const json& last = c.body.at("classes").at(11);
  EXPECT_EQ(last.at("age_bin"), 2);
  EXPECT_EQ(last.at("init_bin"), 3);
  EXPECT_EQ(last.at("init_range"), json::array({0.8, nullptr}));
  const Reply p = s.predict(R"({"S": 0.5, "age": 60})");
  EXPECT_EQ(p.status, 409);
}

TEST(Service, FieldLevelValidation) {
  const PredictionService s(loaded("validation"));
  auto fields = [&](const std::string& body) {
    const Reply r = s.predict(body);
    EXPECT_EQ(r.status, 400) << body;
    return r.body.value("fields", json::object());
  };
  EXPECT_TRUE(fields("not json").contains("body"));
  EXPECT_TRUE(fields("[1, 2]").contains("body"));
  EXPECT_TRUE(fields(R"({"age": 60})").contains("S"));
  EXPECT_TRUE(fields(R"({"age": 60, "S": 0})").contains("S"));
  EXPECT_TRUE(fields(R"({"age": 60, "S": 1.2})").contains("S"));
  EXPECT_TRUE(fields(R"({"age": 60, "S": "high"})").contains("S"));
  EXPECT_TRUE(fields(R"({"S": 0.5})").contains("age"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age": -3})").contains("age"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age": 60, "age_bin": 1})").contains("age"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age_bin": 3})").contains("age_bin"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age_bin": 1, "init_bin": 4})").contains("init_bin"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age": 60, "times": [4, 2]})").contains("times"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age": 60, "times": [-1, 2]})").contains("times"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age": 60, "times": []})").contains("times"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age": 60, "quantiles": [0.5, 1.5]})").contains("quantiles"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age": 60, "quantiles": [0.9, 0.1]})").contains("quantiles"));
  EXPECT_TRUE(fields(R"({"S": 0.5, "age": 60, "observation_noise": 1})").contains("observation_noise"));
  // Several problems are reported together.
  EXPECT_EQ(fields(R"({"S": 2, "times": [3, 1]})").size(), 3u);
}

TEST(Service, PredictionEnvelopeAndOrdering) {
  const auto post = loaded("predict");
  const PredictionService s(post);
  const Reply r = s.predict(R"({"S": 0.8, "age": 61, "times": [0, 1, 2, 6, 12, 24, 48]})");
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body.at("fit_id"), post->stored.fit_id);
  // 0.8 sits on an edge and belongs to the upper bin.
  EXPECT_EQ(r.body.at("class").at("id"), class_id(1, 3));
  EXPECT_EQ(r.body.at("quantiles"), json({0.1, 0.25, 0.5, 0.75, 0.9}));
  const auto values = r.body.at("values").get<std::vector<std::vector<double>>>();
  ASSERT_EQ(values.size(), 7u);
  for (double v : values[0]) EXPECT_EQ(v, 0.8);
  for (std::size_t t = 0; t < values.size(); ++t) {
    for (std::size_t q = 0; q < values[t].size(); ++q) {
      EXPECT_GE(values[t][q], 0.0);
      EXPECT_LE(values[t][q], 0.8);
      if (q > 0) {
        EXPECT_GE(values[t][q], values[t][q - 1]);
      }
      if (t > 1) {
        EXPECT_GE(values[t][q], values[t - 1][q]);
      }
    }
  }
  // Exactly S at t = 0 for the median alone.
  const Reply m = s.predict(R"({"S": 0.37, "age_bin": 0, "times": [0, 3], "quantiles": [0.5]})");
  ASSERT_EQ(m.status, 200);
  EXPECT_EQ(m.body.at("values").at(0).at(0).get<double>(), 0.37);
  // init_bin overrides the bin implied by S.
  const Reply o = s.predict(R"({"S": 0.37, "age_bin": 2, "init_bin": 3})");
  EXPECT_EQ(o.body.at("class").at("id"), class_id(2, 3));
}

TEST(Service, ObservationNoiseStaysInsideTheEnvelope) {
  const PredictionService s(loaded("noise"));
  const Reply latent = s.predict(R"({"S": 0.6, "age": 70, "quantiles": [0.05, 0.5, 0.95]})");
  const Reply noisy = s.predict(R"({"S": 0.6, "age": 70, "quantiles": [0.05, 0.5, 0.95], "observation_noise": true})");
  ASSERT_EQ(noisy.status, 200);
  EXPECT_TRUE(noisy.body.at("observation_noise").get<bool>());
  const auto a = latent.body.at("values").get<std::vector<std::vector<double>>>();
  const auto b = noisy.body.at("values").get<std::vector<std::vector<double>>>();
  for (std::size_t t = 1; t < b.size(); ++t) {
    for (double v : b[t]) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 0.6);
    }
    // The observation layer widens the band.
    EXPECT_GE(b[t][2] - b[t][0], a[t][2] - a[t][0]);
  }
}

TEST(Service, ConcurrentIdenticalRequestsAgree) {
  const PredictionService s(loaded("concurrent"));
  const std::string body = R"({"S": 0.9, "age": 50, "times": [1, 12, 48]})";
  const std::string expected = s.predict(body).body.dump();
  std::vector<std::string> got(8);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < got.size(); ++i) {
    threads.emplace_back([&, i] { got[i] = s.predict(body).body.dump(); });
  }
  for (auto& t : threads) t.join();
  for (const auto& g : got) EXPECT_EQ(g, expected);
}

TEST(Service, SwappingThePosteriorChangesTheFitId) {
  PredictionService s(loaded("swap_a"));
  const auto before = s.health().body.at("fit_id");
  const auto dir = scratch_dir("swap_b");
  save_posterior(dir, synthetic_fit(9), synthetic_features(), 60);
  s.load(std::make_shared<const LoadedPosterior>(load_posterior(dir)));
  fs::remove_all(dir);
  EXPECT_NE(s.health().body.at("fit_id"), before);
  EXPECT_EQ(s.predict(R"({"S": 0.5, "age": 60})").body.at("fit_id"), s.health().body.at("fit_id"));
}

TEST(Http, RoundTrip) {
  const PredictionService s(loaded("http"));
  auto server = make_http_server(s);
  const int port = server->bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread listener([&] { server->listen_after_bind(); });
  server->wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  const auto health = client.Get("/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_TRUE(json::parse(health->body).at("posterior_loaded").get<bool>());

  const auto classes = client.Get("/classes");
  ASSERT_TRUE(classes);
  EXPECT_EQ(json::parse(classes->body).at("classes").size(), 12u);

  const std::string body = R"({"S": 0.8, "age": 58, "times": [0, 6, 48], "quantiles": [0.5]})";
  const auto pred = client.Post("/predict", body, "application/json");
  ASSERT_TRUE(pred);
  EXPECT_EQ(pred->status, 200);
  EXPECT_EQ(pred->get_header_value("Content-Type"), "application/json");
  EXPECT_EQ(json::parse(pred->body), s.predict(body).body);

  const auto bad = client.Post("/predict", R"({"S": 3, "age": 58})", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_TRUE(json::parse(bad->body).at("fields").contains("S"));

  server->stop();
  listener.join();
}

TEST(Http, ConflictWithoutPosterior) {
  const PredictionService s;
  auto server = make_http_server(s);
  const int port = server->bind_to_any_port("127.0.0.1");
  std::thread listener([&] { server->listen_after_bind(); });
  server->wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  const auto r = client.Post("/predict", R"({"S": 0.5, "age": 60})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 409);
  server->stop();
  listener.join();
}
