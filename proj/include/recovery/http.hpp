#pragma once

// Binds PredictionService handlers to an httplib server.

#include <memory>

#include "httplib.h"
#include "recovery/service.hpp"

namespace recovery {

inline void send(httplib::Response& res, const Reply& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

inline std::unique_ptr<httplib::Server> make_http_server(const PredictionService& service) {
  auto server = std::make_unique<httplib::Server>();
  server->Get("/health", [&service](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
  server->Get("/classes", [&service](const httplib::Request&, httplib::Response& res) { send(res, service.classes()); });
  server->Post("/predict", [&service](const httplib::Request& req, httplib::Response& res) {
    send(res, service.predict(req.body));
  });
  // The web client is served from another origin.
  server->set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  server->Options("/predict", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  server->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    } catch (...) {
    }
    send(res, {500, {{"error", msg}}});
  });
  return server;
}

}  // namespace recovery
