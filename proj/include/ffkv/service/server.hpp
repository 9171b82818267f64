#pragma once

#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ffkv/service/store.hpp"

namespace ffkv {

// HTTP front end over an AnnotationStore. Routes:
//   POST /sessions                      create a session, returns its id
//   GET  /sessions/{id}/cards           card ids in presentation order
//   GET  /cards/{id}                    one card
//   POST /annotations                   {session, card, answer, annotator}
//   GET  /sessions/{id}/stats?partial=  tables; closes the session
//   GET  /sessions/{id}/reveal          provenance, complete sessions only
class AnnotationServer {
 public:
  explicit AnnotationServer(AnnotationStore& store) : store_(store) { routes(); }

  int bind_any(const std::string& host = "127.0.0.1") { return srv_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return srv_.bind_to_port(host, port); }
  bool listen_after_bind() { return srv_.listen_after_bind(); }
  void wait_until_ready() { srv_.wait_until_ready(); }
  void stop() { srv_.stop(); }

 private:
  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      res.set_content(f().dump(), "application/json");
    } catch (const ServiceError& e) {
      res.status = e.status;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
    } catch (const nlohmann::json::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", std::string("bad JSON: ") + e.what()}}.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
    }
  }

  void routes() {
    srv_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        res.status = 201;
        return store_.create_session(nlohmann::json::parse(req.body).get<SessionRequest>());
      });
    });
    srv_.Get(R"(/sessions/([A-Za-z0-9]+)/cards)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return store_.list_cards(req.matches[1]); });
    });
    srv_.Get(R"(/cards/([A-Za-z0-9]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return store_.get_card(req.matches[1]); });
    });
    srv_.Post("/annotations", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return store_.submit(nlohmann::json::parse(req.body)); });
    });
    srv_.Get(R"(/sessions/([A-Za-z0-9]+)/stats)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto p = req.get_param_value("partial");
        if (!p.empty() && p != "true" && p != "false") throw bad_request("partial must be true or false");
        return store_.stats(req.matches[1], p == "true");
      });
    });
    srv_.Get(R"(/sessions/([A-Za-z0-9]+)/reveal)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return store_.reveal(req.matches[1]); });
    });
    srv_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) res.set_content(nlohmann::json{{"error", "no such route"}}.dump(), "application/json");
    });
  }

  AnnotationStore& store_;
  httplib::Server srv_;
};

}  // namespace ffkv
