#include "asa/api.hpp"

#include <httplib.h>

#include <charconv>
#include <sstream>

#include "asa/log.hpp"

namespace asa::api {

using manager::ApiError;
using manager::Manager;
using manager::RunInfo;

int http_status_for(const std::string& code) {
  static const std::map<std::string, int> table = {
      {"BadJson", 400},           {"UnknownId", 404},          {"UnknownRun", 404},
      {"UnknownTemplate", 404},   {"UnknownBatch", 404},       {"UnknownScenario", 404},
      {"UnknownKind", 404},       {"NotFound", 404},           {"RevisionConflict", 409},
      {"IllegalTransition", 409}, {"NotRoutable", 409},        {"AlreadyExists", 409},
      {"ValidationFailed", 422},  {"BadId", 422},              {"SchemaError", 422},
      {"BadQuery", 422},          {"DuplicateMetric", 422},    {"UnknownReducer", 422},
  };
  auto it = table.find(code);
  return it == table.end() ? 500 : it->second;
}

namespace {

constexpr const char* kJson = "application/json";

void reply(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), kJson);
}

void reply_error(httplib::Response& res, const std::string& code, const std::string& message,
                 const Json& errors = Json::array()) {
  Json body = {{"error", code}, {"message", message}};
  if (!errors.empty()) body["errors"] = errors;
  reply(res, http_status_for(code), body);
}

using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

/// Map exceptions onto the error body shape.
Handler guarded(Handler h) {
  return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
    try {
      h(req, res);
    } catch (const ApiError& e) {
      reply_error(res, e.code(), e.what(), e.errors());
    } catch (const SchemaError& e) {
      reply_error(res, "SchemaError", e.what(), Json::array({{{"code", e.code()}, {"message", e.what()}}}));
    } catch (const Error& e) {
      reply_error(res, e.code(), e.what());
    } catch (const Json::exception& e) {
      reply_error(res, "SchemaError", e.what());
    } catch (const std::exception& e) {
      log::error("api", req.method + " " + req.path + ": " + e.what());
      reply_error(res, "Internal", e.what());
    }
  };
}

Json body_of(const httplib::Request& req) {
  try {
    return Json::parse(req.body);
  } catch (const Json::parse_error& e) {
    throw ApiError("BadJson", std::string("request body is not JSON: ") + e.what());
  }
}

std::optional<std::uint64_t> u64_param(const httplib::Request& req, const std::string& name) {
  if (!req.has_param(name)) return std::nullopt;
  const std::string v = req.get_param_value(name);
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ApiError("BadQuery", "query parameter '" + name + "' must be a non-negative integer");
  }
  return out;
}

bool flag_param(const httplib::Request& req, const std::string& name) {
  if (!req.has_param(name)) return false;
  const auto v = req.get_param_value(name);
  return v.empty() || v == "1" || v == "true";
}

std::set<std::string> tag_param(const httplib::Request& req, const std::string& fallback) {
  const std::string v = req.has_param("tag") ? req.get_param_value("tag") : fallback;
  std::set<std::string> tags;
  if (v == "*" || v.empty()) return tags;
  std::stringstream ss(v);
  std::string t;
  while (std::getline(ss, t, ',')) {
    if (!t.empty()) tags.insert(t);
  }
  return tags;
}

Json entry_json(const store::CatalogEntry& e) { return Json(e); }

Json run_summary(const RunInfo& r) {
  return {{"run_id", r.run_id},     {"state", manager::to_string(r.state)},
          {"node_id", r.node_id.empty() ? Json(nullptr) : Json(r.node_id)},
          {"attempts", r.attempts}, {"reason", r.reason},
          {"speed_factor", r.speed_factor}};
}

Json records_json(const std::vector<StepRecord>& records) {
  Json out = Json::array();
  for (const auto& r : records) out.push_back(r);
  return out;
}

}  // namespace

struct ApiServer::Impl {
  Manager& m;
  ApiOptions options;
  httplib::Server svr;

  Impl(Manager& manager, ApiOptions o) : m(manager), options(std::move(o)) {}

  void document_routes(const std::string& plural, const std::string& kind) {
    const bool is_template = kind == "template";
    auto put = [this, is_template](const std::optional<std::string>& id, const Json& body,
                                   std::optional<std::uint64_t> rev) {
      return is_template ? m.put_template(id, body, rev) : m.put_scenario(id, body, rev);
    };
    svr.Post("/" + plural, guarded([put](const httplib::Request& req, httplib::Response& res) {
               std::optional<std::string> id;
               if (req.has_param("id")) id = req.get_param_value("id");
               reply(res, 201, entry_json(put(id, body_of(req), 0)));
             }));
    svr.Get("/" + plural, guarded([this, kind](const httplib::Request& req, httplib::Response& res) {
              Json out = Json::array();
              const std::string prefix = req.has_param("prefix") ? req.get_param_value("prefix") : "";
              for (const auto& e : m.catalog().list(kind, prefix, flag_param(req, "include_deleted"))) {
                out.push_back(entry_json(e));
              }
              reply(res, 200, out);
            }));
    const std::string item = "/" + plural + "/([^/]+)";
    svr.Get(item, guarded([this, kind](const httplib::Request& req, httplib::Response& res) {
              reply(res, 200, entry_json(m.catalog().get(kind, req.matches[1], flag_param(req, "include_deleted"))));
            }));
    svr.Put(item, guarded([put](const httplib::Request& req, httplib::Response& res) {
              reply(res, 200, entry_json(put(std::string(req.matches[1]), body_of(req), u64_param(req, "revision"))));
            }));
    svr.Delete(item, guarded([this, kind](const httplib::Request& req, httplib::Response& res) {
                 reply(res, 200, entry_json(m.catalog().remove(kind, req.matches[1], u64_param(req, "revision"))));
               }));
  }

  void stream(const httplib::Request& req, httplib::Response& res) {
    const std::string run_id = req.matches[1];
    if (!m.run(run_id)) throw ApiError("UnknownRun", "run '" + run_id + "' not found");
    struct Cursor {
      std::uint64_t next_step = 0;
      std::string last_state;
      bool done = false;
    };
    auto cursor = std::make_shared<Cursor>();
    if (auto from = u64_param(req, "from_step")) cursor->next_step = *from;
    if (req.has_header("Last-Event-ID")) {
      try {
        cursor->next_step = std::stoull(req.get_header_value("Last-Event-ID")) + 1;
      } catch (const std::exception&) {
      }
    }
    const auto tags = tag_param(req, "status");
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream", [this, run_id, cursor, tags](std::size_t, httplib::DataSink& sink) {
          auto write = [&](const std::string& s) { return sink.write(s.data(), s.size()); };
          if (cursor->done) {
            sink.done();
            return true;
          }
          const std::uint64_t seen = m.version();
          const auto run = m.run(run_id);
          if (!run) {
            sink.done();
            return true;
          }
          const std::string state = run_summary(*run).dump();
          if (state != cursor->last_state) {
            cursor->last_state = state;
            if (!write("event: state\ndata: " + state + "\n\n")) return false;
          }
          if (run->through_step >= 0 && static_cast<std::uint64_t>(run->through_step) >= cursor->next_step) {
            std::vector<StepRecord> recs;
            try {
              recs = m.records().read(run_id, run->attempts, cursor->next_step,
                                      static_cast<std::uint64_t>(run->through_step), tags);
            } catch (const Error& e) {
              log::warn("api", "stream " + run_id + ": " + e.what());
            }
            std::size_t i = 0;
            while (i < recs.size()) {
              std::size_t j = i;
              Json step = Json::array();
              while (j < recs.size() && recs[j].step == recs[i].step) step.push_back(recs[j++]);
              if (!write("event: records\nid: " + std::to_string(recs[i].step) + "\ndata: " + step.dump() + "\n\n")) {
                return false;
              }
              i = j;
            }
            cursor->next_step = static_cast<std::uint64_t>(run->through_step) + 1;
          }
          if (manager::is_terminal(run->state)) {
            cursor->done = true;
            write("event: end\ndata: " + state + "\n\n");
            sink.done();
            return true;
          }
          if (m.wait_for_change(seen, std::chrono::milliseconds(1000)) == seen) {
            if (!write(": keepalive\n\n")) return false;
          }
          return true;
        });
  }

  void routes() {
    document_routes("scenarios", "scenario");
    document_routes("templates", "template");

    svr.Post("/batches", guarded([this](const httplib::Request& req, httplib::Response& res) {
               reply(res, 201, m.batch_json(m.submit_batch(body_of(req))));
             }));
    svr.Get("/batches", guarded([this](const httplib::Request&, httplib::Response& res) {
              Json out = Json::array();
              for (const auto& b : m.batches()) out.push_back(m.batch_json(b));
              reply(res, 200, out);
            }));
    svr.Get("/batches/([^/]+)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              auto b = m.batch(req.matches[1]);
              if (!b) throw ApiError("UnknownBatch", "batch '" + std::string(req.matches[1]) + "' not found");
              Json j = m.batch_json(*b);
              Json runs = Json::array();
              for (const auto& r : m.runs(b->batch_id)) runs.push_back(manager::to_json(r, false));
              j["runs"] = runs;
              reply(res, 200, j);
            }));
    svr.Post("/batches/([^/]+)/analysis", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const auto metrics = analysis::metrics_from_json(body_of(req));
               std::vector<std::string> warnings;
               const auto summary = m.analyze(req.matches[1], metrics, &warnings);
               const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
               if (format == "csv") {
                 const bool table = req.has_param("table") && req.get_param_value("table") == "summary";
                 res.status = 200;
                 res.set_content(table ? analysis::summary_csv(summary) : analysis::runs_csv(summary), "text/csv");
               } else if (format == "json") {
                 reply(res, 200, {{"summary", analysis::to_json(summary)}, {"warnings", warnings}});
               } else {
                 throw ApiError("BadQuery", "format must be csv or json");
               }
             }));

    svr.Post("/runs", guarded([this](const httplib::Request& req, httplib::Response& res) {
               reply(res, 201, manager::to_json(m.submit_run(body_of(req)), false));
             }));
    svr.Get("/runs", guarded([this](const httplib::Request& req, httplib::Response& res) {
              std::optional<manager::RunState> state;
              if (req.has_param("state")) {
                try {
                  state = manager::run_state_from_string(req.get_param_value("state"));
                } catch (const Error& e) {
                  throw ApiError("BadQuery", e.what());
                }
              }
              const std::string batch = req.has_param("batch") ? req.get_param_value("batch") : "";
              Json out = Json::array();
              for (const auto& r : m.runs(batch, state)) out.push_back(manager::to_json(r, false));
              reply(res, 200, out);
            }));
    svr.Get("/runs/([^/]+)", guarded([this](const httplib::Request& req, httplib::Response& res) {
              auto r = m.run(req.matches[1]);
              if (!r) throw ApiError("UnknownRun", "run '" + std::string(req.matches[1]) + "' not found");
              Json j = manager::to_json(*r, flag_param(req, "full"));
              j["attempts_stored"] = m.records().attempts(r->run_id);
              reply(res, 200, j);
            }));
    svr.Post("/runs/([^/]+)/control", guarded([this](const httplib::Request& req, httplib::Response& res) {
               const Json body = body_of(req);
               if (!body.is_object() || !body.contains("command")) {
                 throw ApiError("ValidationFailed", "body must be {\"command\": ...}");
               }
               const auto command = protocol::command_from_json(body["command"]);
               reply(res, 200, manager::to_json(m.control(req.matches[1], command), false));
             }));
    svr.Get("/runs/([^/]+)/records", guarded([this](const httplib::Request& req, httplib::Response& res) {
              const std::string run_id = req.matches[1];
              if (!m.run(run_id)) throw ApiError("UnknownRun", "run '" + run_id + "' not found");
              const auto attempt = u64_param(req, "attempt");
              if (m.records().attempts(run_id).empty() && !attempt) {
                reply(res, 200, Json::array());
                return;
              }
              const auto from = u64_param(req, "from_step").value_or(0);
              const auto to = u64_param(req, "to_step").value_or(UINT64_MAX);
              std::optional<std::uint32_t> a;
              if (attempt) a = static_cast<std::uint32_t>(*attempt);
              reply(res, 200, records_json(m.records().read(run_id, a, from, to, tag_param(req, ""))));
            }));
    svr.Get("/runs/([^/]+)/stream", guarded([this](const httplib::Request& req, httplib::Response& res) {
              stream(req, res);
            }));

    svr.Get("/nodes", guarded([this](const httplib::Request&, httplib::Response& res) {
              reply(res, 200, m.nodes_json());
            }));
    svr.Get("/transitions", guarded([this](const httplib::Request& req, httplib::Response& res) {
              Json out = Json::array();
              for (auto& t : m.transitions(u64_param(req, "since").value_or(0))) out.push_back(std::move(t));
              reply(res, 200, out);
            }));
    svr.Get("/models", guarded([this](const httplib::Request&, httplib::Response& res) {
              Json out = Json::array();
              for (const auto& mf : m.manifests()) out.push_back(mf);
              reply(res, 200, out);
            }));
    svr.Post("/extensions/reload", guarded([this](const httplib::Request&, httplib::Response& res) {
               reply(res, 200, {{"failures", m.reload_extensions()}});
             }));
    svr.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"status", "ok"}}); });

    if (options.ui_dir) {
      if (!svr.set_mount_point("/ui", options.ui_dir->string())) {
        throw Error("BadConfig", "ui directory '" + options.ui_dir->string() + "' does not exist");
      }
      svr.Get("/ui", [](const httplib::Request&, httplib::Response& res) { res.set_redirect("/ui/"); });
    }
    svr.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (res.status == 404 && res.body.empty()) reply_error(res, "NotFound", "no route for " + req.path);
    });
  }
};

ApiServer::ApiServer(Manager& manager, ApiOptions options) : impl_(std::make_unique<Impl>(manager, std::move(options))) {
  const std::size_t threads = impl_->options.threads;
  impl_->svr.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  impl_->routes();
}

ApiServer::~ApiServer() { stop(); }

void ApiServer::start() {
  const auto& ep = impl_->options.http;
  const std::string host = ep.host.empty() ? "0.0.0.0" : ep.host;
  int port = ep.port;
  if (port == 0) {
    port = impl_->svr.bind_to_any_port(host);
  } else if (!impl_->svr.bind_to_port(host, port)) {
    port = -1;
  }
  if (port <= 0) throw Error("BindFailed", "cannot bind HTTP on " + host + ":" + std::to_string(ep.port));
  port_ = static_cast<std::uint16_t>(port);
  thread_ = std::thread([this] { impl_->svr.listen_after_bind(); });
  impl_->svr.wait_until_ready();
  log::info("api", "http port " + std::to_string(port_));
}

void ApiServer::stop() {
  if (thread_.joinable()) {
    impl_->svr.stop();
    thread_.join();
  }
}

}  // namespace asa::api
