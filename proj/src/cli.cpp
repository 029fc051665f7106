#include "asa/cli.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "asa/analysis.hpp"
#include "asa/json.hpp"

namespace asa::cli {

namespace {

/// Non-zero exit with a message already written.
struct Abort {
  int code;
};

struct Session {
  std::string base;
  bool json = false;
  std::ostream& out;
  std::ostream& err;

  httplib::Client client() const {
    httplib::Client c(base);
    c.set_connection_timeout(5, 0);
    c.set_read_timeout(60, 0);
    return c;
  }

  Json check(const httplib::Result& res, const std::string& what) const {
    if (!res) {
      err << "asa: cannot reach manager at " << base << " (" << httplib::to_string(res.error()) << ")\n";
      throw Abort{kTransport};
    }
    if (res->status >= 400) {
      err << "asa: " << what << " failed: HTTP " << res->status << "\n" << res->body << "\n";
      throw Abort{kServerError};
    }
    if (res->body.empty()) return Json();
    try {
      return Json::parse(res->body);
    } catch (const Json::parse_error&) {
      return Json(res->body);
    }
  }

  Json get(const std::string& path) const { return check(client().Get(path), "GET " + path); }
  Json post(const std::string& path, const Json& body) const {
    return check(client().Post(path, body.dump(), "application/json"), "POST " + path);
  }
  Json put(const std::string& path, const Json& body) const {
    return check(client().Put(path, body.dump(), "application/json"), "PUT " + path);
  }
  Json del(const std::string& path) const { return check(client().Delete(path), "DELETE " + path); }
};

std::string normalize_base(std::string url) {
  if (url.find("://") == std::string::npos) url = "http://" + url;
  while (!url.empty() && url.back() == '/') url.pop_back();
  if (url.rfind("http://:", 0) == 0) url = "http://127.0.0.1" + url.substr(7);
  return url;
}

Json read_json_file(const std::string& path, std::ostream& err) {
  std::ifstream in(path);
  if (!in) {
    err << "asa: cannot read " << path << "\n";
    throw Abort{kUsage};
  }
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    err << "asa: " << path << " is not JSON: " << e.what() << "\n";
    throw Abort{kUsage};
  }
}

std::string text_of(const Json& v) {
  if (v.is_null()) return "-";
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

/// Left-aligned columns; widths from the content.
void table(std::ostream& out, const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      out << r[c];
      if (c + 1 < r.size()) out << std::string(width[c] - r[c].size() + 2, ' ');
    }
    out << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
}

std::string query_escape(const std::string& s) {
  std::ostringstream o;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~' || c == ',') {
      o << c;
    } else {
      o << '%' << std::uppercase << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c);
    }
  }
  return o.str();
}

void print_entries(const Session& s, const Json& entries) {
  if (s.json) {
    s.out << entries.dump() << "\n";
    return;
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : entries) {
    rows.push_back({e["id"], std::to_string(e["revision"].get<std::uint64_t>()), text_of(e["updated"])});
  }
  table(s.out, {"ID", "REVISION", "UPDATED"}, rows);
}

void print_entry(const Session& s, const Json& e) {
  if (s.json) {
    s.out << e.dump() << "\n";
  } else {
    s.out << e["kind"].get<std::string>() << " " << e["id"].get<std::string>() << " revision "
          << e["revision"].get<std::uint64_t>() << "\n";
  }
}

std::string progress(const Json& r) {
  const auto through = r["through_step"].get<std::int64_t>();
  return std::to_string(through < 0 ? 0 : through) + "/" + std::to_string(r["max_steps"].get<std::uint64_t>());
}

void print_runs(const Session& s, const Json& runs) {
  if (s.json) {
    s.out << runs.dump() << "\n";
    return;
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : runs) {
    rows.push_back({r["run_id"], r["state"], text_of(r["node_id"]), std::to_string(r["attempts"].get<int>()),
                    progress(r), r["reason"]});
  }
  table(s.out, {"RUN", "STATE", "NODE", "ATTEMPTS", "STEP", "REASON"}, rows);
}

void print_run(const Session& s, const Json& r) {
  if (s.json) {
    s.out << r.dump() << "\n";
    return;
  }
  s.out << r["run_id"].get<std::string>() << " " << r["state"].get<std::string>();
  if (!r["node_id"].is_null()) s.out << " on " << r["node_id"].get<std::string>();
  s.out << " attempt " << r["attempts"] << " step " << progress(r);
  if (!r["reason"].get<std::string>().empty()) s.out << " (" << r["reason"].get<std::string>() << ")";
  s.out << "\n";
}

void print_batch(const Session& s, const Json& b) {
  if (s.json) {
    s.out << b.dump() << "\n";
    return;
  }
  s.out << "batch " << b["batch_id"].get<std::string>() << " template " << b["template_id"].get<std::string>()
        << " runs " << b["size"] << (b["complete"].get<bool>() ? " complete" : "") << "\n";
  std::string counts;
  for (const auto& [state, n] : b["rollup"].items()) {
    if (n.get<std::size_t>() > 0) counts += "  " + state + "=" + std::to_string(n.get<std::size_t>());
  }
  if (!counts.empty()) s.out << counts.substr(2) << "\n";
}

/// Follow the run's event stream, printing each state change.
int watch(const Session& s, const std::string& run_id) {
  std::string buffer;
  std::string last_state;
  bool ended = false;
  auto handle_event = [&](const std::string& event, const std::string& data) {
    if (event == "state" || event == "end") {
      const Json st = Json::parse(data);
      const std::string state = st["state"];
      if (state != last_state) {
        last_state = state;
        if (s.json) {
          s.out << st.dump() << "\n";
        } else {
          s.out << run_id << " " << state;
          if (!st["reason"].get<std::string>().empty()) s.out << " (" << st["reason"].get<std::string>() << ")";
          s.out << "\n";
        }
        s.out.flush();
      }
      if (event == "end") ended = true;
    }
  };
  auto c = s.client();
  c.set_read_timeout(3600, 0);
  std::string status_body;
  int status = 0;
  auto res = c.Get(
      "/runs/" + run_id + "/stream",
      [&](const httplib::Response& r) {
        status = r.status;
        return true;
      },
      [&](const char* data, std::size_t n) {
        if (status >= 400) {
          status_body.append(data, n);
          return true;
        }
        buffer.append(data, n);
        std::size_t pos;
        while ((pos = buffer.find("\n\n")) != std::string::npos) {
          const std::string block = buffer.substr(0, pos);
          buffer.erase(0, pos + 2);
          std::string event, payload;
          std::istringstream lines(block);
          std::string line;
          while (std::getline(lines, line)) {
            if (line.rfind("event: ", 0) == 0) event = line.substr(7);
            if (line.rfind("data: ", 0) == 0) payload += line.substr(6);
          }
          if (!event.empty() && !payload.empty()) handle_event(event, payload);
        }
        return true;
      });
  if (!res) {
    s.err << "asa: stream from " << s.base << " failed (" << httplib::to_string(res.error()) << ")\n";
    return kTransport;
  }
  if (res->status >= 400) {
    s.err << "asa: watch failed: HTTP " << res->status << "\n" << (status_body.empty() ? res->body : status_body) << "\n";
    return kServerError;
  }
  if (!ended) {
    s.err << "asa: stream closed before the run finished\n";
    return kTransport;
  }
  return kOk;
}

Json control_command(const std::vector<std::string>& words, std::ostream& err) {
  auto usage = [&]() -> Json {
    err << "asa: control expects play|pause|resume|stop|speed F|set AGENT PATH VALUE\n";
    throw Abort{kUsage};
  };
  if (words.empty()) return usage();
  const std::string& verb = words[0];
  if (verb == "play" || verb == "pause" || verb == "resume" || verb == "stop") {
    if (words.size() != 1) return usage();
    return verb;
  }
  if (verb == "speed") {
    if (words.size() != 2) return usage();
    double f = 0;
    try {
      std::size_t used = 0;
      f = std::stod(words[1], &used);
      if (used != words[1].size()) return usage();
    } catch (const std::exception&) {
      return usage();
    }
    return Json{{"type", "set_speed"}, {"factor", f}};
  }
  if (verb == "set") {
    if (words.size() != 4) return usage();
    Json value;
    try {
      value = Json::parse(words[3]);
    } catch (const Json::parse_error&) {
      value = words[3];
    }
    // Short paths are relative to the agent: "speed_mps" or "params.speed_mps".
    std::string path = words[2];
    if (path.rfind("agents.", 0) != 0) {
      path = "agents." + words[1] + "." + (path.rfind("params.", 0) == 0 ? path : "params." + path);
    }
    return Json{{"type", "set_param"}, {"agent_id", words[1]}, {"param_path", path}, {"value", value}};
  }
  return usage();
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const std::string& env_manager) {
  CLI::App app{"Operator client for the simulation manager", "asa"};
  app.require_subcommand(1);
  std::string manager_url;
  bool json = false;
  app.add_option("--manager", manager_url, "Manager HTTP address (default ASA_MANAGER or http://127.0.0.1:8080)");
  app.add_flag("--json", json, "Print canonical JSON instead of tables");

  // Documents.
  std::string file, id, prefix;
  auto* scenario = app.add_subcommand("scenario", "Scenario documents")->require_subcommand(1);
  auto* template_cmd = app.add_subcommand("template", "Scenario templates")->require_subcommand(1);
  struct DocCommands {
    CLI::App* add;
    CLI::App* get;
    CLI::App* list;
    CLI::App* rm;
  };
  auto doc_commands = [&](CLI::App* parent, bool removable) {
    DocCommands d{};
    d.add = parent->add_subcommand("add", "Create from a JSON file");
    d.add->add_option("file", file, "JSON file")->required();
    d.add->add_option("--id", id, "Document id (default: the name inside the file)");
    d.get = parent->add_subcommand("get", "Print one document");
    d.get->add_option("id", id)->required();
    d.list = parent->add_subcommand("list", "List documents");
    d.list->add_option("--prefix", prefix);
    if (removable) {
      d.rm = parent->add_subcommand("rm", "Delete (tombstone) a document");
      d.rm->add_option("id", id)->required();
    }
    return d;
  };
  const DocCommands scen = doc_commands(scenario, true);
  const DocCommands tmpl = doc_commands(template_cmd, false);

  // Batches.
  auto* batch = app.add_subcommand("batch", "Batches")->require_subcommand(1);
  auto* submit = batch->add_subcommand("submit", "Submit a batch from a template");
  std::string template_id, bindings_file, factorial_file, ranges_file;
  std::size_t lhs_n = 0;
  std::uint64_t batch_seed = 0, lhs_seed = 0;
  double speed = 0.0;
  submit->add_option("--template", template_id, "Template id")->required();
  auto* opt_bindings = submit->add_option("--bindings", bindings_file, "JSON list of binding objects");
  auto* opt_factorial = submit->add_option("--factorial", factorial_file, "JSON factor levels");
  auto* opt_lhs = submit->add_option("--lhs", lhs_n, "Latin hypercube sample count");
  auto* opt_ranges = submit->add_option("--ranges", ranges_file, "JSON ranges for --lhs");
  submit->add_option("--lhs-seed", lhs_seed, "Seed of the Latin hypercube draw (default: --seed)");
  submit->add_option("--seed", batch_seed, "Batch seed");
  submit->add_option("--speed", speed, "Real-time factor for every run (0 = unconstrained)");
  opt_bindings->excludes(opt_factorial)->excludes(opt_lhs);
  opt_factorial->excludes(opt_lhs);
  opt_lhs->needs(opt_ranges);
  opt_ranges->needs(opt_lhs);
  auto* batch_list = batch->add_subcommand("list", "List batches");
  auto* batch_show = batch->add_subcommand("show", "Show one batch and its runs");
  batch_show->add_option("id", id)->required();

  // Runs.
  auto* run_cmd = app.add_subcommand("run", "Runs")->require_subcommand(1);
  std::string batch_filter, state_filter, scenario_id, scenario_file;
  auto* run_list = run_cmd->add_subcommand("list", "List runs");
  run_list->add_option("--batch", batch_filter);
  run_list->add_option("--state", state_filter);
  auto* run_show = run_cmd->add_subcommand("show", "Show one run");
  run_show->add_option("id", id)->required();
  auto* run_submit = run_cmd->add_subcommand("submit", "Run one scenario outside any batch");
  auto* opt_sid = run_submit->add_option("--scenario-id", scenario_id);
  auto* opt_sfile = run_submit->add_option("--scenario", scenario_file, "Scenario JSON file");
  opt_sid->excludes(opt_sfile);
  std::optional<std::uint64_t> run_seed;
  run_submit->add_option("--seed", run_seed);
  run_submit->add_option("--speed", speed);
  auto* control = run_cmd->add_subcommand("control", "play | pause | resume | stop | speed F | set AGENT PATH VALUE");
  std::vector<std::string> words;
  control->add_option("id", id)->required();
  control->add_option("command", words)->required();
  auto* run_watch = run_cmd->add_subcommand("watch", "Follow a run until it ends");
  run_watch->add_option("id", id)->required();
  auto* run_records = run_cmd->add_subcommand("records", "Print stored records as JSON lines");
  std::optional<std::uint64_t> from_step, to_step, attempt;
  std::string tag;
  run_records->add_option("id", id)->required();
  run_records->add_option("--from", from_step);
  run_records->add_option("--to", to_step);
  run_records->add_option("--tag", tag, "Comma-separated tags");
  run_records->add_option("--attempt", attempt);

  // Analysis and status.
  auto* analyze = app.add_subcommand("analyze", "Compute batch metrics and export CSV");
  std::string metrics_file, out_file, summary_file;
  analyze->add_option("--batch", id)->required();
  analyze->add_option("--metrics", metrics_file, "JSON list of metric specs")->required();
  analyze->add_option("--out", out_file, "Per-run CSV path")->required();
  analyze->add_option("--summary-out", summary_file, "Per-metric summary CSV path");
  auto* nodes = app.add_subcommand("nodes", "List node daemons");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  if (manager_url.empty()) manager_url = env_manager.empty() ? "http://127.0.0.1:8080" : env_manager;
  Session s{normalize_base(manager_url), json, out, err};

  try {
    auto doc = [&](const DocCommands& d, const std::string& plural) -> std::optional<int> {
      if (d.add->parsed()) {
        const Json body = read_json_file(file, err);
        print_entry(s, s.post("/" + plural + (id.empty() ? "" : "?id=" + query_escape(id)), body));
      } else if (d.get->parsed()) {
        const Json e = s.get("/" + plural + "/" + id);
        out << (json ? e.dump() : e["body"].dump(2)) << "\n";
      } else if (d.list->parsed()) {
        print_entries(s, s.get("/" + plural + (prefix.empty() ? "" : "?prefix=" + query_escape(prefix))));
      } else if (d.rm && d.rm->parsed()) {
        print_entry(s, s.del("/" + plural + "/" + id));
      } else {
        return std::nullopt;
      }
      return kOk;
    };
    if (scenario->parsed()) return doc(scen, "scenarios").value_or(kUsage);
    if (template_cmd->parsed()) return doc(tmpl, "templates").value_or(kUsage);

    if (submit->parsed()) {
      Json body = {{"template_id", template_id}, {"batch_seed", batch_seed}, {"speed_factor", speed}};
      if (!bindings_file.empty()) {
        body["bindings"] = read_json_file(bindings_file, err);
      } else if (!factorial_file.empty()) {
        body["factorial"] = read_json_file(factorial_file, err);
      } else if (lhs_n > 0) {
        body["lhs"] = {{"n", lhs_n},
                       {"ranges", read_json_file(ranges_file, err)},
                       {"seed", submit->count("--lhs-seed") ? lhs_seed : batch_seed}};
      } else {
        err << "asa: one of --bindings, --factorial or --lhs is required\n";
        return kUsage;
      }
      print_batch(s, s.post("/batches", body));
      return kOk;
    }
    if (batch_list->parsed()) {
      const Json all = s.get("/batches");
      if (json) {
        out << all.dump() << "\n";
      } else {
        std::vector<std::vector<std::string>> rows;
        for (const auto& b : all) {
          rows.push_back({b["batch_id"], b["template_id"], std::to_string(b["size"].get<std::size_t>()),
                          std::to_string(b["rollup"]["COMPLETED"].get<std::size_t>()),
                          b["complete"].get<bool>() ? "yes" : "no"});
        }
        table(out, {"BATCH", "TEMPLATE", "RUNS", "COMPLETED", "DONE"}, rows);
      }
      return kOk;
    }
    if (batch_show->parsed()) {
      const Json b = s.get("/batches/" + id);
      print_batch(s, b);
      if (!json) print_runs(s, b["runs"]);
      return kOk;
    }

    if (run_list->parsed()) {
      std::string q;
      if (!batch_filter.empty()) q += "&batch=" + query_escape(batch_filter);
      if (!state_filter.empty()) q += "&state=" + query_escape(state_filter);
      print_runs(s, s.get("/runs" + (q.empty() ? "" : "?" + q.substr(1))));
      return kOk;
    }
    if (run_show->parsed()) {
      print_run(s, s.get("/runs/" + id));
      return kOk;
    }
    if (run_submit->parsed()) {
      Json body = {{"speed_factor", speed}};
      if (!scenario_id.empty()) {
        body["scenario_id"] = scenario_id;
      } else if (!scenario_file.empty()) {
        body["scenario"] = read_json_file(scenario_file, err);
      } else {
        err << "asa: one of --scenario-id or --scenario is required\n";
        return kUsage;
      }
      if (run_seed) body["seed"] = *run_seed;
      print_run(s, s.post("/runs", body));
      return kOk;
    }
    if (control->parsed()) {
      print_run(s, s.post("/runs/" + id + "/control", {{"command", control_command(words, err)}}));
      return kOk;
    }
    if (run_watch->parsed()) return watch(s, id);
    if (run_records->parsed()) {
      std::string q;
      if (from_step) q += "&from_step=" + std::to_string(*from_step);
      if (to_step) q += "&to_step=" + std::to_string(*to_step);
      if (!tag.empty()) q += "&tag=" + query_escape(tag);
      if (attempt) q += "&attempt=" + std::to_string(*attempt);
      for (const auto& r : s.get("/runs/" + id + "/records" + (q.empty() ? "" : "?" + q.substr(1)))) {
        out << r.dump() << "\n";
      }
      return kOk;
    }

    if (analyze->parsed()) {
      const Json metrics = read_json_file(metrics_file, err);
      const std::string path = "/batches/" + id + "/analysis";
      auto c = s.client();
      const Json csv = s.check(c.Post(path + "?format=csv", metrics.dump(), "application/json"), "POST " + path);
      try {
        analysis::export_csv(csv.get<std::string>(), out_file);
        if (!summary_file.empty()) {
          const Json summary_csv =
              s.check(c.Post(path + "?format=csv&table=summary", metrics.dump(), "application/json"), "POST " + path);
          analysis::export_csv(summary_csv.get<std::string>(), summary_file);
        }
      } catch (const std::exception& e) {
        err << "asa: " << e.what() << "\n";
        return kUsage;
      }
      const Json result = s.post(path, metrics);
      if (json) {
        out << result.dump() << "\n";
      } else {
        std::vector<std::vector<std::string>> rows;
        auto num = [](const Json& v) { return v.is_null() ? std::string("-") : analysis::format_number(v.get<double>()); };
        for (const auto& [name, m] : result["summary"]["metrics"].items()) {
          rows.push_back({name, std::to_string(m["n"].get<std::size_t>()), num(m["mean"]), num(m["std"]),
                          num(m["min"]), num(m["max"])});
        }
        table(out, {"METRIC", "N", "MEAN", "STD", "MIN", "MAX"}, rows);
        for (const auto& w : result["warnings"]) err << "warning: " << w.get<std::string>() << "\n";
        out << "wrote " << out_file << "\n";
      }
      return kOk;
    }
    if (nodes->parsed()) {
      const Json all = s.get("/nodes");
      if (json) {
        out << all.dump() << "\n";
      } else {
        std::vector<std::vector<std::string>> rows;
        for (const auto& n : all) {
          rows.push_back({n["node_id"], n["status"], std::to_string(n["assigned"].get<std::size_t>()) + "/" +
                                                         std::to_string(n["capacity"].get<std::size_t>()),
                          n["address"], n["last_heartbeat"]});
        }
        table(out, {"NODE", "STATUS", "LOAD", "ADDRESS", "LAST HEARTBEAT"}, rows);
      }
      return kOk;
    }
  } catch (const Abort& e) {
    return e.code;
  } catch (const Json::exception& e) {
    err << "asa: unexpected response: " << e.what() << "\n";
    return kServerError;
  }
  out << app.help();
  return kUsage;
}

}  // namespace asa::cli
