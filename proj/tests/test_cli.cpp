#include <doctest.h>

#include <fstream>
#include <sstream>

#include "asa/cli.hpp"
#include "stack_fixtures.hpp"

using namespace asa;
using namespace asa::testing;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome asa_cli(std::vector<std::string> args, const std::string& env = "") {
  args.insert(args.begin(), "asa");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err, env);
  return {code, out.str(), err.str()};
}

std::string write_file(const fs::path& dir, const std::string& name, const Json& content) {
  const auto path = dir / name;
  std::ofstream(path) << content.dump();
  return path.string();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("usage errors exit 1 without contacting a server") {
  CHECK(asa_cli({}).code == cli::kUsage);
  CHECK(asa_cli({"bogus"}).code == cli::kUsage);
  CHECK(asa_cli({"--help"}).code == cli::kOk);
  CHECK(asa_cli({"run", "control", "r1", "fly"}).code == cli::kUsage);
  CHECK(asa_cli({"run", "control", "r1", "speed", "fast"}).code == cli::kUsage);
  CHECK(asa_cli({"run", "control", "r1", "set", "a", "b"}).code == cli::kUsage);
  CHECK(asa_cli({"batch", "submit", "--template", "t"}).code == cli::kUsage);
  CHECK(asa_cli({"batch", "submit", "--template", "t", "--bindings", "a", "--factorial", "b"}).code == cli::kUsage);
  CHECK(asa_cli({"batch", "submit", "--template", "t", "--lhs", "5"}).code == cli::kUsage);
  CHECK(asa_cli({"scenario", "add", "/nonexistent/file.json"}).code == cli::kUsage);
}

TEST_CASE("transport failure exits 3") {
  const auto r = asa_cli({"--manager", "http://127.0.0.1:1", "nodes"});
  CHECK(r.code == cli::kTransport);
  CHECK(r.err.find("cannot reach manager") != std::string::npos);
}

TEST_CASE("documents through the client; server errors exit 2 with the body") {
  TempDir dir;
  Stack s(config_for(dir.path / "data"));
  const std::string url = "http://127.0.0.1:" + std::to_string(s.api.port());
  const auto scen = write_file(dir.path, "scen.json", load_json("three_agent.json"));

  // ASA_MANAGER is honoured when --manager is absent.
  auto added = asa_cli({"scenario", "add", scen, "--id", "s1"}, url);
  CHECK(added.code == cli::kOk);
  CHECK(added.out.find("scenario s1 revision 1") != std::string::npos);
  CHECK(asa_cli({"--manager", url, "scenario", "add", scen, "--id", "s1"}).code == cli::kServerError);

  auto got = asa_cli({"--manager", url, "scenario", "get", "s1"});
  CHECK(got.code == cli::kOk);
  CHECK(Json::parse(got.out) == Json(load_scenario("three_agent.json")));

  auto l1 = asa_cli({"--manager", url, "--json", "scenario", "list"});
  auto l2 = asa_cli({"--manager", url, "--json", "scenario", "list"});
  CHECK(l1.code == cli::kOk);
  CHECK(l1.out == l2.out);
  CHECK(Json::parse(l1.out).size() == 1);

  auto table = asa_cli({"--manager", url, "scenario", "list"});
  CHECK(table.out.rfind("ID", 0) == 0);
  CHECK(table.out.find("s1") != std::string::npos);

  CHECK(asa_cli({"--manager", url, "scenario", "rm", "s1"}).code == cli::kOk);
  auto missing = asa_cli({"--manager", url, "scenario", "get", "s1"});
  CHECK(missing.code == cli::kServerError);
  CHECK(missing.err.find("UnknownId") != std::string::npos);

  // Validation failure: the server's violation list is printed as received.
  Json bad = load_json("three_agent.json");
  bad["sim"]["step_dt"] = -1;
  auto rejected = asa_cli({"--manager", url, "scenario", "add", write_file(dir.path, "bad.json", bad)});
  CHECK(rejected.code == cli::kServerError);
  CHECK(rejected.err.find("HTTP 422") != std::string::npos);
  CHECK(rejected.err.find("\"errors\"") != std::string::npos);

  REQUIRE(asa_cli({"--manager", url, "template", "add", write_file(dir.path, "t.json", load_json("sweep_template.json"))})
              .code == cli::kOk);
  auto bindings = write_file(dir.path, "b.json", Json::array({{{"bravo_speed", 200}, {"bravo_heading", 1}},
                                                              {{"bravo_speed", 9000}, {"bravo_heading", 1}}}));
  auto batch422 = asa_cli({"--manager", url, "batch", "submit", "--template", "sweep", "--bindings", bindings});
  CHECK(batch422.code == cli::kServerError);
  CHECK(batch422.err.find("HTTP 422") != std::string::npos);
  CHECK(batch422.err.find("ValidationFailed") != std::string::npos);
}

TEST_CASE("smoke: scenario, template, 4-run factorial, watch, analyze") {
  TempDir dir;
  Stack s(config_for(dir.path / "data", 2.0, 4.0));
  Worker w1("w1", s.m.node_port(), 2);
  Worker w2("w2", s.m.node_port(), 2);
  const std::string url = "http://127.0.0.1:" + std::to_string(s.api.port());
  auto cmd = [&](std::vector<std::string> args) {
    args.insert(args.begin(), {"--manager", url});
    return asa_cli(std::move(args));
  };

  REQUIRE(cmd({"scenario", "add", write_file(dir.path, "s.json", load_json("three_agent.json"))}).code == 0);
  REQUIRE(cmd({"template", "add", write_file(dir.path, "t.json", load_json("sweep_template.json"))}).code == 0);
  auto factorial =
      write_file(dir.path, "f.json", {{"bravo_speed", {150, 250}}, {"bravo_heading", {0.5, 2.5}}});
  auto submitted = cmd({"--json", "batch", "submit", "--template", "sweep", "--factorial", factorial, "--seed", "11"});
  REQUIRE(submitted.code == 0);
  const Json batch = Json::parse(submitted.out);
  REQUIRE(batch["size"] == 4);
  const std::string batch_id = batch["batch_id"];

  for (const auto& run_id : batch["run_ids"]) {
    auto watched = cmd({"run", "watch", run_id});
    CHECK(watched.code == 0);
    CHECK(watched.out.find(std::string(run_id) + " COMPLETED") != std::string::npos);
  }

  auto shown = cmd({"batch", "show", batch_id});
  CHECK(shown.code == 0);
  CHECK(shown.out.find("complete") != std::string::npos);
  CHECK(shown.out.find("COMPLETED=4") != std::string::npos);

  auto metrics = write_file(dir.path, "m.json",
                            Json::array({{{"name", "bravo_final_speed"},
                                          {"reducer", "final_value"},
                                          {"agent_id", "bravo"},
                                          {"key", "speed"}}}));
  const auto csv_path = dir.path / "out.csv";
  auto analyzed = cmd({"analyze", "--batch", batch_id, "--metrics", metrics, "--out", csv_path.string()});
  REQUIRE(analyzed.code == 0);
  CHECK(analyzed.out.find("bravo_final_speed") != std::string::npos);
  const std::string csv = read_file(csv_path);
  CHECK(csv.rfind("run_index,bravo_heading,bravo_speed,bravo_final_speed\r\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  auto listed = cmd({"--json", "run", "list", "--batch", batch_id});
  CHECK(listed.code == 0);
  CHECK(Json::parse(listed.out).size() == 4);
  auto nodes = cmd({"nodes"});
  CHECK(nodes.out.find("w1") != std::string::npos);
  CHECK(nodes.out.find("LIVE") != std::string::npos);
  auto records = cmd({"run", "records", batch["run_ids"][0], "--from", "5", "--to", "5", "--tag", "status"});
  CHECK(records.code == 0);
  CHECK(std::count(records.out.begin(), records.out.end(), '\n') > 0);
}

TEST_CASE("run control prints the new state") {
  TempDir dir;
  Stack s(config_for(dir.path / "data", 2.0, 4.0));
  Worker w("w1", s.m.node_port(), 1);
  const std::string url = "http://127.0.0.1:" + std::to_string(s.api.port());
  auto cmd = [&](std::vector<std::string> args) {
    args.insert(args.begin(), {"--manager", url});
    return asa_cli(std::move(args));
  };
  REQUIRE(cmd({"scenario", "add", write_file(dir.path, "s.json", load_json("three_agent.json")), "--id", "s"}).code == 0);
  auto submitted = cmd({"--json", "run", "submit", "--scenario-id", "s", "--speed", "1"});
  REQUIRE(submitted.code == 0);
  const std::string run_id = Json::parse(submitted.out)["run_id"];
  REQUIRE(s.wait_state(run_id, "RUNNING"));

  auto paused = cmd({"run", "control", run_id, "pause"});
  CHECK(paused.code == 0);
  CHECK(paused.out.find("PAUSED") != std::string::npos);
  CHECK(cmd({"run", "control", run_id, "pause"}).code == cli::kServerError);
  CHECK(cmd({"run", "control", run_id, "speed", "4"}).code == 0);
  auto set = cmd({"run", "control", run_id, "set", "bravo", "speed_mps", "300"});
  CHECK_MESSAGE(set.code == 0, set.err);
  auto resumed = cmd({"run", "control", run_id, "resume"});
  CHECK(resumed.out.find("RUNNING") != std::string::npos);
  auto stopped = cmd({"run", "control", run_id, "stop"});
  CHECK(stopped.code == 0);
  CHECK(stopped.out.find("STOPPED") != std::string::npos);
  auto watched = cmd({"run", "watch", run_id});
  CHECK(watched.code == 0);
  CHECK(watched.out.find("STOPPED") != std::string::npos);
  CHECK(cmd({"run", "control", run_id, "resume"}).code == cli::kServerError);
  CHECK(cmd({"run", "watch", "nope"}).code == cli::kServerError);
}
