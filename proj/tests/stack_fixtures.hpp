#pragma once

// Manager + HTTP API + in-process node daemons for end-to-end tests.

#include <doctest.h>
#include <httplib.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <thread>

#include "asa/api.hpp"
#include "asa/manager.hpp"
#include "asa/node.hpp"
#include "engine_fixtures.hpp"

namespace asa::testing {

using namespace std::chrono_literals;
using manager::Manager;
using manager::ManagerConfig;
namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("asa_mgr_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

inline ManagerConfig config_for(const fs::path& root, double suspect = 0.6, double dead = 1.2) {
  ManagerConfig c;
  c.data_root = root;
  c.listen = {"127.0.0.1", 0};
  c.suspect_after_s = suspect;
  c.dead_after_s = dead;
  c.refusal_backoff_s = 0.1;
  c.fsync = false;
  return c;
}

/// Manager plus HTTP front on ephemeral ports.
struct Stack {
  Manager m;
  api::ApiServer api;
  std::unique_ptr<httplib::Client> http;

  explicit Stack(ManagerConfig cfg, std::optional<fs::path> ui = std::nullopt)
      : m(std::move(cfg)), api(m, api::ApiOptions{{"127.0.0.1", 0}, ui, 16}) {
    m.start();
    api.start();
    http = std::make_unique<httplib::Client>("127.0.0.1", api.port());
    http->set_read_timeout(10, 0);
  }
  ~Stack() {
    api.stop();
    m.stop();
  }

  std::pair<int, Json> post(const std::string& path, const Json& body) {
    auto res = http->Post(path, body.dump(), "application/json");
    REQUIRE(res);
    return {res->status, res->body.empty() ? Json() : Json::parse(res->body)};
  }
  std::pair<int, Json> put(const std::string& path, const Json& body) {
    auto res = http->Put(path, body.dump(), "application/json");
    REQUIRE(res);
    return {res->status, Json::parse(res->body)};
  }
  std::pair<int, Json> get(const std::string& path) {
    auto res = http->Get(path);
    REQUIRE(res);
    return {res->status, Json::parse(res->body)};
  }
  std::pair<int, Json> del(const std::string& path) {
    auto res = http->Delete(path);
    REQUIRE(res);
    return {res->status, Json::parse(res->body)};
  }

  void add_template(const std::string& id = "sweep") {
    auto [status, body] = post("/templates?id=" + id, load_json("sweep_template.json"));
    REQUIRE(status == 201);
  }

  bool wait_batch_complete(const std::string& batch_id, std::chrono::seconds limit = 60s) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < deadline) {
      if (auto [s, b] = get("/batches/" + batch_id); s == 200 && b["complete"].get<bool>()) return true;
      std::this_thread::sleep_for(50ms);
    }
    return false;
  }

  bool wait_state(const std::string& run_id, const std::string& state, std::chrono::milliseconds limit = 10000ms) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < deadline) {
      auto r = m.run(run_id);
      if (r && to_string(r->state) == state) return true;
      std::this_thread::sleep_for(10ms);
    }
    return false;
  }
};

/// A real handler daemon on its own thread.
struct Worker {
  node::NodeDaemon daemon;
  std::thread thread;

  Worker(const std::string& id, std::uint16_t port, std::uint32_t capacity)
      : daemon([&] {
          node::NodeConfig c;
          c.node_id = id;
          c.manager = {"127.0.0.1", port};
          c.capacity = capacity;
          c.heartbeat_interval_s = 0.2;
          c.backoff_initial_s = 0.05;
          c.backoff_max_s = 0.2;
          return c;
        }()) {
    thread = std::thread([this] { daemon.run(); });
  }
  ~Worker() { kill(); }
  void kill() {
    if (thread.joinable()) {
      daemon.stop();
      thread.join();
    }
  }
};

/// Replays a transition log: max concurrently active runs, overall and per node.
struct Occupancy {
  std::size_t max_total = 0;
  std::map<std::string, std::size_t> max_per_node;
  bool single_assignment = true;
};

inline Occupancy occupancy(const std::vector<Json>& log) {
  Occupancy o;
  std::map<std::string, std::string> owner;  // active run -> node
  for (const auto& t : log) {
    if (t["kind"] != "run") continue;
    const std::string run = t["run_id"];
    const std::string to = t["to"];
    const bool active = to == "ASSIGNED" || to == "RUNNING" || to == "PAUSED";
    if (active) {
      const std::string node = t["node_id"];
      auto it = owner.find(run);
      if (it != owner.end() && it->second != node) o.single_assignment = false;
      owner[run] = node;
    } else {
      owner.erase(run);
    }
    o.max_total = std::max(o.max_total, owner.size());
    std::map<std::string, std::size_t> per;
    for (const auto& [_, n] : owner) ++per[n];
    for (const auto& [n, c] : per) o.max_per_node[n] = std::max(o.max_per_node[n], c);
  }
  return o;
}


}  // namespace asa::testing
