#include <CLI11.hpp>

#include <condition_variable>
#include <iostream>
#include <mutex>

#include "asa/api.hpp"
#include "asa/log.hpp"
#include "asa/manager.hpp"
#include "asa/net.hpp"
#include "asa/protocol.hpp"
#include "signals.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Simulation manager: node protocol listener and HTTP API", "asa-manager"};
  std::string listen = ":4810";
  std::string http = ":8080";
  std::string data = "./asa-data";
  std::string ui;
  std::vector<std::string> ext_dirs;
  asa::manager::ManagerConfig config;
  bool no_fsync = false;
  app.add_option("--listen", listen, "Node protocol address [HOST]:PORT")->capture_default_str();
  app.add_option("--http", http, "HTTP API address [HOST]:PORT")->capture_default_str();
  app.add_option("--data", data, "Data root")->capture_default_str();
  app.add_option("--ui", ui, "Directory served under /ui");
  app.add_option("--ext-dir", ext_dirs, "Extension directory (repeatable)");
  app.add_option("--suspect-after", config.suspect_after_s, "Seconds without heartbeat before SUSPECT")
      ->capture_default_str();
  app.add_option("--dead-after", config.dead_after_s, "Seconds without heartbeat before DEAD")->capture_default_str();
  app.add_option("--max-attempts", config.max_attempts, "Attempts per run before FAILED")->capture_default_str();
  app.add_flag("--no-fsync", no_fsync, "Skip fsync on catalog and record writes");
  CLI11_PARSE(app, argc, argv);

  const sigset_t signals = asa::tools::block_signals();
  try {
    config.data_root = data;
    config.listen = asa::net::parse_endpoint(listen, asa::protocol::kDefaultPort);
    config.fsync = !no_fsync;
    for (const auto& d : ext_dirs) config.extension_dirs.emplace_back(d);
    asa::api::ApiOptions options;
    options.http = asa::net::parse_endpoint(http, 8080);
    if (!ui.empty()) options.ui_dir = ui;

    asa::manager::Manager manager(config);
    manager.start();
    asa::api::ApiServer server(manager, options);
    server.start();
    asa::log::info("manager", "nodes on port " + std::to_string(manager.node_port()) + ", http on port " +
                                  std::to_string(server.port()) + ", data " + data);

    std::mutex m;
    std::condition_variable cv;
    bool done = false;
    auto waiter = asa::tools::signal_thread(
        signals,
        [&] {
          std::lock_guard lock(m);
          done = true;
          cv.notify_all();
        },
        [&] { manager.reload_extensions(); });
    {
      std::unique_lock lock(m);
      cv.wait(lock, [&] { return done; });
    }
    waiter.join();
    asa::log::info("manager", "shutting down");
    server.stop();
    manager.stop();
  } catch (const std::exception& e) {
    asa::log::error("manager", e.what());
    return 1;
  }
  return 0;
}
