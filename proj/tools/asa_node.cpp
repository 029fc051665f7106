#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <unistd.h>

#include "asa/log.hpp"
#include "asa/net.hpp"
#include "asa/node.hpp"
#include "asa/protocol.hpp"
#include "signals.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Node daemon: runs simulations assigned by the manager", "asa-node"};
  std::string manager = "127.0.0.1:4810";
  std::string id;
  std::vector<std::string> ext_dirs;
  asa::node::NodeConfig config;
  app.add_option("--manager", manager, "Manager node protocol address HOST:PORT (ASA_MANAGER overrides)")
      ->capture_default_str();
  app.add_option("--id", id, "Node id (default: hostname)");
  app.add_option("--capacity", config.capacity, "Concurrent runs")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--ext-dir", ext_dirs, "Extension directory (repeatable)");
  app.add_option("--heartbeat", config.heartbeat_interval_s, "Heartbeat interval in seconds")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  if (const char* env = std::getenv("ASA_MANAGER"); env && *env) manager = env;
  if (id.empty()) {
    char host[256] = {};
    gethostname(host, sizeof host - 1);
    id = host[0] ? host : "node";
  }

  const sigset_t signals = asa::tools::block_signals();
  std::thread waiter;
  try {
    config.node_id = id;
    config.manager = asa::net::parse_endpoint(manager, asa::protocol::kDefaultPort);
    for (const auto& d : ext_dirs) config.extension_dirs.emplace_back(d);
    asa::node::NodeDaemon daemon(config);
    waiter = asa::tools::signal_thread(
        signals, [&] { daemon.stop(); }, [&] { daemon.request_reload(); });
    asa::log::info("node", id + " connecting to " + manager + ", capacity " + std::to_string(config.capacity));
    daemon.run();
    waiter.join();
  } catch (const std::exception& e) {
    asa::log::error("node", e.what());
    if (waiter.joinable()) waiter.detach();
    return 1;
  }
  return 0;
}
