#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "asa/manager.hpp"

namespace asa::api {

struct ApiOptions {
  net::Endpoint http{"", 8080};
  /// Static files served under /ui.
  std::optional<std::filesystem::path> ui_dir;
  std::size_t threads = 32;
};

/// HTTP status for an error code raised by the manager or catalog.
int http_status_for(const std::string& code);

/// REST and event-stream front of a Manager.
class ApiServer {
 public:
  ApiServer(manager::Manager& manager, ApiOptions options);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Bind and serve on a background thread. Throws Error("BindFailed").
  void start();
  void stop();
  std::uint16_t port() const { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::uint16_t port_ = 0;
  std::thread thread_;
};

}  // namespace asa::api
