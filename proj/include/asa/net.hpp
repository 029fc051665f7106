#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "asa/protocol.hpp"

namespace asa::net {

struct Endpoint {
  std::string host;  // empty: any interface (listen) or loopback (connect)
  std::uint16_t port = 0;
};

/// "HOST:PORT", ":PORT" or "PORT". Throws Error("BadAddress").
Endpoint parse_endpoint(const std::string& text, std::uint16_t default_port);

/// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(o.release()) {}
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release() {
    const int f = fd_;
    fd_ = -1;
    return f;
  }
  void close();
  /// shutdown(2) both directions; wakes a blocked reader in another thread.
  void shutdown();

 private:
  int fd_ = -1;
};

/// Throws Error("ConnectFailed").
Socket connect_tcp(const Endpoint& ep, std::chrono::milliseconds timeout);
/// Bound, listening socket. Port 0 picks a free port; see local_port().
Socket listen_tcp(const Endpoint& ep);
std::uint16_t local_port(const Socket& s);
/// Blocks until a connection arrives or the listener is shut down (invalid result).
Socket accept_tcp(const Socket& listener);

/// Throws Error("SendFailed").
void send_all(const Socket& s, std::span<const std::uint8_t> bytes);
void send_message(const Socket& s, const protocol::Message& m);

/// Wait up to `timeout` for readable data. Returns bytes read; empty
/// optional on timeout; empty vector on orderly close. Throws on error.
std::optional<std::vector<std::uint8_t>> receive(const Socket& s, std::chrono::milliseconds timeout);

}  // namespace asa::net
