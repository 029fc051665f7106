#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "asa/engine.hpp"
#include "asa/net.hpp"
#include "asa/protocol.hpp"

namespace asa::node {

enum class Phase { Initializing, Running, Paused, Stopping, Done };

std::string to_string(Phase p);

/// Seconds to hold the next step so that sim time tracks speed_factor x wall
/// time from the pacing epoch. `steps_since_epoch` counts the step about to run.
double pace(double speed_factor, double step_dt, std::uint64_t steps_since_epoch, double elapsed_since_epoch);

struct ExecutionControl {
  Phase phase = Phase::Initializing;
  double speed_factor = 0.0;
  std::vector<ParamUpdate> pending_params;
};

/// Apply one command. Throws Error("IllegalTransition") and leaves `exec`
/// unchanged when the command is not allowed in the current phase.
void apply_control(ExecutionControl& exec, const protocol::ControlCommand& command);

struct RunnerOptions {
  std::uint64_t flush_steps = 50;
  std::chrono::milliseconds flush_interval{250};
  std::size_t flush_bytes = 4u << 20;
  std::size_t buffer_limit_bytes = 64u << 20;
};

/// One run on its own thread. Produces frames (state changes and record
/// batches) in order; batches are kept until acknowledged.
class RunExecution {
 public:
  RunExecution(ExecutionRequest request, double speed_factor, std::shared_ptr<const ModelRegistry> registry,
               RunnerOptions options = {});
  ~RunExecution();
  RunExecution(const RunExecution&) = delete;
  RunExecution& operator=(const RunExecution&) = delete;

  void start();
  /// Wait for the run thread to finish.
  void join();

  const std::string& run_id() const { return request_.request_id; }
  Phase phase() const;
  double speed_factor() const;
  std::uint64_t current_step() const { return step_.load(); }

  /// Throws Error("IllegalTransition").
  void control(const protocol::ControlCommand& command);

  /// Frames not yet handed to the link, in production order.
  std::vector<protocol::Bytes> take_unsent();
  /// After a reconnect every retained frame is sent again.
  void mark_all_unsent();
  void acknowledge(std::int64_t through_step);

  std::size_t unacked_bytes() const;
  /// Done, every frame handed out, every batch acknowledged.
  bool drained() const;
  RunOutcome outcome() const;
  /// Most recent state reported, e.g. "RUNNING".
  std::string reported_state() const;

 private:
  class Control;
  class Sink;
  struct Frame {
    protocol::Bytes bytes;
    bool batch = false;
    std::int64_t last_step = -1;
    bool sent = false;
  };

  void main();
  void emit_state_locked(const std::string& state, const std::string& detail);
  void flush_locked();
  void push_frame(Frame f);

  ExecutionRequest request_;
  std::shared_ptr<const ModelRegistry> registry_;
  RunnerOptions options_;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  ExecutionControl exec_;
  std::string reported_;
  std::deque<Frame> frames_;
  std::size_t unacked_bytes_ = 0;
  std::int64_t acked_step_ = -1;
  std::vector<StepRecord> pending_;
  std::size_t pending_bytes_ = 0;
  std::uint64_t pending_steps_ = 0;
  std::chrono::steady_clock::time_point last_flush_;
  RunOutcome outcome_;
  std::atomic<std::uint64_t> step_{0};
  std::thread thread_;
};

struct NodeConfig {
  std::string node_id = "node";
  net::Endpoint manager{"127.0.0.1", protocol::kDefaultPort};
  std::uint32_t capacity = 1;
  double heartbeat_interval_s = 2.0;
  std::vector<std::filesystem::path> extension_dirs;
  RunnerOptions runner;
  double backoff_initial_s = 1.0;
  double backoff_max_s = 30.0;
};

/// Reconnect delays: initial, doubling, capped.
double backoff_delay(double initial, double cap, unsigned failures);

/// Handler daemon: keeps the manager link, hosts run executions.
class NodeDaemon {
 public:
  explicit NodeDaemon(NodeConfig config);
  ~NodeDaemon();

  /// Blocks until stop().
  void run();
  void stop();
  /// Reload extension libraries before the next message is handled.
  void request_reload() { reload_requested_ = true; }

  bool connected() const { return connected_; }
  std::size_t active_runs() const;
  std::vector<std::string> load_failures() const;

 private:
  void reload_extensions();
  void session(net::Socket& sock);
  void handle(net::Socket& sock, const protocol::Message& msg);
  void flush_outbound(net::Socket& sock);
  std::vector<std::string> running_ids() const;
  bool sleep_interruptible(double seconds);

  NodeConfig config_;
  std::shared_ptr<const ModelRegistry> registry_;
  std::vector<std::string> load_failures_;
  mutable std::mutex mutex_;
  std::condition_variable stop_cv_;
  std::map<std::string, std::unique_ptr<RunExecution>> runs_;
  std::atomic<bool> stopping_{false};
  std::atomic<bool> reload_requested_{false};
  std::atomic<bool> connected_{false};
  std::atomic<int> live_fd_{-1};
};

}  // namespace asa::node
