#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "asa/analysis.hpp"
#include "asa/datastore.hpp"
#include "asa/engine.hpp"
#include "asa/net.hpp"
#include "asa/protocol.hpp"

namespace asa::manager {

enum class RunState { Pending, Assigned, Running, Paused, Completed, Stopped, Failed };
enum class NodeStatus { Live, Suspect, Dead };

std::string to_string(RunState s);
RunState run_state_from_string(const std::string& s);
std::string to_string(NodeStatus s);
bool is_terminal(RunState s);

struct RunInfo {
  std::string run_id;
  ExecutionRequest request;
  RunState state = RunState::Pending;
  std::string node_id;
  std::uint32_t attempts = 1;
  std::uint64_t seq = 0;  // submission order
  double speed_factor = 0.0;
  std::string batch_id;
  std::uint64_t batch_index = 0;
  std::string reason;
  std::int64_t through_step = -1;  // highest persisted step of the current attempt
  std::map<std::string, std::string> timestamps;  // state name -> first entry time
};

/// `include_request` adds the full execution request.
Json to_json(const RunInfo& r, bool include_request);
RunInfo run_from_json(const Json& j);

struct NodeInfo {
  std::string node_id;
  std::string address;
  std::uint32_t capacity = 0;
  std::set<std::string> running;  // as last reported by heartbeat
  std::string last_heartbeat;
  NodeStatus status = NodeStatus::Dead;
};

Json to_json(const NodeInfo& n, std::size_t assigned);

struct BatchInfo {
  std::string batch_id;
  std::string template_id;
  std::vector<BindingSet> bindings;
  std::uint64_t batch_seed = 0;
  double speed_factor = 0.0;
  std::vector<std::string> run_ids;
  std::string created;
};

struct ManagerConfig {
  std::filesystem::path data_root = "data";
  net::Endpoint listen{"", protocol::kDefaultPort};
  double suspect_after_s = 6.0;
  double dead_after_s = 12.0;
  std::uint32_t max_attempts = 3;
  /// A node that refuses an Assign is skipped for this long.
  double refusal_backoff_s = 0.5;
  std::vector<std::filesystem::path> extension_dirs;
  bool fsync = true;
};

/// Error with an HTTP-mappable code and optional violation list.
class ApiError : public Error {
 public:
  ApiError(std::string code, const std::string& message, Json errors = Json::array())
      : Error(std::move(code), message), errors_(std::move(errors)) {}
  const Json& errors() const { return errors_; }

 private:
  Json errors_;
};

/// Authoritative run and node state. Every transition is applied under one
/// mutex and appended to transitions.jsonl in that order.
class Manager {
 public:
  explicit Manager(ManagerConfig config);
  ~Manager();
  Manager(const Manager&) = delete;
  Manager& operator=(const Manager&) = delete;

  /// Bind the node port and start the accept and monitor threads.
  void start();
  void stop();
  std::uint16_t node_port() const;

  store::Catalog& catalog() { return catalog_; }
  store::RecordStore& records() { return store_; }
  const ManagerConfig& config() const { return config_; }

  std::vector<ModelManifest> manifests() const;
  /// Reload extension libraries; returns load failures.
  std::vector<std::string> reload_extensions();

  /// Scenario and template documents, validated. Throw ApiError.
  store::CatalogEntry put_scenario(const std::optional<std::string>& id, const Json& body,
                                   std::optional<std::uint64_t> expected_revision);
  store::CatalogEntry put_template(const std::optional<std::string>& id, const Json& body,
                                   std::optional<std::uint64_t> expected_revision);

  /// {template_id, bindings | factorial | lhs{n, ranges, seed}, batch_seed, speed_factor?}
  BatchInfo submit_batch(const Json& request);
  /// {scenario_id | scenario, seed?, speed_factor?}: a run outside any batch.
  RunInfo submit_run(const Json& request);

  std::vector<RunInfo> runs(const std::string& batch_id = "", std::optional<RunState> state = {}) const;
  std::optional<RunInfo> run(const std::string& run_id) const;
  std::vector<BatchInfo> batches() const;
  std::optional<BatchInfo> batch(const std::string& batch_id) const;
  /// State name -> count over the batch's runs.
  std::map<std::string, std::size_t> rollup(const BatchInfo& b) const;
  Json batch_json(const BatchInfo& b) const;
  Json nodes_json() const;

  /// Route a command. Waits up to `wait` for the node to confirm a state change
  /// or report an error. Throws ApiError(UnknownRun | NotRoutable | IllegalTransition).
  RunInfo control(const std::string& run_id, const protocol::ControlCommand& command,
                  std::chrono::milliseconds wait = std::chrono::milliseconds(2000));

  /// Transition log entries with seq > since.
  std::vector<Json> transitions(std::uint64_t since = 0) const;

  /// Analysis over stored records only.
  analysis::BatchSummary analyze(const std::string& batch_id, const std::vector<analysis::MetricSpec>& metrics,
                                 std::vector<std::string>* warnings = nullptr);

  /// Bumped on every state change or persisted batch; for stream waiters.
  std::uint64_t version() const;
  std::uint64_t wait_for_change(std::uint64_t seen, std::chrono::milliseconds timeout) const;

 private:
  struct Connection;
  struct NodeEntry;

  void load_state();
  void accept_loop();
  void monitor_loop();
  void serve(std::shared_ptr<Connection> conn);
  void handle(const std::shared_ptr<Connection>& conn, protocol::Message msg);
  void on_records(const std::shared_ptr<Connection>& conn, protocol::RecordBatch batch);

  // Require mutex_.
  void transition(RunInfo& run, RunState to, const std::string& reason = "");
  void node_transition(NodeEntry& node, NodeStatus to);
  void log_event(Json entry);
  void persist(const RunInfo& run);
  void schedule();
  void node_lost(NodeEntry& node);
  std::size_t load_of(const std::string& node_id) const;
  RunInfo& add_run(ExecutionRequest request, double speed_factor, const std::string& batch_id);
  std::shared_ptr<const ModelRegistry> registry() const;

  ManagerConfig config_;
  store::Catalog catalog_;
  store::RecordStore store_;

  mutable std::mutex mutex_;
  mutable std::condition_variable changed_;
  std::uint64_t version_ = 0;
  std::map<std::string, RunInfo> runs_;
  std::map<std::string, BatchInfo> batches_;
  std::map<std::string, std::unique_ptr<NodeEntry>> nodes_;
  std::map<std::string, std::pair<std::string, std::string>> control_errors_;  // run -> (code, text)
  std::shared_ptr<const ModelRegistry> registry_;
  std::uint64_t next_seq_ = 1;
  std::uint64_t next_run_seq_ = 1;
  std::uint64_t next_batch_ = 1;
  std::uint64_t next_single_ = 1;
  std::ofstream transitions_out_;

  net::Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::thread monitor_thread_;
  std::mutex conns_mutex_;
  std::vector<std::shared_ptr<Connection>> conns_;
};

}  // namespace asa::manager
