#include "asa/manager.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <deque>
#include <functional>

#include "asa/log.hpp"

namespace asa::manager {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr const char* kLog = "manager";

const char* kRunStateNames[] = {"PENDING", "ASSIGNED", "RUNNING", "PAUSED", "COMPLETED", "STOPPED", "FAILED"};

std::string peer_address(int fd) {
  sockaddr_storage addr{};
  socklen_t len = sizeof addr;
  if (::getpeername(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) return "";
  char host[INET6_ADDRSTRLEN] = {0};
  std::uint16_t port = 0;
  if (addr.ss_family == AF_INET) {
    const auto* a = reinterpret_cast<const sockaddr_in*>(&addr);
    ::inet_ntop(AF_INET, &a->sin_addr, host, sizeof host);
    port = ntohs(a->sin_port);
  } else if (addr.ss_family == AF_INET6) {
    const auto* a = reinterpret_cast<const sockaddr_in6*>(&addr);
    ::inet_ntop(AF_INET6, &a->sin6_addr, host, sizeof host);
    port = ntohs(a->sin6_port);
  }
  return std::string(host) + ":" + std::to_string(port);
}

std::string numbered(const char* prefix, std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%06" PRIu64, prefix, n);
  return buf;
}

/// Numeric suffix of ids shaped like numbered(prefix, n); 0 otherwise.
std::uint64_t number_of(const std::string& id, const std::string& prefix) {
  if (id.size() <= prefix.size() || id.compare(0, prefix.size(), prefix) != 0) return 0;
  std::uint64_t n = 0;
  for (std::size_t i = prefix.size(); i < id.size(); ++i) {
    if (id[i] < '0' || id[i] > '9') return 0;
    n = n * 10 + static_cast<std::uint64_t>(id[i] - '0');
  }
  return n;
}

Json binding_json(const BindingSet& b) {
  Json j = Json::object();
  for (const auto& [k, v] : b) j[k] = v;
  return j;
}

BindingSet binding_from(const Json& j, std::size_t index) {
  if (!j.is_object()) {
    throw ApiError("ValidationFailed", "binding " + std::to_string(index) + " is not an object",
                   Json::array({{{"code", "BadBinding"}, {"index", index}, {"message", "binding must be an object"}}}));
  }
  BindingSet b;
  for (const auto& [k, v] : j.items()) b[k] = v;
  return b;
}

Json batch_to_json(const BatchInfo& b) {
  Json bindings = Json::array();
  for (const auto& s : b.bindings) bindings.push_back(binding_json(s));
  return {{"batch_id", b.batch_id},     {"template_id", b.template_id}, {"bindings", bindings},
          {"batch_seed", b.batch_seed}, {"speed_factor", b.speed_factor}, {"run_ids", b.run_ids},
          {"created", b.created}};
}

BatchInfo batch_from_json(const Json& j) {
  BatchInfo b;
  b.batch_id = j.at("batch_id").get<std::string>();
  b.template_id = j.at("template_id").get<std::string>();
  for (std::size_t i = 0; i < j.at("bindings").size(); ++i) b.bindings.push_back(binding_from(j["bindings"][i], i));
  b.batch_seed = j.at("batch_seed").get<std::uint64_t>();
  b.speed_factor = j.value("speed_factor", 0.0);
  b.run_ids = j.at("run_ids").get<std::vector<std::string>>();
  b.created = j.value("created", "");
  return b;
}

Json errors_json(const std::vector<ValidationError>& errors, std::optional<std::size_t> index = std::nullopt) {
  Json out = Json::array();
  for (const auto& e : errors) {
    Json j = e;
    if (index) j["index"] = *index;
    out.push_back(std::move(j));
  }
  return out;
}

std::string hex16(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

}  // namespace

std::string to_string(RunState s) { return kRunStateNames[static_cast<int>(s)]; }

RunState run_state_from_string(const std::string& s) {
  for (int i = 0; i < 7; ++i) {
    if (s == kRunStateNames[i]) return static_cast<RunState>(i);
  }
  throw Error("BadState", "unknown run state '" + s + "'");
}

std::string to_string(NodeStatus s) {
  switch (s) {
    case NodeStatus::Live: return "LIVE";
    case NodeStatus::Suspect: return "SUSPECT";
    case NodeStatus::Dead: return "DEAD";
  }
  return "DEAD";
}

bool is_terminal(RunState s) {
  return s == RunState::Completed || s == RunState::Stopped || s == RunState::Failed;
}

namespace {
bool is_active(RunState s) { return s == RunState::Assigned || s == RunState::Running || s == RunState::Paused; }
}  // namespace

Json to_json(const RunInfo& r, bool include_request) {
  Json j = {{"run_id", r.run_id},
            {"state", to_string(r.state)},
            {"node_id", r.node_id.empty() ? Json(nullptr) : Json(r.node_id)},
            {"attempts", r.attempts},
            {"seq", r.seq},
            {"speed_factor", r.speed_factor},
            {"batch_id", r.batch_id.empty() ? Json(nullptr) : Json(r.batch_id)},
            {"batch_index", r.batch_index},
            {"reason", r.reason},
            {"through_step", r.through_step},
            {"max_steps", r.request.scenario.sim.max_steps},
            {"seed", r.request.seed},
            {"timestamps", r.timestamps}};
  if (include_request) j["request"] = r.request;
  return j;
}

RunInfo run_from_json(const Json& j) {
  RunInfo r;
  r.run_id = j.at("run_id").get<std::string>();
  r.state = run_state_from_string(j.at("state").get<std::string>());
  if (j.at("node_id").is_string()) r.node_id = j["node_id"].get<std::string>();
  r.attempts = j.at("attempts").get<std::uint32_t>();
  r.seq = j.at("seq").get<std::uint64_t>();
  r.speed_factor = j.value("speed_factor", 0.0);
  if (j.at("batch_id").is_string()) r.batch_id = j["batch_id"].get<std::string>();
  r.batch_index = j.value("batch_index", std::uint64_t{0});
  r.reason = j.value("reason", "");
  r.through_step = j.value("through_step", std::int64_t{-1});
  r.timestamps = j.value("timestamps", std::map<std::string, std::string>{});
  r.request = j.at("request").get<ExecutionRequest>();
  return r;
}

Json to_json(const NodeInfo& n, std::size_t assigned) {
  return {{"node_id", n.node_id},
          {"address", n.address},
          {"capacity", n.capacity},
          {"running", std::vector<std::string>(n.running.begin(), n.running.end())},
          {"assigned", assigned},
          {"last_heartbeat", n.last_heartbeat},
          {"status", to_string(n.status)}};
}

// --- connections ------------------------------------------------------------------

struct Manager::Connection {
  net::Socket sock;
  std::string peer;
  std::string node_id;  // set on Hello, guarded by the manager mutex
  std::mutex m;
  std::condition_variable cv;
  std::deque<protocol::Bytes> out;
  bool closed = false;
  std::thread reader;
  std::thread writer;
  std::atomic<int> finished{0};

  void send(const protocol::Message& msg) {
    auto bytes = protocol::encode(msg);
    std::lock_guard lock(m);
    if (closed) return;
    out.push_back(std::move(bytes));
    cv.notify_one();
  }

  void close() {
    std::lock_guard lock(m);
    if (!closed) {
      closed = true;
      sock.shutdown();
    }
    cv.notify_all();
  }

  void write_loop() {
    std::unique_lock lock(m);
    for (;;) {
      cv.wait(lock, [&] { return closed || !out.empty(); });
      if (closed) break;
      auto bytes = std::move(out.front());
      out.pop_front();
      lock.unlock();
      try {
        net::send_all(sock, bytes);
      } catch (const Error&) {
        lock.lock();
        closed = true;
        sock.shutdown();
        break;
      }
      lock.lock();
    }
    ++finished;
  }
};

struct Manager::NodeEntry {
  NodeInfo info;
  std::shared_ptr<Connection> conn;
  Clock::time_point last_seen = Clock::now();
  bool reconciled = true;
  std::set<std::string> hello_assigned;
  Clock::time_point refuse_until{};
};

// --- lifecycle --------------------------------------------------------------------

Manager::Manager(ManagerConfig config)
    : config_(std::move(config)), catalog_(config_.data_root), store_(config_.data_root, {config_.fsync}) {
  reload_extensions();
  load_state();
}

Manager::~Manager() { stop(); }

std::vector<std::string> Manager::reload_extensions() {
  auto reg = std::make_shared<ModelRegistry>(ModelRegistry::with_builtins());
  std::vector<std::string> failures;
  for (const auto& dir : config_.extension_dirs) {
    for (auto& f : reg->load_extension_dir(dir)) failures.push_back(std::move(f));
  }
  for (const auto& f : failures) log::warn(kLog, "extension not loaded: " + f);
  std::lock_guard lock(mutex_);
  registry_ = std::move(reg);
  return failures;
}

std::shared_ptr<const ModelRegistry> Manager::registry() const {
  std::lock_guard lock(mutex_);
  return registry_;
}

std::vector<ModelManifest> Manager::manifests() const { return registry()->manifests(); }

void Manager::load_state() {
  std::lock_guard lock(mutex_);
  for (const auto& e : catalog_.list("batch")) {
    auto b = batch_from_json(e.body);
    next_batch_ = std::max(next_batch_, number_of(b.batch_id, "b") + 1);
    batches_.emplace(b.batch_id, std::move(b));
  }
  for (const auto& e : catalog_.list("run")) {
    auto r = run_from_json(e.body);
    next_run_seq_ = std::max(next_run_seq_, r.seq + 1);
    next_single_ = std::max(next_single_, number_of(r.run_id, "r") + 1);
    if (is_active(r.state) && !r.node_id.empty() && !nodes_.count(r.node_id)) {
      // Placeholder until the node says hello again; goes DEAD otherwise.
      auto n = std::make_unique<NodeEntry>();
      n->info.node_id = r.node_id;
      n->info.status = NodeStatus::Suspect;
      nodes_.emplace(r.node_id, std::move(n));
    }
    runs_.emplace(r.run_id, std::move(r));
  }
  const fs::path tlog = config_.data_root / "transitions.jsonl";
  if (std::ifstream in(tlog); in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        const auto j = Json::parse(line);
        next_seq_ = std::max(next_seq_, j.at("seq").get<std::uint64_t>() + 1);
      } catch (const std::exception&) {
        log::warn(kLog, "skipping unreadable transition line");
      }
    }
  }
  fs::create_directories(config_.data_root);
  transitions_out_.open(tlog, std::ios::app | std::ios::binary);
  if (!transitions_out_) throw Error("IoError", "cannot open " + tlog.string());
  if (!runs_.empty()) log::info(kLog, "restored " + std::to_string(runs_.size()) + " runs");
}

void Manager::start() {
  listener_ = net::listen_tcp(config_.listen);
  port_ = net::local_port(listener_);
  log::info(kLog, "node port " + std::to_string(port_));
  accept_thread_ = std::thread([this] { accept_loop(); });
  monitor_thread_ = std::thread([this] { monitor_loop(); });
}

std::uint16_t Manager::node_port() const { return port_; }

void Manager::stop() {
  if (stopping_.exchange(true)) return;
  listener_.shutdown();
  if (accept_thread_.joinable()) accept_thread_.join();
  if (monitor_thread_.joinable()) monitor_thread_.join();
  std::vector<std::shared_ptr<Connection>> conns;
  {
    std::lock_guard lock(conns_mutex_);
    conns.swap(conns_);
  }
  for (auto& c : conns) c->close();
  for (auto& c : conns) {
    if (c->reader.joinable()) c->reader.join();
    if (c->writer.joinable()) c->writer.join();
  }
  std::lock_guard lock(mutex_);
  for (auto& [_, n] : nodes_) n->conn.reset();
  changed_.notify_all();
  transitions_out_.flush();
}

void Manager::accept_loop() {
  while (!stopping_) {
    net::Socket s = net::accept_tcp(listener_);
    if (!s.valid()) break;
    auto conn = std::make_shared<Connection>();
    conn->peer = peer_address(s.fd());
    conn->sock = std::move(s);
    conn->writer = std::thread([conn] { conn->write_loop(); });
    conn->reader = std::thread([this, conn] { serve(conn); });
    std::lock_guard lock(conns_mutex_);
    std::erase_if(conns_, [](const std::shared_ptr<Connection>& c) {
      if (c->finished.load() < 2) return false;
      c->reader.join();
      c->writer.join();
      return true;
    });
    conns_.push_back(std::move(conn));
  }
}

void Manager::serve(std::shared_ptr<Connection> conn) {
  protocol::FrameReader reader;
  try {
    while (!stopping_) {
      auto data = net::receive(conn->sock, std::chrono::milliseconds(200));
      if (!data) {
        std::lock_guard lock(conn->m);
        if (conn->closed) break;
        continue;
      }
      if (data->empty()) break;
      for (auto& item : reader.feed(*data)) {
        if (item.status != protocol::DecodeStatus::Ok) {
          log::warn(kLog, conn->peer + ": bad frame " + protocol::to_string(item.status) + " " + item.detail);
          conn->send(protocol::ErrorMsg{protocol::to_string(item.status), item.detail});
          continue;
        }
        handle(conn, std::move(*item.message));
      }
    }
  } catch (const std::exception& e) {
    log::warn(kLog, conn->peer + ": " + e.what());
  }
  conn->close();
  {
    std::lock_guard lock(mutex_);
    if (!conn->node_id.empty()) {
      auto it = nodes_.find(conn->node_id);
      if (it != nodes_.end() && it->second->conn == conn) {
        it->second->conn.reset();
        log::info(kLog, "link to " + conn->node_id + " closed");
      }
    }
  }
  ++conn->finished;
}

void Manager::monitor_loop() {
  while (!stopping_) {
    {
      std::unique_lock lock(mutex_);
      const auto now = Clock::now();
      for (auto& [_, n] : nodes_) {
        const double age = std::chrono::duration<double>(now - n->last_seen).count();
        if (n->info.status == NodeStatus::Live && age > config_.suspect_after_s) {
          node_transition(*n, NodeStatus::Suspect);
        }
        if (n->info.status == NodeStatus::Suspect && age > config_.dead_after_s) {
          node_transition(*n, NodeStatus::Dead);
          node_lost(*n);
        }
      }
      schedule();
      changed_.wait_for(lock, std::chrono::milliseconds(100), [&] { return stopping_.load(); });
    }
  }
}

// --- state machine ----------------------------------------------------------------

void Manager::log_event(Json entry) {
  entry["seq"] = next_seq_++;
  entry["time"] = log::timestamp();
  transitions_out_ << entry.dump() << '\n';
  transitions_out_.flush();
}

void Manager::persist(const RunInfo& run) { catalog_.put("run", run.run_id, to_json(run, true)); }

void Manager::transition(RunInfo& run, RunState to, const std::string& reason) {
  const RunState from = run.state;
  run.state = to;
  run.reason = reason;
  run.timestamps[to_string(to)] = log::timestamp();
  log_event({{"kind", "run"},
             {"run_id", run.run_id},
             {"from", to_string(from)},
             {"to", to_string(to)},
             {"node_id", run.node_id.empty() ? Json(nullptr) : Json(run.node_id)},
             {"attempts", run.attempts},
             {"reason", reason}});
  persist(run);
  log::debug(kLog, run.run_id + " " + to_string(from) + " -> " + to_string(to) +
                       (run.node_id.empty() ? "" : " on " + run.node_id) + (reason.empty() ? "" : " (" + reason + ")"));
  ++version_;
  changed_.notify_all();
}

void Manager::node_transition(NodeEntry& node, NodeStatus to) {
  const NodeStatus from = node.info.status;
  if (from == to) return;
  node.info.status = to;
  log_event({{"kind", "node"}, {"node_id", node.info.node_id}, {"from", to_string(from)}, {"to", to_string(to)}});
  log::info(kLog, "node " + node.info.node_id + " " + to_string(to));
  ++version_;
  changed_.notify_all();
}

namespace {

void requeue(RunInfo& run, std::uint32_t max_attempts, const std::string& reason,
             const std::function<void(RunInfo&, RunState, const std::string&)>& apply) {
  if (run.attempts + 1 > max_attempts) {
    apply(run, RunState::Failed, "node lost");
    return;
  }
  ++run.attempts;
  run.node_id.clear();
  run.through_step = -1;
  apply(run, RunState::Pending, reason);
}

}  // namespace

void Manager::node_lost(NodeEntry& node) {
  for (auto& [_, run] : runs_) {
    if (run.node_id == node.info.node_id && is_active(run.state)) {
      requeue(run, config_.max_attempts, "node " + node.info.node_id + " lost",
              [this](RunInfo& r, RunState s, const std::string& why) { transition(r, s, why); });
    }
  }
  node.info.running.clear();
  if (node.conn) {
    node.conn->close();
    node.conn.reset();
  }
}

std::size_t Manager::load_of(const std::string& node_id) const {
  std::size_t n = 0;
  for (const auto& [_, run] : runs_) n += run.node_id == node_id && is_active(run.state);
  return n;
}

void Manager::schedule() {
  std::vector<RunInfo*> pending;
  for (auto& [_, run] : runs_) {
    if (run.state == RunState::Pending) pending.push_back(&run);
  }
  if (pending.empty()) return;
  std::sort(pending.begin(), pending.end(), [](const RunInfo* a, const RunInfo* b) { return a->seq < b->seq; });
  const auto now = Clock::now();
  for (RunInfo* run : pending) {
    NodeEntry* best = nullptr;
    std::size_t best_load = 0;
    for (auto& [id, n] : nodes_) {
      if (n->info.status != NodeStatus::Live || !n->conn || now < n->refuse_until) continue;
      const std::size_t load = load_of(id);
      if (load >= n->info.capacity) continue;
      if (!best || load < best_load) {
        best = n.get();
        best_load = load;
      }
    }
    if (!best) break;
    run->node_id = best->info.node_id;
    transition(*run, RunState::Assigned);
    ExecutionRequest req = run->request;
    req.request_id = run->run_id;
    best->conn->send(protocol::Assign{std::move(req), run->speed_factor});
  }
}

RunInfo& Manager::add_run(ExecutionRequest request, double speed_factor, const std::string& batch_id) {
  RunInfo r;
  r.run_id = request.request_id;
  r.batch_id = batch_id;
  r.batch_index = request.origin.index;
  r.request = std::move(request);
  r.speed_factor = speed_factor;
  r.seq = next_run_seq_++;
  r.timestamps["PENDING"] = log::timestamp();
  auto& run = runs_.emplace(r.run_id, std::move(r)).first->second;
  log_event({{"kind", "run"},
             {"run_id", run.run_id},
             {"from", nullptr},
             {"to", "PENDING"},
             {"node_id", nullptr},
             {"attempts", run.attempts},
             {"reason", "submitted"}});
  persist(run);
  return run;
}

// --- node messages ----------------------------------------------------------------

void Manager::handle(const std::shared_ptr<Connection>& conn, protocol::Message msg) {
  if (auto* batch = std::get_if<protocol::RecordBatch>(&msg)) {
    on_records(conn, std::move(*batch));
    return;
  }
  std::lock_guard lock(mutex_);
  auto owner = [&](const std::string& run_id) -> RunInfo* {
    auto it = runs_.find(run_id);
    if (it == runs_.end() || conn->node_id.empty() || it->second.node_id != conn->node_id) return nullptr;
    if (is_terminal(it->second.state) || it->second.state == RunState::Pending) return nullptr;
    return &it->second;
  };

  if (auto* hello = std::get_if<protocol::Hello>(&msg)) {
    if (!store::valid_id(hello->node_id) || hello->capacity < 1) {
      conn->send(protocol::ErrorMsg{"BadHello", "node id must be a valid id and capacity >= 1"});
      return;
    }
    auto& slot = nodes_[hello->node_id];
    if (!slot) {
      slot = std::make_unique<NodeEntry>();
      slot->info.node_id = hello->node_id;
    }
    NodeEntry& n = *slot;
    if (n.conn && n.conn != conn) n.conn->close();
    n.conn = conn;
    conn->node_id = hello->node_id;
    n.info.capacity = hello->capacity;
    n.info.address = conn->peer;
    n.last_seen = Clock::now();
    n.info.last_heartbeat = log::timestamp();
    n.reconciled = false;
    n.hello_assigned.clear();
    for (const auto& [id, run] : runs_) {
      if (run.node_id == n.info.node_id && is_active(run.state)) n.hello_assigned.insert(id);
    }
    log::info(kLog, "hello from " + n.info.node_id + " capacity " + std::to_string(n.info.capacity) + " at " +
                        conn->peer);
    node_transition(n, NodeStatus::Live);
    schedule();
  } else if (auto* hb = std::get_if<protocol::Heartbeat>(&msg)) {
    auto it = nodes_.find(hb->node_id);
    if (it == nodes_.end() || it->second->conn != conn) return;
    NodeEntry& n = *it->second;
    n.last_seen = Clock::now();
    n.info.last_heartbeat = log::timestamp();
    n.info.running = std::set<std::string>(hb->running_run_ids.begin(), hb->running_run_ids.end());
    node_transition(n, NodeStatus::Live);
    if (!n.reconciled) {
      n.reconciled = true;
      for (const auto& id : n.hello_assigned) {
        auto r = runs_.find(id);
        if (r == runs_.end() || r->second.node_id != n.info.node_id || !is_active(r->second.state)) continue;
        if (n.info.running.count(id)) continue;
        requeue(r->second, config_.max_attempts, "not running on " + n.info.node_id + " after reconnect",
                [this](RunInfo& run, RunState s, const std::string& why) { transition(run, s, why); });
      }
      n.hello_assigned.clear();
    }
    for (const auto& id : n.info.running) {
      auto r = runs_.find(id);
      if (r == runs_.end() || r->second.node_id != n.info.node_id || !is_active(r->second.state)) {
        log::info(kLog, "stopping orphan run " + id + " on " + n.info.node_id);
        conn->send(protocol::Control{id, protocol::Stop{}});
      }
    }
    ++version_;
    schedule();
  } else if (auto* ack = std::get_if<protocol::AssignAck>(&msg)) {
    RunInfo* run = owner(ack->run_id);
    if (!run || run->state != RunState::Assigned || ack->accepted) return;
    run->node_id.clear();
    transition(*run, RunState::Pending, "refused: " + ack->reason);
    auto n = nodes_.find(conn->node_id);
    if (n != nodes_.end()) {
      n->second->refuse_until =
          Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(config_.refusal_backoff_s));
    }
  } else if (auto* sc = std::get_if<protocol::RunStateChange>(&msg)) {
    RunInfo* run = owner(sc->run_id);
    if (!run) return;
    if (sc->state == "RUNNING") {
      if (run->state != RunState::Running) transition(*run, RunState::Running, sc->detail);
    } else if (sc->state == "PAUSED") {
      if (run->state != RunState::Paused) transition(*run, RunState::Paused, sc->detail);
    } else if (sc->state == "COMPLETED") {
      try {
        store_.mark_complete(run->run_id, run->attempts);
      } catch (const Error& e) {
        log::error(kLog, run->run_id + ": " + e.what());
      }
      transition(*run, RunState::Completed, sc->detail);
    } else if (sc->state == "STOPPED") {
      transition(*run, RunState::Stopped, sc->detail);
    } else if (sc->state == "FAILED") {
      transition(*run, RunState::Failed, sc->detail);
    } else {
      log::warn(kLog, "unknown state '" + sc->state + "' for " + sc->run_id);
    }
    schedule();
  } else if (auto* err = std::get_if<protocol::ErrorMsg>(&msg)) {
    const auto colon = err->text.find(": ");
    const std::string run_id = colon == std::string::npos ? err->text : err->text.substr(0, colon);
    log::warn(kLog, "node " + conn->node_id + " reported " + err->code + ": " + err->text);
    if (runs_.count(run_id)) {
      control_errors_[run_id] = {err->code, err->text};
      changed_.notify_all();
    }
  } else if (std::get_if<protocol::Bye>(&msg)) {
    auto it = nodes_.find(conn->node_id);
    if (it != nodes_.end() && it->second->conn == conn) {
      node_transition(*it->second, NodeStatus::Dead);
      node_lost(*it->second);
      schedule();
    }
  }
}

void Manager::on_records(const std::shared_ptr<Connection>& conn, protocol::RecordBatch batch) {
  std::uint32_t attempt = 0;
  {
    std::lock_guard lock(mutex_);
    auto it = runs_.find(batch.run_id);
    if (it == runs_.end() || conn->node_id.empty() || it->second.node_id != conn->node_id ||
        !is_active(it->second.state)) {
      return;
    }
    attempt = it->second.attempts;
  }
  if (batch.records.empty()) return;
  std::int64_t through = -1;
  try {
    through = store_.append(batch.run_id, attempt, batch.records);
  } catch (const Error& e) {
    log::error(kLog, batch.run_id + ": " + e.what());
    if (e.code() == "CorruptLog" || e.code() == "StorageFull") {
      std::lock_guard lock(mutex_);
      auto it = runs_.find(batch.run_id);
      if (it != runs_.end() && is_active(it->second.state)) {
        transition(it->second, RunState::Failed, e.code() + ": " + e.what());
        conn->send(protocol::Control{batch.run_id, protocol::Stop{}});
      }
    } else {
      conn->send(protocol::ErrorMsg{e.code(), batch.run_id + ": " + e.what()});
    }
    return;
  }
  {
    std::lock_guard lock(mutex_);
    auto it = runs_.find(batch.run_id);
    if (it != runs_.end() && it->second.attempts == attempt) {
      it->second.through_step = std::max(it->second.through_step, through);
      ++version_;
      changed_.notify_all();
    }
  }
  conn->send(protocol::RecordAck{batch.run_id, through});
}

// --- documents and submissions ----------------------------------------------------

namespace {

std::string pick_id(const std::optional<std::string>& id, const std::string& name) {
  const std::string chosen = id ? *id : name;
  if (!store::valid_id(chosen)) {
    throw ApiError("BadId", "'" + chosen + "' is not a valid id (letters, digits, '_', '-', '.')");
  }
  return chosen;
}

template <class T>
T parse_body(const Json& body) {
  try {
    return body.get<T>();
  } catch (const SchemaError& e) {
    throw ApiError("ValidationFailed", e.what(),
                   Json::array({{{"code", e.code()}, {"path", ""}, {"message", e.what()}}}));
  } catch (const Json::exception& e) {
    throw ApiError("ValidationFailed", e.what(),
                   Json::array({{{"code", "SchemaError"}, {"path", ""}, {"message", e.what()}}}));
  }
}

store::CatalogEntry cas_put(store::Catalog& catalog, const std::string& kind, const std::string& id, const Json& body,
                            std::optional<std::uint64_t> expected) {
  try {
    return catalog.put(kind, id, body, expected);
  } catch (const Error& e) {
    if (e.code() == "RevisionConflict" && expected && *expected == 0) {
      throw ApiError("AlreadyExists", kind + " '" + id + "' already exists");
    }
    throw;
  }
}

}  // namespace

store::CatalogEntry Manager::put_scenario(const std::optional<std::string>& id, const Json& body,
                                          std::optional<std::uint64_t> expected_revision) {
  const auto spec = parse_body<ScenarioSpec>(body);
  const auto problems = validate(spec, manifests());
  if (!problems.empty()) throw ApiError("ValidationFailed", "scenario is invalid", errors_json(problems));
  return cas_put(catalog_, "scenario", pick_id(id, spec.name), Json(spec), expected_revision);
}

store::CatalogEntry Manager::put_template(const std::optional<std::string>& id, const Json& body,
                                          std::optional<std::uint64_t> expected_revision) {
  const auto tmpl = parse_body<ScenarioTemplate>(body);
  auto problems = validate_template(tmpl);
  if (!problems.empty()) throw ApiError("ValidationFailed", "template is invalid", errors_json(problems));
  return cas_put(catalog_, "template", pick_id(id, tmpl.base.name), Json(tmpl), expected_revision);
}

BatchInfo Manager::submit_batch(const Json& request) {
  if (!request.is_object() || !request.contains("template_id") || !request["template_id"].is_string()) {
    throw ApiError("ValidationFailed", "template_id is required",
                   Json::array({{{"code", "MissingField"}, {"path", "template_id"}, {"message", "required"}}}));
  }
  const std::string template_id = request["template_id"].get<std::string>();
  auto entry = catalog_.find("template", template_id);
  if (!entry) throw ApiError("UnknownTemplate", "template '" + template_id + "' not found");
  const auto tmpl = entry->body.get<ScenarioTemplate>();

  std::vector<BindingSet> bindings;
  try {
    if (request.contains("bindings")) {
      const Json& b = request["bindings"];
      if (!b.is_array()) throw ApiError("ValidationFailed", "bindings must be a list");
      for (std::size_t i = 0; i < b.size(); ++i) bindings.push_back(binding_from(b[i], i));
    } else if (request.contains("factorial")) {
      bindings = full_factorial(factors_from_json(request["factorial"]));
    } else if (request.contains("lhs")) {
      const Json& l = request["lhs"];
      if (!l.is_object() || !l.contains("n") || !l.contains("ranges")) {
        throw ApiError("ValidationFailed", "lhs needs n and ranges");
      }
      bindings = latin_hypercube(l["n"].get<std::size_t>(), ranges_from_json(l["ranges"]),
                                 l.value("seed", std::uint64_t{0}));
    } else {
      throw ApiError("ValidationFailed", "one of bindings, factorial or lhs is required");
    }
  } catch (const ApiError&) {
    throw;
  } catch (const Error& e) {
    throw ApiError("ValidationFailed", e.what(), Json::array({{{"code", e.code()}, {"message", e.what()}}}));
  } catch (const Json::exception& e) {
    throw ApiError("ValidationFailed", e.what(), Json::array({{{"code", "SchemaError"}, {"message", e.what()}}}));
  }

  const std::uint64_t batch_seed = request.value("batch_seed", std::uint64_t{0});
  const double speed = request.value("speed_factor", 0.0);
  if (!(speed >= 0.0)) throw ApiError("ValidationFailed", "speed_factor must be >= 0");

  std::string batch_id;
  {
    std::lock_guard lock(mutex_);
    batch_id = numbered("b", next_batch_++);
  }
  std::vector<ExecutionRequest> requests;
  try {
    requests = expand_batch(tmpl, bindings, batch_seed, batch_id);
  } catch (const ScenarioError& e) {
    Json err = {{"code", e.code()}, {"message", e.what()}};
    if (e.index()) err["index"] = *e.index();
    throw ApiError("ValidationFailed", e.what(), Json::array({err}));
  }
  const auto mf = manifests();
  Json problems = Json::array();
  for (std::size_t i = 0; i < requests.size(); ++i) {
    for (auto& e : errors_json(validate(requests[i].scenario, mf), i)) problems.push_back(std::move(e));
  }
  if (!problems.empty()) throw ApiError("ValidationFailed", "batch members are invalid", problems);

  BatchInfo info;
  info.batch_id = batch_id;
  info.template_id = template_id;
  info.bindings = bindings;
  info.batch_seed = batch_seed;
  info.speed_factor = speed;
  info.created = log::timestamp();
  for (const auto& r : requests) info.run_ids.push_back(r.request_id);

  std::lock_guard lock(mutex_);
  catalog_.put("batch", batch_id, batch_to_json(info));
  batches_.emplace(batch_id, info);
  for (auto& r : requests) add_run(std::move(r), speed, batch_id);
  log::info(kLog, "batch " + batch_id + " with " + std::to_string(info.run_ids.size()) + " runs");
  ++version_;
  changed_.notify_all();
  schedule();
  return info;
}

RunInfo Manager::submit_run(const Json& request) {
  if (!request.is_object()) throw ApiError("ValidationFailed", "body must be an object");
  ScenarioSpec spec;
  if (request.contains("scenario")) {
    spec = parse_body<ScenarioSpec>(request["scenario"]);
  } else if (request.contains("scenario_id") && request["scenario_id"].is_string()) {
    const auto id = request["scenario_id"].get<std::string>();
    auto e = catalog_.find("scenario", id);
    if (!e) throw ApiError("UnknownScenario", "scenario '" + id + "' not found");
    spec = e->body.get<ScenarioSpec>();
  } else {
    throw ApiError("ValidationFailed", "scenario or scenario_id is required");
  }
  const auto problems = validate(spec, manifests());
  if (!problems.empty()) throw ApiError("ValidationFailed", "scenario is invalid", errors_json(problems));
  const double speed = request.value("speed_factor", 0.0);
  if (!(speed >= 0.0)) throw ApiError("ValidationFailed", "speed_factor must be >= 0");

  std::lock_guard lock(mutex_);
  ExecutionRequest req;
  req.request_id = numbered("r", next_single_++);
  req.seed = request.value("seed", spec.sim.seed);
  req.scenario = std::move(spec);
  RunInfo& run = add_run(std::move(req), speed, "");
  ++version_;
  changed_.notify_all();
  schedule();
  return run;
}

// --- queries ----------------------------------------------------------------------

std::vector<RunInfo> Manager::runs(const std::string& batch_id, std::optional<RunState> state) const {
  std::lock_guard lock(mutex_);
  std::vector<RunInfo> out;
  for (const auto& [_, r] : runs_) {
    if (!batch_id.empty() && r.batch_id != batch_id) continue;
    if (state && r.state != *state) continue;
    out.push_back(r);
  }
  std::sort(out.begin(), out.end(), [](const RunInfo& a, const RunInfo& b) { return a.seq < b.seq; });
  return out;
}

std::optional<RunInfo> Manager::run(const std::string& run_id) const {
  std::lock_guard lock(mutex_);
  auto it = runs_.find(run_id);
  if (it == runs_.end()) return std::nullopt;
  return it->second;
}

std::vector<BatchInfo> Manager::batches() const {
  std::lock_guard lock(mutex_);
  std::vector<BatchInfo> out;
  for (const auto& [_, b] : batches_) out.push_back(b);
  return out;
}

std::optional<BatchInfo> Manager::batch(const std::string& batch_id) const {
  std::lock_guard lock(mutex_);
  auto it = batches_.find(batch_id);
  if (it == batches_.end()) return std::nullopt;
  return it->second;
}

std::map<std::string, std::size_t> Manager::rollup(const BatchInfo& b) const {
  std::lock_guard lock(mutex_);
  std::map<std::string, std::size_t> counts;
  for (const char* s : kRunStateNames) counts[s] = 0;
  for (const auto& id : b.run_ids) {
    auto it = runs_.find(id);
    if (it != runs_.end()) ++counts[to_string(it->second.state)];
  }
  return counts;
}

Json Manager::batch_json(const BatchInfo& b) const {
  Json j = batch_to_json(b);
  const auto counts = rollup(b);
  std::size_t terminal = 0;
  for (const char* s : {"COMPLETED", "STOPPED", "FAILED"}) terminal += counts.at(s);
  j["rollup"] = counts;
  j["size"] = b.run_ids.size();
  j["complete"] = terminal == b.run_ids.size();
  return j;
}

Json Manager::nodes_json() const {
  std::lock_guard lock(mutex_);
  Json out = Json::array();
  for (const auto& [id, n] : nodes_) out.push_back(to_json(n->info, load_of(id)));
  return out;
}

std::vector<Json> Manager::transitions(std::uint64_t since) const {
  std::vector<Json> out;
  {
    std::lock_guard lock(mutex_);
    const_cast<std::ofstream&>(transitions_out_).flush();
  }
  std::ifstream in(config_.data_root / "transitions.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto j = Json::parse(line);
      if (j.at("seq").get<std::uint64_t>() > since) out.push_back(std::move(j));
    } catch (const std::exception&) {
    }
  }
  return out;
}

std::uint64_t Manager::version() const {
  std::lock_guard lock(mutex_);
  return version_;
}

std::uint64_t Manager::wait_for_change(std::uint64_t seen, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  changed_.wait_for(lock, timeout, [&] { return version_ != seen || stopping_.load(); });
  return version_;
}

// --- control ----------------------------------------------------------------------

RunInfo Manager::control(const std::string& run_id, const protocol::ControlCommand& command,
                         std::chrono::milliseconds wait) {
  std::unique_lock lock(mutex_);
  auto it = runs_.find(run_id);
  if (it == runs_.end()) throw ApiError("UnknownRun", "run '" + run_id + "' not found");
  RunInfo& run = it->second;
  const std::string name = protocol::command_name(command);
  auto illegal = [&] {
    throw ApiError("IllegalTransition", name + " not allowed while " + to_string(run.state));
  };
  if (is_terminal(run.state)) illegal();
  if (run.state == RunState::Pending) {
    if (!std::holds_alternative<protocol::Stop>(command)) illegal();
    transition(run, RunState::Stopped, "stopped before scheduling");
    return run;
  }
  const bool is_play = std::holds_alternative<protocol::Play>(command);
  const bool is_pause = std::holds_alternative<protocol::Pause>(command);
  const bool is_resume = std::holds_alternative<protocol::Resume>(command);
  const bool is_stop = std::holds_alternative<protocol::Stop>(command);
  if (is_play) illegal();  // handlers start runs on assignment
  if (is_pause && run.state == RunState::Paused) illegal();
  if (is_resume && run.state != RunState::Paused) illegal();

  auto node = nodes_.find(run.node_id);
  if (node == nodes_.end() || node->second->info.status != NodeStatus::Live || !node->second->conn) {
    throw ApiError("NotRoutable", "node '" + run.node_id + "' is not reachable");
  }
  control_errors_.erase(run_id);
  node->second->conn->send(protocol::Control{run_id, command});

  auto reached = [&]() {
    const RunInfo& r = runs_.at(run_id);
    if (is_pause) return r.state == RunState::Paused || is_terminal(r.state);
    if (is_resume) return r.state == RunState::Running || is_terminal(r.state);
    if (is_stop) return is_terminal(r.state);
    return false;
  };
  const auto deadline = Clock::now() + ((is_pause || is_resume || is_stop) ? wait : std::min(wait, std::chrono::milliseconds(200)));
  changed_.wait_until(lock, deadline, [&] { return control_errors_.count(run_id) || reached() || stopping_.load(); });
  if (auto e = control_errors_.find(run_id); e != control_errors_.end()) {
    auto [code, text] = e->second;
    control_errors_.erase(e);
    throw ApiError(code, text);
  }
  RunInfo& current = runs_.at(run_id);
  if (const auto* s = std::get_if<protocol::SetSpeed>(&command)) {
    current.speed_factor = s->factor;
    persist(current);
  }
  return current;
}

// --- analysis ---------------------------------------------------------------------

analysis::BatchSummary Manager::analyze(const std::string& batch_id, const std::vector<analysis::MetricSpec>& metrics,
                                        std::vector<std::string>* warnings) {
  auto b = batch(batch_id);
  if (!b) throw ApiError("UnknownBatch", "batch '" + batch_id + "' not found");
  std::vector<std::string> notes = analysis::metric_warnings(metrics, manifests());
  std::vector<analysis::RunRow> rows;
  for (std::size_t i = 0; i < b->run_ids.size(); ++i) {
    analysis::RunRow row;
    row.run_index = i;
    row.run_id = b->run_ids[i];
    row.bindings = b->bindings.at(i);
    auto info = run(row.run_id);
    std::vector<StepRecord> records;
    const bool usable = info && info->state == RunState::Completed;
    if (usable) records = store_.read(row.run_id, std::nullopt, 0, UINT64_MAX);
    for (const auto& m : metrics) {
      if (!usable) {
        row.metrics[m.name] = std::nullopt;
        continue;
      }
      auto v = analysis::compute_metric(records, m);
      for (auto& w : v.warnings) notes.push_back(row.run_id + ": " + w);
      row.metrics[m.name] = v.value;
    }
    rows.push_back(std::move(row));
  }
  auto summary = analysis::aggregate(batch_id, std::move(rows));
  Json metric_json = Json::array();
  for (const auto& m : metrics) metric_json.push_back(m);
  const std::string key = batch_id + "-" + hex16(fnv1a64(metric_json.dump()));
  catalog_.put("analysis", key,
               {{"batch_id", batch_id}, {"metrics", metric_json}, {"summary", analysis::to_json(summary)},
                {"warnings", notes}});
  if (warnings) *warnings = std::move(notes);
  return summary;
}

}  // namespace asa::manager
