#include "asa/node.hpp"

#include <cmath>

#include "asa/log.hpp"

namespace asa::node {

using Clock = std::chrono::steady_clock;

std::string to_string(Phase p) {
  switch (p) {
    case Phase::Initializing: return "INITIALIZING";
    case Phase::Running: return "RUNNING";
    case Phase::Paused: return "PAUSED";
    case Phase::Stopping: return "STOPPING";
    case Phase::Done: return "DONE";
  }
  return "DONE";
}

double pace(double speed_factor, double step_dt, std::uint64_t steps_since_epoch, double elapsed_since_epoch) {
  if (!(speed_factor > 0.0)) return 0.0;
  const double due = static_cast<double>(steps_since_epoch) * step_dt / speed_factor;
  return std::max(0.0, due - elapsed_since_epoch);
}

void apply_control(ExecutionControl& exec, const protocol::ControlCommand& command) {
  auto illegal = [&](const std::string& what) {
    throw Error("IllegalTransition", what + " not allowed while " + to_string(exec.phase));
  };
  const bool live = exec.phase == Phase::Initializing || exec.phase == Phase::Running || exec.phase == Phase::Paused;
  std::visit(
      [&](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, protocol::Play>) {
          if (exec.phase != Phase::Initializing) illegal("play");
          exec.phase = Phase::Running;
        } else if constexpr (std::is_same_v<T, protocol::Pause>) {
          if (exec.phase != Phase::Running) illegal("pause");
          exec.phase = Phase::Paused;
        } else if constexpr (std::is_same_v<T, protocol::Resume>) {
          if (exec.phase != Phase::Paused) illegal("resume");
          exec.phase = Phase::Running;
        } else if constexpr (std::is_same_v<T, protocol::Stop>) {
          if (!live) illegal("stop");
          exec.phase = Phase::Stopping;
        } else if constexpr (std::is_same_v<T, protocol::SetSpeed>) {
          if (!live) illegal("set_speed");
          if (!(c.factor >= 0.0) || !std::isfinite(c.factor)) {
            throw Error("IllegalTransition", "speed factor must be finite and >= 0");
          }
          exec.speed_factor = c.factor;
        } else if constexpr (std::is_same_v<T, protocol::SetParam>) {
          if (!live) illegal("set_param");
          exec.pending_params.push_back({c.agent_id, c.param_path, c.value});
        }
      },
      command);
}

// --- run execution ---------------------------------------------------------------

class RunExecution::Control final : public ControlSource {
 public:
  explicit Control(RunExecution& run) : run_(run) {}

  BoundaryDecision at_boundary(std::uint64_t next_step, double) override {
    std::unique_lock lock(run_.mutex_);
    const double dt = run_.request_.scenario.sim.step_dt;
    bool held = false;
    for (;;) {
      auto& exec = run_.exec_;
      if (exec.phase == Phase::Stopping) return BoundaryDecision{true, {}};
      const bool buffer_full = run_.unacked_bytes_ > run_.options_.buffer_limit_bytes;
      if (exec.phase == Phase::Paused || buffer_full) {
        if (run_.reported_ != "PAUSED") {
          run_.flush_locked();
          run_.emit_state_locked("PAUSED", buffer_full && exec.phase != Phase::Paused ? "buffer_full" : "");
        }
        held = true;
        run_.cv_.wait_for(lock, std::chrono::milliseconds(200));
        continue;
      }
      if (held || epoch_factor_ != exec.speed_factor || !epoch_set_) {
        // Rebase so a pause or speed change never produces a catch-up burst.
        epoch_ = Clock::now();
        epoch_step_ = next_step - 1;
        epoch_factor_ = exec.speed_factor;
        epoch_set_ = true;
        held = false;
      }
      if (run_.reported_ != "RUNNING") run_.emit_state_locked("RUNNING", "");
      const double elapsed = std::chrono::duration<double>(Clock::now() - epoch_).count();
      const double wait = pace(exec.speed_factor, dt, next_step - epoch_step_, elapsed);
      if (wait > 0.0) {
        if (!run_.pending_.empty() && Clock::now() - run_.last_flush_ >= run_.options_.flush_interval) {
          run_.flush_locked();
        }
        run_.cv_.wait_for(lock, std::chrono::duration<double>(std::min(wait, 0.25)));
        continue;
      }
      BoundaryDecision d;
      d.param_updates = std::move(exec.pending_params);
      exec.pending_params.clear();
      return d;
    }
  }

 private:
  RunExecution& run_;
  Clock::time_point epoch_;
  std::uint64_t epoch_step_ = 0;
  double epoch_factor_ = 0.0;
  bool epoch_set_ = false;
};

class RunExecution::Sink final : public RecordSink {
 public:
  explicit Sink(RunExecution& run) : run_(run) {}

  void consume(std::uint64_t step, std::span<const StepRecord> records) override {
    std::lock_guard lock(run_.mutex_);
    run_.step_ = step;
    for (const auto& r : records) {
      run_.pending_bytes_ += 64 + r.agent_id.size() + r.tag.size() + 48 * r.payload.size();
      run_.pending_.push_back(r);
    }
    ++run_.pending_steps_;
    if (run_.pending_steps_ >= run_.options_.flush_steps || run_.pending_bytes_ >= run_.options_.flush_bytes ||
        Clock::now() - run_.last_flush_ >= run_.options_.flush_interval) {
      run_.flush_locked();
    }
  }

 private:
  RunExecution& run_;
};

RunExecution::RunExecution(ExecutionRequest request, double speed_factor,
                           std::shared_ptr<const ModelRegistry> registry, RunnerOptions options)
    : request_(std::move(request)), registry_(std::move(registry)), options_(options) {
  exec_.speed_factor = speed_factor;
  last_flush_ = Clock::now();
}

RunExecution::~RunExecution() {
  {
    std::lock_guard lock(mutex_);
    if (exec_.phase != Phase::Done && exec_.phase != Phase::Stopping) exec_.phase = Phase::Stopping;
    cv_.notify_all();
  }
  join();
}

void RunExecution::start() { thread_ = std::thread([this] { main(); }); }

void RunExecution::join() {
  if (thread_.joinable()) thread_.join();
}

Phase RunExecution::phase() const {
  std::lock_guard lock(mutex_);
  return exec_.phase;
}

double RunExecution::speed_factor() const {
  std::lock_guard lock(mutex_);
  return exec_.speed_factor;
}

void RunExecution::control(const protocol::ControlCommand& command) {
  std::lock_guard lock(mutex_);
  apply_control(exec_, command);
  cv_.notify_all();
}

void RunExecution::push_frame(Frame f) {
  if (f.batch) unacked_bytes_ += f.bytes.size();
  frames_.push_back(std::move(f));
}

void RunExecution::emit_state_locked(const std::string& state, const std::string& detail) {
  reported_ = state;
  push_frame({protocol::encode(protocol::RunStateChange{request_.request_id, state, detail}), false, -1, false});
}

void RunExecution::flush_locked() {
  last_flush_ = Clock::now();
  pending_steps_ = 0;
  pending_bytes_ = 0;
  if (pending_.empty()) return;
  const auto last = static_cast<std::int64_t>(pending_.back().step);
  protocol::RecordBatch batch{request_.request_id, std::move(pending_)};
  pending_.clear();
  push_frame({protocol::encode(batch), true, last, false});
}

std::vector<protocol::Bytes> RunExecution::take_unsent() {
  std::lock_guard lock(mutex_);
  std::vector<protocol::Bytes> out;
  for (auto& f : frames_) {
    if (!f.sent) {
      out.push_back(f.bytes);
      f.sent = true;
    }
  }
  std::erase_if(frames_, [](const Frame& f) { return f.sent && !f.batch; });
  return out;
}

void RunExecution::mark_all_unsent() {
  std::lock_guard lock(mutex_);
  for (auto& f : frames_) f.sent = false;
  // The last state may have been lost with the link; repeat it after the batches.
  if (!reported_.empty()) {
    std::string detail;
    if (exec_.phase == Phase::Done) detail = outcome_.reason;
    push_frame({protocol::encode(protocol::RunStateChange{request_.request_id, reported_, detail}), false, -1, false});
  }
}

void RunExecution::acknowledge(std::int64_t through_step) {
  std::lock_guard lock(mutex_);
  acked_step_ = std::max(acked_step_, through_step);
  std::erase_if(frames_, [&](const Frame& f) {
    if (f.batch && f.sent && f.last_step <= acked_step_) {
      unacked_bytes_ -= f.bytes.size();
      return true;
    }
    return false;
  });
  cv_.notify_all();
}

std::size_t RunExecution::unacked_bytes() const {
  std::lock_guard lock(mutex_);
  return unacked_bytes_;
}

bool RunExecution::drained() const {
  std::lock_guard lock(mutex_);
  return exec_.phase == Phase::Done && frames_.empty() && pending_.empty();
}

RunOutcome RunExecution::outcome() const {
  std::lock_guard lock(mutex_);
  return outcome_;
}

std::string RunExecution::reported_state() const {
  std::lock_guard lock(mutex_);
  return reported_;
}

void RunExecution::main() {
  RunOutcome outcome;
  bool proceed = true;
  try {
    const auto manifests = registry_->manifests();
    const auto problems = validate(request_.scenario, manifests);
    if (!problems.empty()) {
      outcome.status = RunStatus::Failed;
      outcome.reason = "invalid scenario: " + problems.front().code + " at " + problems.front().path + ": " +
                       problems.front().message;
      proceed = false;
    }
    if (proceed) {
      {
        std::lock_guard lock(mutex_);
        if (exec_.phase == Phase::Initializing) exec_.phase = Phase::Running;
      }
      Control control(*this);
      Sink sink(*this);
      outcome = run_simulation(request_.scenario, *registry_, sink, control, {request_.request_id, request_.seed});
    }
  } catch (const std::exception& e) {
    outcome.status = RunStatus::Failed;
    outcome.reason = e.what();
  }
  std::lock_guard lock(mutex_);
  flush_locked();
  std::string detail = outcome.reason;
  if (outcome.status != RunStatus::Failed) {
    detail = "last_step=" + std::to_string(outcome.last_step);
  } else if (!outcome.failed_agent_id.empty()) {
    detail = "agent " + outcome.failed_agent_id + ": " + outcome.reason;
  }
  outcome.reason = detail;
  outcome_ = outcome;
  exec_.phase = Phase::Done;
  emit_state_locked(to_string(outcome.status), detail);
  cv_.notify_all();
}

// --- handler daemon --------------------------------------------------------------

double backoff_delay(double initial, double cap, unsigned failures) {
  double d = initial;
  for (unsigned i = 0; i < failures && d < cap; ++i) d *= 2.0;
  return std::min(d, cap);
}

NodeDaemon::NodeDaemon(NodeConfig config) : config_(std::move(config)) {
  if (config_.capacity < 1) throw Error("BadConfig", "capacity must be >= 1");
  if (!(config_.heartbeat_interval_s > 0)) throw Error("BadConfig", "heartbeat interval must be > 0");
  reload_extensions();
}

NodeDaemon::~NodeDaemon() {
  stop();
  std::lock_guard lock(mutex_);
  runs_.clear();
}

void NodeDaemon::reload_extensions() {
  auto registry = std::make_shared<ModelRegistry>(ModelRegistry::with_builtins());
  std::vector<std::string> failures;
  for (const auto& dir : config_.extension_dirs) {
    for (auto& f : registry->load_extension_dir(dir)) failures.push_back(std::move(f));
  }
  for (const auto& f : failures) log::warn(config_.node_id, "extension not loaded: " + f);
  std::lock_guard lock(mutex_);
  registry_ = std::move(registry);
  load_failures_ = std::move(failures);
}

std::vector<std::string> NodeDaemon::load_failures() const {
  std::lock_guard lock(mutex_);
  return load_failures_;
}

std::size_t NodeDaemon::active_runs() const {
  std::lock_guard lock(mutex_);
  std::size_t n = 0;
  for (const auto& [_, r] : runs_) n += r->phase() != Phase::Done;
  return n;
}

std::vector<std::string> NodeDaemon::running_ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, r] : runs_) {
    if (r->phase() != Phase::Done) ids.push_back(id);
  }
  return ids;
}

void NodeDaemon::stop() {
  stopping_ = true;
  stop_cv_.notify_all();
}

bool NodeDaemon::sleep_interruptible(double seconds) {
  std::unique_lock lock(mutex_);
  return !stop_cv_.wait_for(lock, std::chrono::duration<double>(seconds), [this] { return stopping_.load(); });
}

void NodeDaemon::run() {
  unsigned failures = 0;
  while (!stopping_) {
    net::Socket sock;
    try {
      sock = net::connect_tcp(config_.manager, std::chrono::milliseconds(2000));
    } catch (const Error& e) {
      const double delay = backoff_delay(config_.backoff_initial_s, config_.backoff_max_s, failures++);
      log::info(config_.node_id, std::string(e.what()) + "; retrying in " + std::to_string(delay) + " s");
      sleep_interruptible(delay);
      continue;
    }
    failures = 0;
    connected_ = true;
    log::info(config_.node_id, "connected to manager");
    try {
      session(sock);
    } catch (const std::exception& e) {
      log::warn(config_.node_id, std::string("link lost: ") + e.what());
    }
    connected_ = false;
  }
}

void NodeDaemon::flush_outbound(net::Socket& sock) {
  std::vector<protocol::Bytes> frames;
  {
    std::lock_guard lock(mutex_);
    for (auto& [_, r] : runs_) {
      for (auto& f : r->take_unsent()) frames.push_back(std::move(f));
    }
  }
  for (const auto& f : frames) net::send_all(sock, f);
  std::lock_guard lock(mutex_);
  std::erase_if(runs_, [](const auto& kv) { return kv.second->drained(); });
}

void NodeDaemon::session(net::Socket& sock) {
  net::send_message(sock, protocol::Hello{config_.node_id, config_.capacity});
  {
    std::lock_guard lock(mutex_);
    for (auto& [_, r] : runs_) r->mark_all_unsent();
  }
  flush_outbound(sock);
  net::send_message(sock, protocol::Heartbeat{config_.node_id, running_ids()});
  auto next_heartbeat = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                           std::chrono::duration<double>(config_.heartbeat_interval_s));
  protocol::FrameReader reader;
  while (!stopping_) {
    if (reload_requested_.exchange(false)) {
      log::info(config_.node_id, "reloading extensions");
      reload_extensions();
    }
    auto data = net::receive(sock, std::chrono::milliseconds(20));
    if (data && data->empty()) throw Error("Disconnected", "manager closed the connection");
    if (data) {
      for (auto& item : reader.feed(*data)) {
        if (item.status == protocol::DecodeStatus::Ok) {
          handle(sock, *item.message);
        } else {
          log::warn(config_.node_id, "bad frame: " + protocol::to_string(item.status) + " " + item.detail);
          net::send_message(sock, protocol::ErrorMsg{protocol::to_string(item.status), item.detail});
        }
      }
    }
    flush_outbound(sock);
    if (Clock::now() >= next_heartbeat) {
      net::send_message(sock, protocol::Heartbeat{config_.node_id, running_ids()});
      next_heartbeat += std::chrono::duration_cast<Clock::duration>(
          std::chrono::duration<double>(config_.heartbeat_interval_s));
      if (next_heartbeat < Clock::now()) next_heartbeat = Clock::now();
    }
  }
  net::send_message(sock, protocol::Bye{config_.node_id});
}

void NodeDaemon::handle(net::Socket& sock, const protocol::Message& msg) {
  if (const auto* a = std::get_if<protocol::Assign>(&msg)) {
    const std::string& run_id = a->execution_request.request_id;
    protocol::AssignAck ack{run_id, false, ""};
    {
      std::lock_guard lock(mutex_);
      std::size_t active = 0;
      for (const auto& [_, r] : runs_) active += r->phase() != Phase::Done;
      if (runs_.count(run_id)) {
        ack.reason = "duplicate";
      } else if (active >= config_.capacity) {
        ack.reason = "capacity";
      } else {
        auto run = std::make_unique<RunExecution>(a->execution_request, a->speed_factor, registry_, config_.runner);
        run->start();
        runs_.emplace(run_id, std::move(run));
        ack.accepted = true;
      }
    }
    log::info(config_.node_id, "assign " + run_id + (ack.accepted ? " accepted" : " refused: " + ack.reason));
    net::send_message(sock, ack);
  } else if (const auto* c = std::get_if<protocol::Control>(&msg)) {
    std::optional<protocol::ErrorMsg> err;
    {
      std::lock_guard lock(mutex_);
      auto it = runs_.find(c->run_id);
      if (it == runs_.end()) {
        err = protocol::ErrorMsg{"UnknownRun", c->run_id};
      } else {
        try {
          it->second->control(c->command);
        } catch (const Error& e) {
          err = protocol::ErrorMsg{e.code(), c->run_id + ": " + e.what()};
        }
      }
    }
    if (err) net::send_message(sock, *err);
  } else if (const auto* ack = std::get_if<protocol::RecordAck>(&msg)) {
    std::lock_guard lock(mutex_);
    auto it = runs_.find(ack->run_id);
    if (it != runs_.end()) it->second->acknowledge(ack->through_step);
  } else if (const auto* e = std::get_if<protocol::ErrorMsg>(&msg)) {
    log::warn(config_.node_id, "manager error " + e->code + ": " + e->text);
  }
}

}  // namespace asa::node
