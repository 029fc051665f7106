#include <doctest.h>

#include <set>
#include <thread>

#include "asa/node.hpp"
#include "engine_fixtures.hpp"

using namespace asa;
using namespace asa::node;
using namespace asa::testing;
using namespace std::chrono_literals;

namespace {

ExecutionRequest request_for(ScenarioSpec spec, const std::string& id = "run") {
  ExecutionRequest r;
  r.request_id = id;
  r.seed = spec.sim.seed;
  r.scenario = std::move(spec);
  return r;
}

std::shared_ptr<const ModelRegistry> builtins() {
  static auto reg = std::make_shared<const ModelRegistry>(ModelRegistry::with_builtins());
  return reg;
}

// Plays the manager's side for one RunExecution: collects records and states.
struct Drain {
  std::vector<StepRecord> records;
  std::vector<protocol::RunStateChange> states;
  bool ack = true;

  void pump(RunExecution& run) {
    for (const auto& bytes : run.take_unsent()) {
      auto d = protocol::decode(bytes);
      REQUIRE(d.status == protocol::DecodeStatus::Ok);
      if (auto* b = std::get_if<protocol::RecordBatch>(&*d.message)) {
        records.insert(records.end(), b->records.begin(), b->records.end());
        if (ack) run.acknowledge(static_cast<std::int64_t>(b->records.back().step));
      } else if (auto* s = std::get_if<protocol::RunStateChange>(&*d.message)) {
        states.push_back(*s);
      }
    }
  }

  void until_done(RunExecution& run, std::chrono::seconds limit = 30s) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    while (!run.drained() && std::chrono::steady_clock::now() < deadline) {
      pump(run);
      std::this_thread::sleep_for(2ms);
    }
    pump(run);
  }

  template <class Pred>
  bool wait_for(RunExecution& run, Pred pred, std::chrono::milliseconds limit = 10000ms) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < deadline) {
      pump(run);
      if (pred()) return true;
      std::this_thread::sleep_for(2ms);
    }
    return false;
  }

  std::string last_state() const { return states.empty() ? "" : states.back().state; }
};

const std::vector<StepRecord>& golden_three_agent() {
  static const auto g = run_collect(load_scenario("three_agent.json"));
  return g;
}

}  // namespace

TEST_CASE("pace holds the step until its wall-clock slot") {
  CHECK(pace(0.0, 0.1, 10, 0.0) == 0.0);
  CHECK(pace(1.0, 0.1, 10, 0.0) == doctest::Approx(1.0));
  CHECK(pace(2.0, 0.1, 10, 0.25) == doctest::Approx(0.25));
  CHECK(pace(2.0, 0.1, 10, 0.9) == 0.0);
  CHECK(pace(0.5, 0.1, 1, 0.0) == doctest::Approx(0.2));
}

TEST_CASE("control transitions") {
  ExecutionControl e;
  CHECK_THROWS_AS(apply_control(e, protocol::Pause{}), Error);
  CHECK_THROWS_AS(apply_control(e, protocol::Resume{}), Error);
  apply_control(e, protocol::Play{});
  CHECK(e.phase == Phase::Running);
  CHECK_THROWS_AS(apply_control(e, protocol::Play{}), Error);
  CHECK_THROWS_AS(apply_control(e, protocol::Resume{}), Error);
  apply_control(e, protocol::Pause{});
  CHECK(e.phase == Phase::Paused);
  CHECK_THROWS_AS(apply_control(e, protocol::Pause{}), Error);
  apply_control(e, protocol::SetSpeed{4.0});
  CHECK(e.speed_factor == 4.0);
  CHECK_THROWS_AS(apply_control(e, protocol::SetSpeed{-1.0}), Error);
  apply_control(e, protocol::SetParam{"a", "agents.a.params.x", 1.0});
  CHECK(e.pending_params.size() == 1);
  apply_control(e, protocol::Resume{});
  apply_control(e, protocol::Stop{});
  CHECK(e.phase == Phase::Stopping);
  for (const protocol::ControlCommand& c :
       {protocol::ControlCommand{protocol::Play{}}, protocol::ControlCommand{protocol::Pause{}},
        protocol::ControlCommand{protocol::Resume{}}, protocol::ControlCommand{protocol::Stop{}},
        protocol::ControlCommand{protocol::SetSpeed{1.0}}}) {
    try {
      apply_control(e, c);
      FAIL("expected IllegalTransition");
    } catch (const Error& err) {
      CHECK(err.code() == "IllegalTransition");
    }
  }
  ExecutionControl fresh;
  apply_control(fresh, protocol::Stop{});
  CHECK(fresh.phase == Phase::Stopping);
}

TEST_CASE("reconnect backoff doubles to the cap") {
  CHECK(backoff_delay(1, 30, 0) == 1);
  CHECK(backoff_delay(1, 30, 1) == 2);
  CHECK(backoff_delay(1, 30, 4) == 16);
  CHECK(backoff_delay(1, 30, 5) == 30);
  CHECK(backoff_delay(1, 30, 50) == 30);
}

TEST_CASE("free-running execution reproduces the engine") {
  RunExecution run(request_for(load_scenario("three_agent.json")), 0.0, builtins());
  run.start();
  Drain d;
  d.until_done(run);
  CHECK(d.records == golden_three_agent());
  REQUIRE(d.states.size() >= 2);
  CHECK(d.states.front().state == "RUNNING");
  CHECK(d.states.back().state == "COMPLETED");
  CHECK(d.states.back().detail == "last_step=600");
  CHECK(run.unacked_bytes() == 0);
}

TEST_CASE("pause freezes the run and leaves the log identical") {
  RunExecution run(request_for(load_scenario("three_agent.json")), 100.0, builtins());
  run.start();
  Drain d;
  for (int i = 0; i < 3; ++i) {
    std::this_thread::sleep_for(100ms);
    run.control(protocol::Pause{});
    REQUIRE(d.wait_for(run, [&] { return d.last_state() == "PAUSED"; }));
    const auto frozen = run.current_step();
    std::this_thread::sleep_for(150ms);
    d.pump(run);
    CHECK(run.current_step() == frozen);
    const std::uint64_t last_seen = d.records.empty() ? 0 : d.records.back().step;
    CHECK(last_seen == frozen);
    run.control(protocol::Resume{});
  }
  d.until_done(run);
  CHECK(d.records == golden_three_agent());
  CHECK(d.states.back().state == "COMPLETED");
}

TEST_CASE("stop ends the run at the next boundary") {
  RunExecution run(request_for(load_scenario("three_agent.json")), 60.0, builtins());
  run.start();
  Drain d;
  std::this_thread::sleep_for(300ms);
  const auto at_stop = run.current_step();
  run.control(protocol::Stop{});
  d.until_done(run);
  REQUIRE(!d.records.empty());
  CHECK(d.records.back().step <= at_stop + 1);
  CHECK(d.records.back().step < 600);
  CHECK(run.outcome().status == RunStatus::Stopped);
  CHECK(run.outcome().reason == "last_step=" + std::to_string(d.records.back().step));
  CHECK(d.states.back().state == "STOPPED");
  const auto& g = golden_three_agent();
  CHECK(std::equal(d.records.begin(), d.records.end(), g.begin()));
  CHECK_THROWS_AS(run.control(protocol::Resume{}), Error);
}

TEST_CASE("stop before the first step") {
  RunExecution run(request_for(load_scenario("three_agent.json")), 0.0, builtins());
  run.control(protocol::Stop{});
  run.start();
  Drain d;
  d.until_done(run);
  for (const auto& r : d.records) CHECK(r.step == 0);
  CHECK(d.states.back().state == "STOPPED");
}

TEST_CASE("set_param diverges only after the boundary it lands on") {
  RunExecution run(request_for(load_scenario("three_agent.json")), 100.0, builtins());
  run.start();
  Drain d;
  std::this_thread::sleep_for(150ms);
  run.control(protocol::Pause{});
  REQUIRE(d.wait_for(run, [&] { return d.last_state() == "PAUSED"; }));
  const auto s = run.current_step();
  run.control(protocol::SetParam{"bravo", "agents.bravo.params.speed_mps", 300.0});
  run.control(protocol::SetSpeed{0.0});
  run.control(protocol::Resume{});
  d.until_done(run);
  const auto& g = golden_three_agent();
  REQUIRE(d.records.size() == g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const bool same = d.records[i] == g[i];
    if (g[i].step <= s) {
      CHECK(same);
    } else if (g[i].agent_id == "bravo" && g[i].tag == "status") {
      CHECK_FALSE(same);
    }
  }
}

TEST_CASE("invalid scenario reports FAILED without records") {
  auto spec = load_scenario("three_agent.json");
  spec.agents[0].model.name = "no_such_model";
  RunExecution run(request_for(spec), 0.0, builtins());
  run.start();
  Drain d;
  d.until_done(run);
  CHECK(d.records.empty());
  CHECK(d.states.back().state == "FAILED");
  CHECK(d.states.back().detail.find("invalid scenario") != std::string::npos);
}

TEST_CASE("unacknowledged output pauses the run until acked") {
  RunnerOptions opts;
  opts.flush_steps = 5;
  opts.buffer_limit_bytes = 20000;
  RunExecution run(request_for(load_scenario("three_agent.json")), 0.0, builtins(), opts);
  run.start();
  Drain d;
  d.ack = false;
  REQUIRE(d.wait_for(run, [&] { return d.last_state() == "PAUSED"; }));
  CHECK(d.states.back().detail == "buffer_full");
  const auto held = run.current_step();
  std::this_thread::sleep_for(100ms);
  CHECK(run.current_step() == held);
  CHECK(run.current_step() < 600);
  d.ack = true;
  run.acknowledge(static_cast<std::int64_t>(d.records.back().step));
  d.until_done(run);
  CHECK(d.records == golden_three_agent());
  CHECK(d.states.back().state == "COMPLETED");
}

// --- daemon against a scripted manager ---------------------------------------------

namespace {

struct Peer {
  net::Socket sock;
  protocol::FrameReader reader;
  std::deque<protocol::Message> queue;

  std::optional<protocol::Message> next(std::chrono::milliseconds limit = 5000ms) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    while (queue.empty() && std::chrono::steady_clock::now() < deadline) {
      auto data = net::receive(sock, 20ms);
      if (data && data->empty()) return std::nullopt;
      if (!data) continue;
      for (auto& item : reader.feed(*data)) {
        if (item.message) queue.push_back(std::move(*item.message));
      }
    }
    if (queue.empty()) return std::nullopt;
    auto m = std::move(queue.front());
    queue.pop_front();
    return m;
  }

  template <class T>
  std::optional<T> next_of(std::chrono::milliseconds limit = 5000ms) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < deadline) {
      auto m = next(std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now()));
      if (!m) return std::nullopt;
      if (auto* t = std::get_if<T>(&*m)) return *t;
    }
    return std::nullopt;
  }
};

struct DaemonFixture {
  net::Socket listener = net::listen_tcp({"127.0.0.1", 0});
  std::unique_ptr<NodeDaemon> daemon;
  std::thread thread;

  explicit DaemonFixture(std::uint32_t capacity) {
    NodeConfig cfg;
    cfg.node_id = "n1";
    cfg.capacity = capacity;
    cfg.manager = {"127.0.0.1", net::local_port(listener)};
    cfg.heartbeat_interval_s = 0.2;
    cfg.backoff_initial_s = 0.05;
    cfg.backoff_max_s = 0.2;
    daemon = std::make_unique<NodeDaemon>(cfg);
    thread = std::thread([this] { daemon->run(); });
  }
  ~DaemonFixture() {
    daemon->stop();
    thread.join();
  }

  Peer accept() {
    Peer p{net::accept_tcp(listener), {}, {}};
    return p;
  }
};

protocol::Assign assign_of(const std::string& id, double speed) {
  return protocol::Assign{request_for(load_scenario("three_agent.json"), id), speed};
}

}  // namespace

TEST_CASE("daemon: hello, assign, records, completion") {
  DaemonFixture f(1);
  auto peer = f.accept();
  auto hello = peer.next_of<protocol::Hello>();
  REQUIRE(hello);
  CHECK(hello->node_id == "n1");
  CHECK(hello->capacity == 1);
  REQUIRE(peer.next_of<protocol::Heartbeat>());

  net::send_message(peer.sock, assign_of("run", 0.0));
  auto ack = peer.next_of<protocol::AssignAck>();
  REQUIRE(ack);
  CHECK(ack->accepted);

  std::vector<StepRecord> records;
  std::string final_state;
  while (final_state.empty()) {
    auto m = peer.next();
    REQUIRE(m);
    if (auto* b = std::get_if<protocol::RecordBatch>(&*m)) {
      records.insert(records.end(), b->records.begin(), b->records.end());
      net::send_message(peer.sock, protocol::RecordAck{"run", static_cast<std::int64_t>(b->records.back().step)});
    } else if (auto* s = std::get_if<protocol::RunStateChange>(&*m)) {
      if (s->state == "COMPLETED" || s->state == "FAILED") final_state = s->state;
    }
  }
  CHECK(final_state == "COMPLETED");
  CHECK(records == golden_three_agent());
}

TEST_CASE("daemon: capacity, duplicates and unknown runs") {
  DaemonFixture f(1);
  auto peer = f.accept();
  REQUIRE(peer.next_of<protocol::Heartbeat>());
  net::send_message(peer.sock, assign_of("slow", 1.0));
  auto a1 = peer.next_of<protocol::AssignAck>();
  REQUIRE(a1);
  CHECK(a1->accepted);
  net::send_message(peer.sock, assign_of("slow", 1.0));
  auto a2 = peer.next_of<protocol::AssignAck>();
  REQUIRE(a2);
  CHECK_FALSE(a2->accepted);
  CHECK(a2->reason == "duplicate");
  net::send_message(peer.sock, assign_of("other", 1.0));
  auto a3 = peer.next_of<protocol::AssignAck>();
  REQUIRE(a3);
  CHECK_FALSE(a3->accepted);
  CHECK(a3->reason == "capacity");

  net::send_message(peer.sock, protocol::Control{"ghost", protocol::Pause{}});
  auto e1 = peer.next_of<protocol::ErrorMsg>();
  REQUIRE(e1);
  CHECK(e1->code == "UnknownRun");
  net::send_message(peer.sock, protocol::Control{"slow", protocol::Resume{}});
  auto e2 = peer.next_of<protocol::ErrorMsg>();
  REQUIRE(e2);
  CHECK(e2->code == "IllegalTransition");

  auto hb = peer.next_of<protocol::Heartbeat>();
  REQUIRE(hb);
  CHECK(hb->running_run_ids == std::vector<std::string>{"slow"});

  // A malformed frame is answered, not fatal.
  protocol::Bytes junk = {0, 0, 0, 2, 9, 1};
  net::send_all(peer.sock, junk);
  auto e3 = peer.next_of<protocol::ErrorMsg>();
  REQUIRE(e3);
  CHECK(e3->code == "BadVersion");

  net::send_message(peer.sock, protocol::Control{"slow", protocol::Stop{}});
  bool stopped = false;
  for (int i = 0; i < 200 && !stopped; ++i) {
    auto s = peer.next_of<protocol::RunStateChange>();
    REQUIRE(s);
    stopped = s->state == "STOPPED";
  }
  CHECK(stopped);
}

TEST_CASE("daemon: link cut mid-run loses nothing") {
  DaemonFixture f(1);
  std::map<std::uint64_t, std::vector<StepRecord>> by_step;
  std::int64_t persisted = -1;
  std::string final_state;
  auto absorb = [&](const protocol::RecordBatch& b) {
    for (const auto& r : b.records) {
      if (static_cast<std::int64_t>(r.step) > persisted) by_step[r.step].push_back(r);
    }
    persisted = std::max(persisted, static_cast<std::int64_t>(b.records.back().step));
  };

  {
    auto peer = f.accept();
    REQUIRE(peer.next_of<protocol::Heartbeat>());
    net::send_message(peer.sock, assign_of("run", 40.0));
    REQUIRE(peer.next_of<protocol::AssignAck>()->accepted);
    // Take a few batches; acknowledge only the first, then drop the link.
    int batches = 0;
    while (batches < 4) {
      auto b = peer.next_of<protocol::RecordBatch>();
      REQUIRE(b);
      absorb(*b);
      if (batches == 0) net::send_message(peer.sock, protocol::RecordAck{"run", persisted});
      ++batches;
    }
  }
  int sessions = 1;
  while (final_state.empty() && sessions < 4) {
    auto peer = f.accept();
    ++sessions;
    auto hello = peer.next_of<protocol::Hello>();
    REQUIRE(hello);
    while (final_state.empty()) {
      auto m = peer.next(10000ms);
      if (!m) break;
      if (auto* b = std::get_if<protocol::RecordBatch>(&*m)) {
        absorb(*b);
        net::send_message(peer.sock, protocol::RecordAck{"run", persisted});
      } else if (auto* s = std::get_if<protocol::RunStateChange>(&*m)) {
        if (s->state == "COMPLETED") final_state = s->state;
      }
    }
  }
  CHECK(final_state == "COMPLETED");
  std::vector<StepRecord> records;
  for (auto& [_, rs] : by_step) records.insert(records.end(), rs.begin(), rs.end());
  CHECK(records == golden_three_agent());
}
