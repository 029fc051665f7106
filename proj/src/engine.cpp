#include "asa/engine.hpp"

#include <algorithm>
#include <set>

#include "asa/kinematics.hpp"

namespace asa {

namespace {

std::atomic<std::uint64_t> g_invocations{0};

/// A model misbehaved; fails the run with the agent named.
struct ModelFailure {
  std::string agent_id;
  std::string reason;
};

struct Slot {
  AgentState state;
  BehaviorPtr behavior;
  const ModelManifest* manifest = nullptr;
  SplitMix64 rng;
  std::vector<std::string> components;
};

Json with_defaults(const ModelManifest& manifest, const Json& params) {
  Json out = params.is_object() ? params : Json::object();
  for (const auto& p : manifest.params) {
    if (p.default_value && !out.contains(p.key)) out[p.key] = *p.default_value;
  }
  return out;
}

class Snapshot final : public PerceptionView {
 public:
  Snapshot(std::uint64_t step, double sim_time, std::map<std::string, AgentState> agents,
           const std::map<std::string, std::vector<std::string>>& tracks,
           const std::map<std::string, std::string>& roots)
      : step_(step), sim_time_(sim_time), agents_(std::move(agents)), tracks_(tracks), roots_(roots) {
    for (const auto& [id, a] : agents_) {
      if (a.alive) alive_.push_back(&a);
    }
  }

  std::uint64_t step() const override { return step_; }
  double sim_time() const override { return sim_time_; }

  const AgentState* find(std::string_view agent_id) const override {
    auto it = agents_.find(std::string(agent_id));
    return it == agents_.end() ? nullptr : &it->second;
  }

  std::vector<const AgentState*> alive_agents() const override { return alive_; }

  std::vector<std::string> tracks(std::string_view platform_id) const override {
    auto it = tracks_.find(std::string(platform_id));
    return it == tracks_.end() ? std::vector<std::string>{} : it->second;
  }

  std::string root_platform(std::string_view agent_id) const override {
    auto it = roots_.find(std::string(agent_id));
    return it == roots_.end() ? std::string(agent_id) : it->second;
  }

  const std::map<std::string, AgentState>& agents() const { return agents_; }

 private:
  std::uint64_t step_;
  double sim_time_;
  std::map<std::string, AgentState> agents_;
  std::vector<const AgentState*> alive_;
  const std::map<std::string, std::vector<std::string>>& tracks_;
  const std::map<std::string, std::string>& roots_;
};

class Run {
 public:
  Run(const ScenarioSpec& spec, const ModelRegistry& registry, RecordSink& sink, ControlSource& control,
      const RunOptions& options)
      : spec_(spec),
        registry_(registry),
        sink_(sink),
        control_(control),
        run_id_(options.run_id),
        seed_(options.seed.value_or(spec.sim.seed)),
        dt_(spec.sim.step_dt) {}

  RunOutcome execute() {
    RunOutcome outcome;
    const auto manifests = registry_.manifests();
    const auto problems = validate(spec_, manifests);
    if (!problems.empty()) {
      outcome.status = RunStatus::Failed;
      outcome.reason = "invalid scenario: " + problems.front().code + " at " + problems.front().path;
      return outcome;
    }
    try {
      for (const auto& a : spec_.agents) add_agent(a, "", AgentRole::Platform, a.agent_id);
      sync_components();
      std::vector<StepRecord> records;
      for (const auto& [id, slot] : slots_) records.push_back(status_record(0, slot.state));
      publish(0, records);

      for (std::uint64_t step = 1; step <= spec_.sim.max_steps; ++step) {
        records.clear();
        BoundaryDecision decision = control_.at_boundary(step, sim_time(step - 1));
        if (decision.stop) {
          outcome.status = RunStatus::Stopped;
          outcome.reason = "stopped";
          outcome.last_step = step - 1;
          return outcome;
        }
        for (const auto& u : decision.param_updates) apply_param(step, u, records);
        advance(step, records);
        publish(step, records);
        outcome.last_step = step;
        if (terminate_) {
          outcome.reason = terminate_reason_;
          break;
        }
      }
      outcome.status = RunStatus::Completed;
    } catch (const ModelFailure& f) {
      outcome.status = RunStatus::Failed;
      outcome.failed_agent_id = f.agent_id;
      outcome.reason = f.reason;
      outcome.last_step = current_step_;
    }
    return outcome;
  }

 private:
  class Context final : public StepContext {
   public:
    Context(Run& run, Slot& slot, std::uint64_t step, std::vector<StepRecord>& records)
        : run_(run), slot_(slot), step_(step), records_(records) {}

    void emit(const std::string& tag, Payload payload) override {
      const EmittedTag* declared = slot_.manifest->find_tag(tag);
      if (declared == nullptr) {
        throw ModelFailure{slot_.state.agent_id, "emitted undeclared tag '" + tag + "'"};
      }
      for (const auto& [key, _] : payload) {
        if (std::find(declared->payload_keys.begin(), declared->payload_keys.end(), key) ==
            declared->payload_keys.end()) {
          throw ModelFailure{slot_.state.agent_id, "emitted undeclared payload key '" + key + "' for tag '" + tag + "'"};
        }
      }
      records_.push_back(run_.make_record(step_, tag, slot_.state.agent_id, std::move(payload)));
    }

    SplitMix64& rng() override { return slot_.rng; }

    void spawn(SpawnRequest request) override {
      run_.pending_spawns_.push_back({slot_.state.agent_id, std::move(request)});
    }

    void report_track(const std::string& target_id) override {
      auto& list = run_.next_tracks_[run_.roots_[slot_.state.agent_id]];
      if (std::find(list.begin(), list.end(), target_id) == list.end()) list.push_back(target_id);
    }

    void request_termination(const std::string& reason) override {
      run_.terminate_ = true;
      if (run_.terminate_reason_.empty()) run_.terminate_reason_ = reason;
    }

   private:
    Run& run_;
    Slot& slot_;
    std::uint64_t step_;
    std::vector<StepRecord>& records_;
  };

  double sim_time(std::uint64_t step) const { return static_cast<double>(step) * dt_; }

  StepRecord make_record(std::uint64_t step, std::string tag, std::string agent_id, Payload payload) const {
    return StepRecord{run_id_, step, sim_time(step), std::move(tag), std::move(agent_id), std::move(payload)};
  }

  StepRecord status_record(std::uint64_t step, const AgentState& s) const {
    return make_record(step, kStatusTag, s.agent_id,
                       {{"alive", s.alive},
                        {"side", std::string(side_name(s.side))},
                        {"role", std::string(to_string(s.role))},
                        {"x", s.position.x},
                        {"y", s.position.y},
                        {"z", s.position.z},
                        {"speed", s.speed},
                        {"heading", s.heading}});
  }

  Slot make_slot(const std::string& agent_id, const std::string& model_name, const std::string& model_version) {
    Slot slot;
    slot.manifest = registry_.find(model_name, model_version);
    if (slot.manifest == nullptr) {
      throw ModelFailure{agent_id, "unknown model '" + model_name + "/" + model_version + "'"};
    }
    try {
      slot.behavior = registry_.create(model_name, model_version);
    } catch (const std::exception& e) {
      throw ModelFailure{agent_id, std::string("cannot construct model: ") + e.what()};
    }
    slot.rng = SplitMix64(agent_stream_seed(seed_, agent_id));
    slot.state.agent_id = agent_id;
    return slot;
  }

  void init_slot(Slot& slot, const Json& params) {
    try {
      slot.behavior->init(with_defaults(*slot.manifest, params), slot.rng, slot.state);
    } catch (const ModelFailure&) {
      throw;
    } catch (const std::exception& e) {
      throw ModelFailure{slot.state.agent_id, std::string("init failed: ") + e.what()};
    }
  }

  void add_agent(const AgentSpec& spec, const std::string& parent, AgentRole role, const std::string& root) {
    if (slots_.count(spec.agent_id)) throw ModelFailure{spec.agent_id, "duplicate agent_id"};
    Slot slot = make_slot(spec.agent_id, spec.model.name, spec.model.version);
    slot.state.side = spec.side;
    slot.state.role = role;
    slot.state.parent_id = parent;
    init_slot(slot, spec.params);
    slot.state.role = role;
    roots_[spec.agent_id] = root;
    for (const auto& c : spec.components) slot.components.push_back(c.agent_id);
    if (role == AgentRole::Platform) platform_order_.push_back(spec.agent_id);
    slots_.emplace(spec.agent_id, std::move(slot));
    for (const auto& c : spec.components) add_agent(c, spec.agent_id, AgentRole::Component, root);
  }

  // Components ride on their carrier; parents are synced before children.
  void sync_components() {
    std::vector<std::string> queue(platform_order_.begin(), platform_order_.end());
    for (std::size_t i = 0; i < queue.size(); ++i) {
      Slot& parent = slots_.at(queue[i]);
      for (const auto& cid : parent.components) {
        Slot& child = slots_.at(cid);
        child.state.position = parent.state.position;
        child.state.heading = parent.state.heading;
        child.state.speed = parent.state.speed;
        queue.push_back(cid);
      }
    }
  }

  void kill(const std::string& id) {
    Slot& slot = slots_.at(id);
    slot.state.alive = false;
    for (const auto& c : slot.components) kill(c);
  }

  // Rejections for one agent in one step fold into a single record.
  void apply_param(std::uint64_t step, const ParamUpdate& update, std::vector<StepRecord>& records) {
    auto it = slots_.find(update.agent_id);
    if (it == slots_.end()) return;
    Slot& slot = it->second;
    auto reject = [&](const std::string& reason) {
      for (auto& r : records) {
        if (r.agent_id == update.agent_id && r.tag == kParamRejectedTag) {
          std::get<std::string>(r.payload["path"]) += ";" + update.param_path;
          std::get<std::string>(r.payload["reason"]) += ";" + reason;
          std::get<std::int64_t>(r.payload["count"]) += 1;
          return;
        }
      }
      records.push_back(make_record(step, kParamRejectedTag, update.agent_id,
                                    {{"path", update.param_path}, {"reason", reason}, {"count", std::int64_t{1}}}));
    };
    const auto path = parse_param_path(update.param_path);
    if (!path || path->agent_id() != update.agent_id) return reject("malformed path");
    if (!slot.state.alive) return reject("agent not alive");
    bool accepted = false;
    try {
      accepted = slot.behavior->on_set_param(path->param_key_path(), update.value, slot.state);
    } catch (const std::exception& e) {
      return reject(e.what());
    }
    if (!accepted) reject("rejected by model");
  }

  void advance(std::uint64_t step, std::vector<StepRecord>& records) {
    current_step_ = step;
    std::map<std::string, AgentState> states;
    for (const auto& [id, slot] : slots_) states.emplace(id, slot.state);
    const Snapshot view(step - 1, sim_time(step - 1), std::move(states), tracks_, roots_);
    next_tracks_.clear();

    for (auto& [id, slot] : slots_) {
      if (!view.find(id)->alive) continue;
      Context ctx(*this, slot, step, records);
      try {
        slot.behavior->step(dt_, view, slot.state, ctx);
      } catch (const ModelFailure&) {
        throw;
      } catch (const std::exception& e) {
        throw ModelFailure{id, "step " + std::to_string(step) + " failed: " + e.what()};
      }
      slot.state.agent_id = id;
      slot.state.heading = kinematics::normalize_heading(slot.state.heading);
      if (slot.state.position.z < 0.0) slot.state.position.z = 0.0;
    }
    sync_components();

    std::vector<std::string> spawned;
    for (auto& [spawner, request] : pending_spawns_) {
      if (slots_.count(request.agent_id)) throw ModelFailure{spawner, "spawn id '" + request.agent_id + "' in use"};
      Slot slot = make_slot(request.agent_id, request.model_name, request.model_version);
      slot.state.side = slots_.at(spawner).state.side;
      slot.state.role = AgentRole::Munition;
      slot.state.parent_id = spawner;
      slot.state.position = request.position;
      slot.state.heading = kinematics::normalize_heading(request.heading);
      init_slot(slot, request.params);
      slot.state.role = AgentRole::Munition;
      roots_[request.agent_id] = request.agent_id;
      spawned.push_back(request.agent_id);
      slots_.emplace(request.agent_id, std::move(slot));
    }
    pending_spawns_.clear();

    resolve_engagements(step, view, records);
    tracks_ = std::move(next_tracks_);
    next_tracks_.clear();

    for (const auto& [id, slot] : slots_) {
      const AgentState* before = view.find(id);
      const bool new_agent = std::find(spawned.begin(), spawned.end(), id) != spawned.end();
      if (new_agent || (before != nullptr && before->alive)) records.push_back(status_record(step, slot.state));
    }
  }

  void resolve_engagements(std::uint64_t step, const Snapshot& view, std::vector<StepRecord>& records) {
    for (auto& [id, slot] : slots_) {
      const AgentState* before = view.find(id);
      if (before == nullptr || !before->alive || !slot.state.engagement) continue;
      Engagement& e = *slot.state.engagement;
      ++e.flown_steps;
      const double flight_time = static_cast<double>(e.flown_steps) * dt_;
      auto finish = [&](const std::string& tag, Payload payload) {
        payload["target_id"] = e.target_id;
        payload["flight_time_s"] = flight_time;
        records.push_back(make_record(step, tag, id, std::move(payload)));
        slot.state.alive = false;
      };
      auto target = slots_.find(e.target_id);
      const AgentState* target_before = view.find(e.target_id);
      if (target == slots_.end() || target_before == nullptr || !target_before->alive || !target->second.state.alive) {
        finish("miss", {{"reason", std::string("target_lost")}});
        continue;
      }
      const double cpa = kinematics::closest_approach(before->position, slot.state.position, target_before->position,
                                                      target->second.state.position);
      if (cpa < e.hit_radius_m) {
        kill(e.target_id);
        finish("hit", {});
      } else if (e.flown_steps >= kinematics::steps_for(e.max_flight_s, dt_)) {
        finish("miss", {{"reason", std::string("timeout")}});
      }
    }
  }

  void publish(std::uint64_t step, std::vector<StepRecord>& records) {
    std::sort(records.begin(), records.end(), [](const StepRecord& a, const StepRecord& b) {
      return std::tie(a.agent_id, a.tag) < std::tie(b.agent_id, b.tag);
    });
    for (std::size_t i = 1; i < records.size(); ++i) {
      if (records[i].agent_id == records[i - 1].agent_id && records[i].tag == records[i - 1].tag) {
        throw ModelFailure{records[i].agent_id, "emitted tag '" + records[i].tag + "' twice in step " +
                                                    std::to_string(step)};
      }
    }
    try {
      sink_.consume(step, records);
    } catch (const std::exception& e) {
      throw ModelFailure{"", std::string("record sink failed: ") + e.what()};
    }
  }

  const ScenarioSpec& spec_;
  const ModelRegistry& registry_;
  RecordSink& sink_;
  ControlSource& control_;
  std::string run_id_;
  std::uint64_t seed_;
  double dt_;

  std::map<std::string, Slot> slots_;  // ascending agent_id is the stepping order
  std::vector<std::string> platform_order_;
  std::map<std::string, std::string> roots_;
  std::map<std::string, std::vector<std::string>> tracks_;
  std::map<std::string, std::vector<std::string>> next_tracks_;
  std::vector<std::pair<std::string, SpawnRequest>> pending_spawns_;
  bool terminate_ = false;
  std::string terminate_reason_;
  std::uint64_t current_step_ = 0;
};

}  // namespace

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Completed: return "COMPLETED";
    case RunStatus::Stopped: return "STOPPED";
    case RunStatus::Failed: return "FAILED";
  }
  return "FAILED";
}

RunOutcome run_simulation(const ScenarioSpec& spec, const ModelRegistry& registry, RecordSink& sink,
                          ControlSource& control, const RunOptions& options) {
  g_invocations.fetch_add(1, std::memory_order_relaxed);
  Run run(spec, registry, sink, control, options);
  return run.execute();
}

std::uint64_t engine_invocations() { return g_invocations.load(std::memory_order_relaxed); }

}  // namespace asa
