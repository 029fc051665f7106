#include <limits>

#include "asa/builtin_models.hpp"
#include "asa/kinematics.hpp"

namespace asa::builtin {

namespace {

using kinematics::normalize_heading;

ParamSpec number(std::string key, std::optional<double> def, std::optional<std::pair<double, double>> bounds = {}) {
  ParamSpec p;
  p.key = std::move(key);
  p.type = ParamType::Number;
  if (def) {
    p.default_value = *def;
  } else {
    p.required = true;
  }
  p.bounds = bounds;
  return p;
}

ParamSpec list(std::string key, std::optional<Json> def) {
  ParamSpec p;
  p.key = std::move(key);
  p.type = ParamType::List;
  p.default_value = std::move(def);
  p.required = !p.default_value;
  return p;
}

ParamSpec text(std::string key) {
  ParamSpec p;
  p.key = std::move(key);
  p.type = ParamType::Text;
  p.required = true;
  return p;
}

std::optional<Vec3> to_point(const Json& j) {
  if (!j.is_array() || j.size() < 2 || j.size() > 3) return std::nullopt;
  for (const auto& c : j) {
    if (!c.is_number()) return std::nullopt;
  }
  return Vec3{j[0].get<double>(), j[1].get<double>(), j.size() == 3 ? j[2].get<double>() : 0.0};
}

std::optional<std::vector<Vec3>> to_points(const Json& j) {
  if (!j.is_array()) return std::nullopt;
  std::vector<Vec3> out;
  for (const auto& p : j) {
    auto v = to_point(p);
    if (!v) return std::nullopt;
    out.push_back(*v);
  }
  return out;
}

bool set_number(const Json& value, double& target, double lo, double hi) {
  if (!value.is_number()) return false;
  const double v = value.get<double>();
  if (v < lo || v > hi) return false;
  target = v;
  return true;
}

// --- waypoint platform ----------------------------------------------------------

class WaypointPlatform final : public ModelBehavior {
 public:
  void init(const Json& params, SplitMix64&, AgentState& self) override {
    self.position = to_point(params.at("position")).value_or(Vec3{});
    self.position.z = std::max(0.0, self.position.z);
    self.heading = normalize_heading(params.at("heading_rad").get<double>());
    self.speed = params.at("speed_mps").get<double>();
    turn_rate_ = params.at("max_turn_rate_rad_s").get<double>();
    capture_radius_ = params.at("capture_radius_m").get<double>();
    climb_rate_ = params.at("climb_rate_mps").get<double>();
    waypoints_ = to_points(params.at("waypoints")).value_or(std::vector<Vec3>{});
    self.private_state["waypoint_index"] = 0;
  }

  void step(double dt, const PerceptionView&, AgentState& self, StepContext& ctx) override {
    if (next_ < waypoints_.size() && horizontal_distance(self.position, waypoints_[next_]) < capture_radius_) {
      ctx.emit("waypoint_reached", {{"index", static_cast<std::int64_t>(next_)}});
      ++next_;
      self.private_state["waypoint_index"] = next_;
    }
    double vz = 0.0;
    if (next_ < waypoints_.size()) {
      const Vec3 wp = waypoints_[next_];
      if (horizontal_distance(self.position, wp) > 0.0) {
        self.heading = kinematics::turn_toward(self.heading, kinematics::bearing(self.position, wp), turn_rate_ * dt);
      }
      const double max_vz = std::min(climb_rate_, self.speed);
      vz = std::clamp((wp.z - self.position.z) / dt, -max_vz, max_vz);
    }
    const double vh = std::sqrt(std::max(0.0, self.speed * self.speed - vz * vz));
    self.position.x += vh * dt * std::cos(self.heading);
    self.position.y += vh * dt * std::sin(self.heading);
    self.position.z = std::max(0.0, self.position.z + vz * dt);
  }

  bool on_set_param(const std::string& key, const Json& value, AgentState& self) override {
    if (key == "speed_mps") return set_number(value, self.speed, 0.0, 10000.0);
    if (key == "max_turn_rate_rad_s") return set_number(value, turn_rate_, 0.0, 10.0);
    if (key == "capture_radius_m") return set_number(value, capture_radius_, 0.0, 1e9);
    if (key == "climb_rate_mps") return set_number(value, climb_rate_, 0.0, 10000.0);
    if (key == "waypoints") {
      auto pts = to_points(value);
      if (!pts) return false;
      waypoints_ = std::move(*pts);
      next_ = 0;
      self.private_state["waypoint_index"] = 0;
      return true;
    }
    return false;
  }

 private:
  std::vector<Vec3> waypoints_;
  std::size_t next_ = 0;
  double turn_rate_ = 0.0;
  double capture_radius_ = 100.0;
  double climb_rate_ = 50.0;
};

// --- range sensor ----------------------------------------------------------------

class RangeSensor final : public ModelBehavior {
 public:
  void init(const Json& params, SplitMix64&, AgentState&) override {
    range_ = params.at("range_m").get<double>();
    p_detect_ = params.at("p_detect").get<double>();
  }

  void step(double, const PerceptionView& view, AgentState& self, StepContext& ctx) override {
    std::vector<std::pair<std::string, double>> detected;
    for (const AgentState* other : view.alive_agents()) {
      if (other->role != AgentRole::Platform || !opposing(self.side, other->side)) continue;
      const double r = norm(other->position - self.position);
      if (r > range_) continue;
      if (ctx.rng().bernoulli(p_detect_)) detected.emplace_back(other->agent_id, r);
    }
    if (detected.empty()) return;
    auto nearest = detected.front();
    std::string targets;
    for (const auto& [id, r] : detected) {
      if (r < nearest.second) nearest = {id, r};
      if (!targets.empty()) targets += ',';
      targets += id;
      ctx.report_track(id);
    }
    ctx.emit("detection", {{"target_id", nearest.first},
                           {"range_m", nearest.second},
                           {"count", static_cast<std::int64_t>(detected.size())},
                           {"targets", targets}});
  }

  bool on_set_param(const std::string& key, const Json& value, AgentState&) override {
    if (key == "range_m") return set_number(value, range_, 0.0, 1e9);
    if (key == "p_detect") return set_number(value, p_detect_, 0.0, 1.0);
    return false;
  }

 private:
  double range_ = 0.0;
  double p_detect_ = 1.0;
};

// --- WEZ weapon ------------------------------------------------------------------

class WezWeapon final : public ModelBehavior {
 public:
  void init(const Json& params, SplitMix64&, AgentState& self) override {
    launch_range_ = params.at("launch_range_m").get<double>();
    missile_speed_ = params.at("missile_speed_mps").get<double>();
    missile_turn_rate_ = params.at("missile_turn_rate_rad_s").get<double>();
    hit_radius_ = params.at("hit_radius_m").get<double>();
    max_flight_ = params.at("max_flight_s").get<double>();
    shots_ = params.at("shots").get<std::int64_t>();
    self.private_state["shots_left"] = shots_;
  }

  void step(double, const PerceptionView& view, AgentState& self, StepContext& ctx) override {
    if (shots_ <= 0) return;
    const auto alive = view.alive_agents();
    auto engaged = [&](const std::string& target) {
      for (const AgentState* a : alive) {
        if (a->role == AgentRole::Munition && a->parent_id == self.agent_id && a->engagement &&
            a->engagement->target_id == target) {
          return true;
        }
      }
      return false;
    };
    const AgentState* best = nullptr;
    double best_range = std::numeric_limits<double>::infinity();
    for (const auto& id : view.tracks(view.root_platform(self.agent_id))) {
      const AgentState* t = view.find(id);
      if (t == nullptr || !t->alive || !opposing(self.side, t->side)) continue;
      const double r = norm(t->position - self.position);
      if (r > launch_range_ || engaged(id)) continue;
      if (r < best_range || (r == best_range && best != nullptr && id < best->agent_id)) {
        best = t;
        best_range = r;
      }
    }
    if (best == nullptr) return;
    ++launched_;
    --shots_;
    self.private_state["shots_left"] = shots_;
    SpawnRequest missile;
    missile.agent_id = self.agent_id + ".m" + std::to_string(launched_);
    missile.model_name = kMissile;
    missile.model_version = kVersion;
    missile.position = self.position;
    missile.heading = kinematics::bearing(self.position, best->position);
    missile.params = {{"target_id", best->agent_id},
                      {"speed_mps", missile_speed_},
                      {"turn_rate_rad_s", missile_turn_rate_},
                      {"hit_radius_m", hit_radius_},
                      {"max_flight_s", max_flight_}};
    ctx.emit("launch", {{"target_id", best->agent_id}, {"missile_id", missile.agent_id}, {"range_m", best_range}});
    ctx.spawn(std::move(missile));
  }

  bool on_set_param(const std::string& key, const Json& value, AgentState&) override {
    if (key == "launch_range_m") return set_number(value, launch_range_, 0.0, 1e9);
    if (key == "hit_radius_m") return set_number(value, hit_radius_, 0.0, 1e6);
    if (key == "missile_speed_mps") return set_number(value, missile_speed_, 0.0, 1e5);
    return false;
  }

 private:
  double launch_range_ = 0.0;
  double missile_speed_ = 0.0;
  double missile_turn_rate_ = 0.0;
  double hit_radius_ = 0.0;
  double max_flight_ = 0.0;
  std::int64_t shots_ = 0;
  std::int64_t launched_ = 0;
};

// --- missile ---------------------------------------------------------------------

class Missile final : public ModelBehavior {
 public:
  void init(const Json& params, SplitMix64&, AgentState& self) override {
    speed_ = params.at("speed_mps").get<double>();
    turn_rate_ = params.at("turn_rate_rad_s").get<double>();
    self.speed = speed_;
    self.role = AgentRole::Munition;
    self.engagement = Engagement{params.at("target_id").get<std::string>(), params.at("hit_radius_m").get<double>(),
                                 params.at("max_flight_s").get<double>(), 0};
  }

  void step(double dt, const PerceptionView& view, AgentState& self, StepContext&) override {
    const AgentState* target = self.engagement ? view.find(self.engagement->target_id) : nullptr;
    if (target != nullptr && target->alive) {
      kinematics::pursuit_step(self, target->position, speed_, turn_rate_, dt);
    } else {
      self.position.x += speed_ * dt * std::cos(self.heading);
      self.position.y += speed_ * dt * std::sin(self.heading);
    }
  }

 private:
  double speed_ = 0.0;
  double turn_rate_ = 0.0;
};

}  // namespace

ModelManifest waypoint_platform_manifest() {
  ModelManifest m;
  m.name = kWaypointPlatform;
  m.version = kVersion;
  m.params = {list("position", std::nullopt),
              number("heading_rad", 0.0),
              number("speed_mps", std::nullopt, std::make_pair(0.0, 10000.0)),
              number("max_turn_rate_rad_s", 0.1, std::make_pair(0.0, 10.0)),
              list("waypoints", Json::array()),
              number("capture_radius_m", 100.0, std::make_pair(0.0, 1e9)),
              number("climb_rate_mps", 50.0, std::make_pair(0.0, 10000.0))};
  m.accepted_components = {kRangeSensor, kWezWeapon};
  m.emitted_tags = {{"waypoint_reached", {"index"}}};
  return m;
}

ModelManifest range_sensor_manifest() {
  ModelManifest m;
  m.name = kRangeSensor;
  m.version = kVersion;
  m.params = {number("range_m", std::nullopt, std::make_pair(0.0, 1e9)),
              number("p_detect", 1.0, std::make_pair(0.0, 1.0))};
  m.emitted_tags = {{"detection", {"count", "range_m", "target_id", "targets"}}};
  return m;
}

ModelManifest wez_weapon_manifest() {
  ModelManifest m;
  m.name = kWezWeapon;
  m.version = kVersion;
  m.params = {number("launch_range_m", std::nullopt, std::make_pair(0.0, 1e9)),
              number("missile_speed_mps", std::nullopt, std::make_pair(0.0, 1e5)),
              number("missile_turn_rate_rad_s", 0.5, std::make_pair(0.0, 100.0)),
              number("hit_radius_m", 50.0, std::make_pair(0.0, 1e6)),
              number("max_flight_s", 60.0, std::make_pair(0.0, 1e6)),
              number("shots", 2.0, std::make_pair(0.0, 1000.0))};
  m.params.back().default_value = 2;
  m.emitted_tags = {{"launch", {"missile_id", "range_m", "target_id"}}};
  return m;
}

ModelManifest missile_manifest() {
  ModelManifest m;
  m.name = kMissile;
  m.version = kVersion;
  m.params = {text("target_id"),
              number("speed_mps", std::nullopt, std::make_pair(0.0, 1e5)),
              number("turn_rate_rad_s", 0.5, std::make_pair(0.0, 100.0)),
              number("hit_radius_m", 50.0, std::make_pair(0.0, 1e6)),
              number("max_flight_s", 60.0, std::make_pair(0.0, 1e6))};
  m.emitted_tags = {{"hit", {"flight_time_s", "target_id"}}, {"miss", {"flight_time_s", "reason", "target_id"}}};
  return m;
}

BehaviorPtr make_waypoint_platform() { return std::make_shared<WaypointPlatform>(); }
BehaviorPtr make_range_sensor() { return std::make_shared<RangeSensor>(); }
BehaviorPtr make_wez_weapon() { return std::make_shared<WezWeapon>(); }
BehaviorPtr make_missile() { return std::make_shared<Missile>(); }

void register_all(ModelRegistry& registry) {
  registry.add(waypoint_platform_manifest(), make_waypoint_platform, true);
  registry.add(range_sensor_manifest(), make_range_sensor, true);
  registry.add(wez_weapon_manifest(), make_wez_weapon, true);
  registry.add(missile_manifest(), make_missile, true);
}

}  // namespace asa::builtin
