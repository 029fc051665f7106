#pragma once

// Contract between the simulation host and agent models. Everything here is
// header-only so extension libraries can implement models without linking
// against the host.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "asa/json.hpp"
#include "asa/record.hpp"
#include "asa/rng.hpp"

namespace asa {

inline constexpr int kExtensionAbiVersion = 1;

enum class Side { Blue, Red, Neutral };

inline const char* side_name(Side s) {
  switch (s) {
    case Side::Blue: return "BLUE";
    case Side::Red: return "RED";
    case Side::Neutral: return "NEUTRAL";
  }
  return "NEUTRAL";
}

/// BLUE and RED oppose each other; NEUTRAL opposes nobody.
inline bool opposing(Side a, Side b) {
  return (a == Side::Blue && b == Side::Red) || (a == Side::Red && b == Side::Blue);
}

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  bool operator==(const Vec3&) const = default;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline double horizontal_distance(Vec3 a, Vec3 b) { return std::hypot(b.x - a.x, b.y - a.y); }

enum class AgentRole { Platform, Component, Munition };

inline const char* to_string(AgentRole r) {
  switch (r) {
    case AgentRole::Platform: return "platform";
    case AgentRole::Component: return "component";
    case AgentRole::Munition: return "munition";
  }
  return "platform";
}

/// Host-resolved engagement of a munition against one target.
struct Engagement {
  std::string target_id;
  double hit_radius_m = 0.0;
  double max_flight_s = 0.0;
  std::uint64_t flown_steps = 0;

  bool operator==(const Engagement&) const = default;
};

/// ENU position in meters; heading in [0, 2pi), 0 = east, counter-clockwise.
struct AgentState {
  std::string agent_id;
  Side side{};
  AgentRole role = AgentRole::Platform;
  std::string parent_id;
  bool alive = true;
  Vec3 position;
  double speed = 0.0;
  double heading = 0.0;
  std::optional<Engagement> engagement;
  Json private_state = Json::object();

  bool operator==(const AgentState&) const = default;
};

/// Read-only world access for models: a snapshot taken at the start of the
/// step. Dead agents are not listed.
class PerceptionView {
 public:
  virtual ~PerceptionView() = default;

  virtual std::uint64_t step() const = 0;
  virtual double sim_time() const = 0;
  /// Any agent, alive or not; nullptr if unknown.
  virtual const AgentState* find(std::string_view agent_id) const = 0;
  /// Alive agents in ascending agent_id order.
  virtual std::vector<const AgentState*> alive_agents() const = 0;
  /// Targets reported by sensors of `platform_id` during the previous step.
  virtual std::vector<std::string> tracks(std::string_view platform_id) const = 0;
  /// Outermost platform carrying `agent_id` (itself for platforms).
  virtual std::string root_platform(std::string_view agent_id) const = 0;
};

/// Request to add a munition at the end of the current step.
struct SpawnRequest {
  std::string agent_id;
  std::string model_name;
  std::string model_version;
  Json params = Json::object();
  Vec3 position;
  double heading = 0.0;
};

/// Per-step services the host offers to the stepping model.
class StepContext {
 public:
  virtual ~StepContext() = default;

  /// Record this agent's state under `tag`; tag and keys must be declared in
  /// the model's manifest.
  virtual void emit(const std::string& tag, Payload payload) = 0;
  virtual SplitMix64& rng() = 0;
  virtual void spawn(SpawnRequest request) = 0;
  /// Publish a detected target for the weapons of the carrying platform.
  virtual void report_track(const std::string& target_id) = 0;
  virtual void request_termination(const std::string& reason) = 0;
};

/// Behavior of one agent. A behavior mutates only its own state.
class ModelBehavior {
 public:
  virtual ~ModelBehavior() = default;

  /// `params` has manifest defaults applied.
  virtual void init(const Json& params, SplitMix64& rng, AgentState& self) = 0;
  virtual void step(double dt, const PerceptionView& view, AgentState& self, StepContext& ctx) = 0;
  /// Mid-run parameter change; `key_path` is relative to the agent's params.
  /// Return false to reject the change.
  virtual bool on_set_param(const std::string& key_path, const Json& value, AgentState& self) {
    (void)key_path;
    (void)value;
    (void)self;
    return false;
  }
};

}  // namespace asa

/// Exports the C entry points of an extension library providing one model.
#define ASA_EXTENSION(BehaviorType)                                                              \
  extern "C" int asa_extension_abi_version() { return ::asa::kExtensionAbiVersion; }            \
  extern "C" ::asa::ModelBehavior* asa_extension_create() { return new BehaviorType(); }         \
  extern "C" void asa_extension_destroy(::asa::ModelBehavior* behavior) { delete behavior; }
