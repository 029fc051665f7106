#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "asa/error.hpp"
#include "asa/json.hpp"
#include "asa/manifest.hpp"
#include "asa/model.hpp"
#include "asa/rng.hpp"

namespace asa {

std::string to_string(Side s);
Side side_from_string(const std::string& s);

struct ModelRef {
  std::string name;
  std::string version;

  std::string qualified() const { return name + "/" + version; }
  bool operator==(const ModelRef&) const = default;
};

struct AgentSpec {
  std::string agent_id;
  Side side = Side::Neutral;
  ModelRef model;
  Json params = Json::object();
  std::vector<AgentSpec> components;

  bool operator==(const AgentSpec&) const = default;
};

struct SimBlock {
  double step_dt = 0.1;
  std::uint64_t max_steps = 1;
  std::uint64_t seed = 0;

  bool operator==(const SimBlock&) const = default;
};

struct ScenarioSpec {
  std::string name;
  std::string description;
  SimBlock sim;
  std::vector<AgentSpec> agents;

  bool operator==(const ScenarioSpec&) const = default;
};

void to_json(Json& j, const AgentSpec& a);
void from_json(const Json& j, AgentSpec& a);
void to_json(Json& j, const ScenarioSpec& s);
void from_json(const Json& j, ScenarioSpec& s);

enum class PlaceholderKind { Number, Text };

struct Placeholder {
  std::string name;
  std::string path;
  PlaceholderKind kind = PlaceholderKind::Number;
  std::optional<std::pair<double, double>> bounds;

  bool operator==(const Placeholder&) const = default;
};

struct ScenarioTemplate {
  ScenarioSpec base;
  std::vector<Placeholder> placeholders;

  bool operator==(const ScenarioTemplate&) const = default;
};

void to_json(Json& j, const ScenarioTemplate& t);
void from_json(const Json& j, ScenarioTemplate& t);

/// Placeholder name -> bound scalar value.
using BindingSet = std::map<std::string, Json>;

struct BatchOrigin {
  std::string batch_id;
  std::uint64_t index = 0;

  bool operator==(const BatchOrigin&) const = default;
};

struct ExecutionRequest {
  std::string request_id;
  ScenarioSpec scenario;
  std::uint64_t seed = 0;
  BatchOrigin origin;

  bool operator==(const ExecutionRequest&) const = default;
};

void to_json(Json& j, const ExecutionRequest& r);
void from_json(const Json& j, ExecutionRequest& r);

struct ValidationError {
  std::string code;
  std::string path;
  std::string message;

  bool operator==(const ValidationError&) const = default;
};

void to_json(Json& j, const ValidationError& e);

/// Raised by resolve/expand_batch. `index` is set when the failure belongs to
/// one member of a batch.
class ScenarioError : public Error {
 public:
  ScenarioError(std::string code, const std::string& message, std::optional<std::size_t> index = std::nullopt)
      : Error(std::move(code), message), index_(index) {}

  std::optional<std::size_t> index() const { return index_; }

 private:
  std::optional<std::size_t> index_;
};

/// Parsed form of `agents.<id>(.components.<id>)*.params.<key>(.<key>)*`.
struct ParamPath {
  std::vector<std::string> agent_chain;  // outermost platform first
  std::vector<std::string> param_keys;

  const std::string& agent_id() const { return agent_chain.back(); }
  std::string param_key_path() const;  // keys joined with '.'
};

std::optional<ParamPath> parse_param_path(const std::string& path);

/// Locate the agent addressed by a path's agent chain; nullptr if absent.
const AgentSpec* find_agent(const ScenarioSpec& spec, const ParamPath& path);
AgentSpec* find_agent(ScenarioSpec& spec, const ParamPath& path);

/// All violations in one pass. Empty result means the scenario is valid.
std::vector<ValidationError> validate(const ScenarioSpec& spec, std::span<const ModelManifest> registry);

/// Placeholder declarations checked against the template's own base.
std::vector<ValidationError> validate_template(const ScenarioTemplate& tmpl);

/// Bind every placeholder. Throws ScenarioError (MissingBinding, OutOfBounds,
/// UnknownPlaceholder, KindMismatch, PathVanished).
ScenarioSpec resolve(const ScenarioTemplate& tmpl, const BindingSet& binding);

std::vector<ExecutionRequest> expand_batch(const ScenarioTemplate& tmpl, std::span<const BindingSet> bindings,
                                           std::uint64_t batch_seed, const std::string& batch_id);

// Design-of-experiments generators. Factor order is significant.

using FactorList = std::vector<std::pair<std::string, std::vector<Json>>>;
using RangeList = std::vector<std::pair<std::string, std::pair<double, double>>>;

/// Cartesian product, last factor varying fastest. Throws EmptyFactor.
std::vector<BindingSet> full_factorial(const FactorList& factors);

/// One sample per stratum and dimension, strata shuffled per dimension.
/// Throws BadRange.
std::vector<BindingSet> latin_hypercube(std::size_t n, const RangeList& ranges, std::uint64_t seed);

/// Accepts either [{"name":..,"values":[..]}, ...] or {"name":[..], ...}.
FactorList factors_from_json(const Json& j);
/// Accepts either [{"name":..,"range":[lo,hi]}, ...] or {"name":[lo,hi], ...}.
RangeList ranges_from_json(const Json& j);

}  // namespace asa
