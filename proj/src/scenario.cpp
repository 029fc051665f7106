#include "asa/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace asa {

std::string to_string(Side s) { return side_name(s); }

Side side_from_string(const std::string& s) {
  if (s == "BLUE") return Side::Blue;
  if (s == "RED") return Side::Red;
  if (s == "NEUTRAL") return Side::Neutral;
  throw SchemaError("agent: side must be BLUE, RED or NEUTRAL, got '" + s + "'");
}

// --- serialization ---------------------------------------------------------

void to_json(Json& j, const AgentSpec& a) {
  Json components = Json::array();
  for (const auto& c : a.components) components.push_back(Json(c));
  j = Json{{"agent_id", a.agent_id},
           {"side", to_string(a.side)},
           {"model", {{"name", a.model.name}, {"version", a.model.version}}},
           {"params", a.params},
           {"components", std::move(components)}};
}

namespace {

AgentSpec agent_from_json(const Json& j, std::optional<Side> inherited) {
  JsonReader in(j, "agent");
  AgentSpec a;
  a.agent_id = in.string("agent_id");
  if (in.optional("side") != nullptr) {
    a.side = side_from_string(in.string("side"));
  } else if (inherited) {
    a.side = *inherited;
  } else {
    throw SchemaError("agent '" + a.agent_id + "': missing field 'side'");
  }
  JsonReader model(in.required("model"), "agent '" + a.agent_id + "'.model");
  a.model.name = model.string("name");
  a.model.version = model.string("version");
  model.finish();
  if (const Json* params = in.optional("params")) {
    if (!params->is_object()) throw SchemaError("agent '" + a.agent_id + "': 'params' must be an object");
    a.params = *params;
  }
  if (const Json* comps = in.optional("components")) {
    if (!comps->is_array()) throw SchemaError("agent '" + a.agent_id + "': 'components' must be a list");
    for (const auto& c : *comps) a.components.push_back(agent_from_json(c, a.side));
  }
  in.finish();
  return a;
}

}  // namespace

void from_json(const Json& j, AgentSpec& a) { a = agent_from_json(j, std::nullopt); }

void to_json(Json& j, const ScenarioSpec& s) {
  Json agents = Json::array();
  for (const auto& a : s.agents) agents.push_back(Json(a));
  j = Json{{"name", s.name},
           {"description", s.description},
           {"sim", {{"step_dt", s.sim.step_dt}, {"max_steps", s.sim.max_steps}, {"seed", s.sim.seed}}},
           {"agents", std::move(agents)}};
}

void from_json(const Json& j, ScenarioSpec& s) {
  JsonReader in(j, "scenario");
  s = ScenarioSpec{};
  s.name = in.string("name");
  if (in.optional("description") != nullptr) s.description = in.string("description");
  JsonReader sim(in.required("sim"), "scenario.sim");
  s.sim.step_dt = sim.optional("step_dt") ? sim.number("step_dt") : 0.1;
  s.sim.max_steps = sim.u64("max_steps");
  s.sim.seed = sim.optional("seed") ? sim.u64("seed") : 0;
  sim.finish();
  if (const Json* agents = in.optional("agents")) {
    if (!agents->is_array()) throw SchemaError("scenario: 'agents' must be a list");
    for (const auto& a : *agents) s.agents.push_back(agent_from_json(a, std::nullopt));
  }
  in.finish();
}

void to_json(Json& j, const ScenarioTemplate& t) {
  Json placeholders = Json::array();
  for (const auto& p : t.placeholders) {
    Json pj{{"name", p.name}, {"path", p.path}, {"kind", p.kind == PlaceholderKind::Number ? "number" : "text"}};
    if (p.bounds) pj["bounds"] = Json::array({p.bounds->first, p.bounds->second});
    placeholders.push_back(std::move(pj));
  }
  j = Json{{"base", Json(t.base)}, {"placeholders", std::move(placeholders)}};
}

void from_json(const Json& j, ScenarioTemplate& t) {
  JsonReader in(j, "template");
  t = ScenarioTemplate{};
  t.base = in.required("base").get<ScenarioSpec>();
  if (const Json* ps = in.optional("placeholders")) {
    if (!ps->is_array()) throw SchemaError("template: 'placeholders' must be a list");
    for (const auto& pj : *ps) {
      JsonReader pin(pj, "template.placeholders");
      Placeholder p;
      p.name = pin.string("name");
      p.path = pin.string("path");
      const std::string kind = pin.string("kind");
      if (kind == "number") {
        p.kind = PlaceholderKind::Number;
      } else if (kind == "text") {
        p.kind = PlaceholderKind::Text;
      } else {
        throw SchemaError("template.placeholders: kind must be number or text");
      }
      if (const Json* b = pin.optional("bounds")) {
        if (!b->is_array() || b->size() != 2 || !(*b)[0].is_number() || !(*b)[1].is_number()) {
          throw SchemaError("template.placeholders: 'bounds' must be [lo, hi]");
        }
        p.bounds = std::make_pair((*b)[0].get<double>(), (*b)[1].get<double>());
      }
      pin.finish();
      t.placeholders.push_back(std::move(p));
    }
  }
  in.finish();
}

void to_json(Json& j, const ExecutionRequest& r) {
  j = Json{{"request_id", r.request_id},
           {"scenario", Json(r.scenario)},
           {"seed", r.seed},
           {"origin", {{"batch_id", r.origin.batch_id}, {"index", r.origin.index}}}};
}

void from_json(const Json& j, ExecutionRequest& r) {
  JsonReader in(j, "execution_request");
  r.request_id = in.string("request_id");
  r.scenario = in.required("scenario").get<ScenarioSpec>();
  r.seed = in.u64("seed");
  JsonReader origin(in.required("origin"), "execution_request.origin");
  r.origin.batch_id = origin.string("batch_id");
  r.origin.index = origin.u64("index");
  origin.finish();
  in.finish();
}

void to_json(Json& j, const ValidationError& e) {
  j = Json{{"code", e.code}, {"path", e.path}, {"message", e.message}};
}

// --- paths -----------------------------------------------------------------

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace

std::string ParamPath::param_key_path() const {
  std::string out;
  for (const auto& k : param_keys) {
    if (!out.empty()) out += '.';
    out += k;
  }
  return out;
}

std::optional<ParamPath> parse_param_path(const std::string& path) {
  const auto parts = split(path, '.');
  for (const auto& p : parts) {
    if (p.empty()) return std::nullopt;
  }
  if (parts.size() < 4 || parts[0] != "agents") return std::nullopt;
  ParamPath out;
  out.agent_chain.push_back(parts[1]);
  std::size_t i = 2;
  while (i + 1 < parts.size() && parts[i] == "components") {
    out.agent_chain.push_back(parts[i + 1]);
    i += 2;
  }
  if (i >= parts.size() || parts[i] != "params") return std::nullopt;
  ++i;
  if (i >= parts.size()) return std::nullopt;
  out.param_keys.assign(parts.begin() + static_cast<std::ptrdiff_t>(i), parts.end());
  return out;
}

namespace {

template <typename Agents>
auto find_in(Agents& agents, const std::string& id) -> decltype(&agents.front()) {
  for (auto& a : agents) {
    if (a.agent_id == id) return &a;
  }
  return nullptr;
}

template <typename Spec>
auto find_agent_impl(Spec& spec, const ParamPath& path) -> decltype(&spec.agents.front()) {
  auto* agent = find_in(spec.agents, path.agent_chain.front());
  for (std::size_t i = 1; agent != nullptr && i < path.agent_chain.size(); ++i) {
    agent = find_in(agent->components, path.agent_chain[i]);
  }
  return agent;
}

Json* find_leaf(Json& params, const std::vector<std::string>& keys) {
  Json* cur = &params;
  for (const auto& k : keys) {
    if (!cur->is_object()) return nullptr;
    auto it = cur->find(k);
    if (it == cur->end()) return nullptr;
    cur = &*it;
  }
  return cur->is_object() ? nullptr : cur;
}

}  // namespace

const AgentSpec* find_agent(const ScenarioSpec& spec, const ParamPath& path) {
  return find_agent_impl(spec, path);
}

AgentSpec* find_agent(ScenarioSpec& spec, const ParamPath& path) { return find_agent_impl(spec, path); }

// --- validation --------------------------------------------------------------

namespace {

constexpr int kMaxComponentDepth = 3;

const ModelManifest* lookup(std::span<const ModelManifest> registry, const ModelRef& ref) {
  for (const auto& m : registry) {
    if (m.name == ref.name && m.version == ref.version) return &m;
  }
  return nullptr;
}

struct Validator {
  std::span<const ModelManifest> registry;
  std::vector<ValidationError> errors;
  std::set<std::string> ids;

  void add(std::string code, std::string path, std::string message) {
    errors.push_back({std::move(code), std::move(path), std::move(message)});
  }

  void agent(const AgentSpec& a, const std::string& prefix, int depth, const ModelManifest* parent) {
    const std::string path = prefix + a.agent_id;
    if (a.agent_id.empty() || a.agent_id.find('.') != std::string::npos) {
      add("BadAgentId", path, "agent_id must be non-empty and must not contain '.'");
    }
    if (!ids.insert(a.agent_id).second) {
      add("DuplicateAgentId", path, "duplicate agent_id '" + a.agent_id + "'");
    }
    if (depth > kMaxComponentDepth) {
      add("NestingTooDeep", path, "component nesting deeper than " + std::to_string(kMaxComponentDepth));
    }
    const ModelManifest* manifest = lookup(registry, a.model);
    if (manifest == nullptr) {
      add("UnknownModel", path + ".model", "model '" + a.model.qualified() + "' is not registered");
    } else {
      params(a, *manifest, path);
    }
    if (parent != nullptr) {
      const auto& accepted = parent->accepted_components;
      if (std::find(accepted.begin(), accepted.end(), a.model.name) == accepted.end()) {
        add("ComponentNotAccepted", path,
            "model '" + parent->qualified_name() + "' does not accept component model '" + a.model.name + "'");
      }
    }
    for (const auto& c : a.components) agent(c, path + ".components.", depth + 1, manifest);
  }

  void params(const AgentSpec& a, const ModelManifest& m, const std::string& path) {
    if (!a.params.is_object()) {
      add("InvalidParam", path + ".params", "params must be an object");
      return;
    }
    for (const auto& [key, value] : a.params.items()) {
      const ParamSpec* spec = m.find_param(key);
      if (spec == nullptr) {
        add("UnknownParam", path + ".params." + key, "model '" + m.qualified_name() + "' has no param '" + key + "'");
      } else if (auto err = check_param_value(*spec, value)) {
        add("InvalidParam", path + ".params." + key, *err);
      }
    }
    for (const auto& spec : m.params) {
      if (spec.required && !a.params.contains(spec.key)) {
        add("MissingParam", path + ".params." + spec.key, "required param '" + spec.key + "' missing");
      }
    }
  }
};

}  // namespace

std::vector<ValidationError> validate(const ScenarioSpec& spec, std::span<const ModelManifest> registry) {
  Validator v{registry, {}, {}};
  if (!(spec.sim.step_dt > 0.0) || !std::isfinite(spec.sim.step_dt)) {
    v.add("BadSim", "sim.step_dt", "step_dt must be a positive finite number");
  }
  if (spec.sim.max_steps < 1) v.add("BadSim", "sim.max_steps", "max_steps must be at least 1");
  for (const auto& a : spec.agents) v.agent(a, "agents.", 0, nullptr);
  return v.errors;
}

std::vector<ValidationError> validate_template(const ScenarioTemplate& tmpl) {
  std::vector<ValidationError> errors;
  std::set<std::string> names;
  ScenarioSpec base = tmpl.base;
  for (const auto& p : tmpl.placeholders) {
    const std::string where = "placeholders." + p.name;
    if (p.name.empty()) errors.push_back({"BadPlaceholder", where, "placeholder name must not be empty"});
    if (!names.insert(p.name).second) {
      errors.push_back({"DuplicatePlaceholder", where, "duplicate placeholder '" + p.name + "'"});
    }
    if (p.bounds) {
      if (p.kind != PlaceholderKind::Number) {
        errors.push_back({"BadPlaceholder", where, "bounds apply only to kind=number"});
      } else if (!(p.bounds->first < p.bounds->second)) {
        errors.push_back({"BadPlaceholder", where, "bounds need lo < hi"});
      }
    }
    const auto path = parse_param_path(p.path);
    if (!path) {
      errors.push_back({"BadPath", where, "'" + p.path + "' is not a valid param path"});
      continue;
    }
    AgentSpec* agent = find_agent(base, *path);
    Json* leaf = agent ? find_leaf(agent->params, path->param_keys) : nullptr;
    if (leaf == nullptr) {
      errors.push_back({"PathVanished", where, "'" + p.path + "' does not address a params leaf of the base"});
      continue;
    }
    const bool kind_ok = p.kind == PlaceholderKind::Number ? leaf->is_number() : leaf->is_string();
    if (!kind_ok) errors.push_back({"KindMismatch", where, "base value at '" + p.path + "' does not match kind"});
  }
  return errors;
}

ScenarioSpec resolve(const ScenarioTemplate& tmpl, const BindingSet& binding) {
  std::set<std::string> declared;
  for (const auto& p : tmpl.placeholders) declared.insert(p.name);
  for (const auto& [name, _] : binding) {
    if (!declared.count(name)) throw ScenarioError("UnknownPlaceholder", "binding names undeclared placeholder '" + name + "'");
  }
  ScenarioSpec out = tmpl.base;
  for (const auto& p : tmpl.placeholders) {
    auto it = binding.find(p.name);
    if (it == binding.end()) throw ScenarioError("MissingBinding", "no value bound for placeholder '" + p.name + "'");
    const Json& value = it->second;
    if (p.kind == PlaceholderKind::Number) {
      if (!value.is_number()) throw ScenarioError("KindMismatch", "placeholder '" + p.name + "' expects a number");
      if (p.bounds) {
        const double v = value.get<double>();
        if (v < p.bounds->first || v > p.bounds->second) {
          throw ScenarioError("OutOfBounds", "placeholder '" + p.name + "' = " + value.dump() + " is outside its bounds");
        }
      }
    } else if (!value.is_string()) {
      throw ScenarioError("KindMismatch", "placeholder '" + p.name + "' expects text");
    }
    const auto path = parse_param_path(p.path);
    AgentSpec* agent = path ? find_agent(out, *path) : nullptr;
    Json* leaf = agent ? find_leaf(agent->params, path->param_keys) : nullptr;
    if (leaf == nullptr) throw ScenarioError("PathVanished", "path '" + p.path + "' no longer resolves in the base");
    *leaf = value;
  }
  return out;
}

std::vector<ExecutionRequest> expand_batch(const ScenarioTemplate& tmpl, std::span<const BindingSet> bindings,
                                           std::uint64_t batch_seed, const std::string& batch_id) {
  std::vector<ExecutionRequest> out;
  out.reserve(bindings.size());
  for (std::size_t i = 0; i < bindings.size(); ++i) {
    ExecutionRequest req;
    try {
      req.scenario = resolve(tmpl, bindings[i]);
    } catch (const ScenarioError& e) {
      throw ScenarioError(e.code(), "binding " + std::to_string(i) + ": " + e.what(), i);
    }
    req.seed = derive_seed(batch_seed, i);
    req.origin = {batch_id, i};
    req.request_id = batch_id + "-" + std::to_string(i);
    out.push_back(std::move(req));
  }
  return out;
}

// --- design of experiments ----------------------------------------------------

std::vector<BindingSet> full_factorial(const FactorList& factors) {
  std::size_t total = 1;
  for (const auto& [name, values] : factors) {
    if (values.empty()) throw ScenarioError("EmptyFactor", "factor '" + name + "' has no levels");
    total *= values.size();
  }
  if (factors.empty()) return {};
  std::vector<BindingSet> out;
  out.reserve(total);
  std::vector<std::size_t> digit(factors.size(), 0);
  for (std::size_t row = 0; row < total; ++row) {
    BindingSet b;
    for (std::size_t f = 0; f < factors.size(); ++f) b[factors[f].first] = factors[f].second[digit[f]];
    out.push_back(std::move(b));
    for (std::size_t f = factors.size(); f-- > 0;) {
      if (++digit[f] < factors[f].second.size()) break;
      digit[f] = 0;
    }
  }
  return out;
}

std::vector<BindingSet> latin_hypercube(std::size_t n, const RangeList& ranges, std::uint64_t seed) {
  if (n < 1) throw ScenarioError("BadSampleCount", "latin hypercube needs n >= 1");
  for (const auto& [name, range] : ranges) {
    if (!(range.first < range.second) || !std::isfinite(range.first) || !std::isfinite(range.second)) {
      throw ScenarioError("BadRange", "range of '" + name + "' needs finite lo < hi");
    }
  }
  SplitMix64 rng(seed);
  std::vector<BindingSet> out(n);
  for (const auto& [name, range] : ranges) {
    const auto [lo, hi] = range;
    const double width = (hi - lo) / static_cast<double>(n);
    std::vector<double> values(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double stratum_lo = lo + width * static_cast<double>(k);
      const double stratum_hi = k + 1 == n ? hi : lo + width * static_cast<double>(k + 1);
      double v = stratum_lo + width * rng.next_double();
      if (v >= stratum_hi) v = std::nextafter(stratum_hi, lo);
      if (v < stratum_lo) v = stratum_lo;
      values[k] = v;
    }
    for (std::size_t i = n; i-- > 1;) std::swap(values[i], values[rng.below(i + 1)]);
    for (std::size_t i = 0; i < n; ++i) out[i][name] = values[i];
  }
  return out;
}

FactorList factors_from_json(const Json& j) {
  FactorList out;
  if (j.is_array()) {
    for (const auto& f : j) {
      JsonReader in(f, "factor");
      std::string name = in.string("name");
      const Json& values = in.required("values");
      if (!values.is_array()) throw SchemaError("factor '" + name + "': 'values' must be a list");
      in.finish();
      out.emplace_back(std::move(name), values.get<std::vector<Json>>());
    }
  } else if (j.is_object()) {
    for (const auto& [name, values] : j.items()) {
      if (!values.is_array()) throw SchemaError("factor '" + name + "': levels must be a list");
      out.emplace_back(name, values.get<std::vector<Json>>());
    }
  } else {
    throw SchemaError("factors must be a list or an object");
  }
  return out;
}

namespace {

std::pair<double, double> range_pair(const Json& r, const std::string& name) {
  if (!r.is_array() || r.size() != 2 || !r[0].is_number() || !r[1].is_number()) {
    throw SchemaError("range '" + name + "' must be [lo, hi]");
  }
  return {r[0].get<double>(), r[1].get<double>()};
}

}  // namespace

RangeList ranges_from_json(const Json& j) {
  RangeList out;
  if (j.is_array()) {
    for (const auto& f : j) {
      JsonReader in(f, "range");
      std::string name = in.string("name");
      auto r = range_pair(in.required("range"), name);
      in.finish();
      out.emplace_back(std::move(name), r);
    }
  } else if (j.is_object()) {
    for (const auto& [name, r] : j.items()) out.emplace_back(name, range_pair(r, name));
  } else {
    throw SchemaError("ranges must be a list or an object");
  }
  return out;
}

}  // namespace asa
