#include "asa/manifest.hpp"

#include <set>

#include "asa/error.hpp"

namespace asa {

std::string to_string(ParamType t) {
  switch (t) {
    case ParamType::Number: return "number";
    case ParamType::Text: return "text";
    case ParamType::Boolean: return "boolean";
    case ParamType::List: return "list";
    case ParamType::Object: return "object";
  }
  return "number";
}

ParamType param_type_from_string(const std::string& s) {
  if (s == "number") return ParamType::Number;
  if (s == "text") return ParamType::Text;
  if (s == "boolean") return ParamType::Boolean;
  if (s == "list") return ParamType::List;
  if (s == "object") return ParamType::Object;
  throw SchemaError("manifest: unknown param type '" + s + "'");
}

const ParamSpec* ModelManifest::find_param(const std::string& key) const {
  for (const auto& p : params) {
    if (p.key == key) return &p;
  }
  return nullptr;
}

const EmittedTag* ModelManifest::find_tag(const std::string& tag) const {
  for (const auto& t : emitted_tags) {
    if (t.tag == tag) return &t;
  }
  return nullptr;
}

void to_json(Json& j, const ModelManifest& m) {
  Json params = Json::array();
  for (const auto& p : m.params) {
    Json pj{{"key", p.key}, {"type", to_string(p.type)}, {"required", p.required}};
    if (p.default_value) pj["default"] = *p.default_value;
    if (p.bounds) pj["bounds"] = Json::array({p.bounds->first, p.bounds->second});
    params.push_back(std::move(pj));
  }
  Json tags = Json::array();
  for (const auto& t : m.emitted_tags) tags.push_back({{"tag", t.tag}, {"payload_keys", t.payload_keys}});
  j = Json{{"name", m.name},
           {"version", m.version},
           {"params", std::move(params)},
           {"accepted_components", m.accepted_components},
           {"emitted_tags", std::move(tags)}};
  if (!m.artifact.empty()) j["artifact"] = m.artifact;
}

void from_json(const Json& j, ModelManifest& m) {
  JsonReader in(j, "manifest");
  m.name = in.string("name");
  m.version = in.string("version");
  m.params.clear();
  if (const Json* params = in.optional("params")) {
    if (!params->is_array()) throw SchemaError("manifest: 'params' must be a list");
    for (const auto& pj : *params) {
      JsonReader pin(pj, "manifest.params");
      ParamSpec p;
      p.key = pin.string("key");
      p.type = param_type_from_string(pin.string("type"));
      if (const Json* d = pin.optional("default")) p.default_value = *d;
      if (pin.optional("required") != nullptr) p.required = pin.boolean("required");
      if (const Json* b = pin.optional("bounds")) {
        if (!b->is_array() || b->size() != 2 || !(*b)[0].is_number() || !(*b)[1].is_number()) {
          throw SchemaError("manifest.params: 'bounds' must be [lo, hi]");
        }
        p.bounds = std::make_pair((*b)[0].get<double>(), (*b)[1].get<double>());
      }
      pin.finish();
      m.params.push_back(std::move(p));
    }
  }
  m.accepted_components.clear();
  if (const Json* ac = in.optional("accepted_components")) {
    m.accepted_components = ac->get<std::vector<std::string>>();
  }
  m.emitted_tags.clear();
  if (const Json* tags = in.optional("emitted_tags")) {
    if (!tags->is_array()) throw SchemaError("manifest: 'emitted_tags' must be a list");
    for (const auto& tj : *tags) {
      JsonReader tin(tj, "manifest.emitted_tags");
      EmittedTag t;
      t.tag = tin.string("tag");
      if (const Json* keys = tin.optional("payload_keys")) t.payload_keys = keys->get<std::vector<std::string>>();
      tin.finish();
      m.emitted_tags.push_back(std::move(t));
    }
  }
  m.artifact.clear();
  if (in.optional("artifact") != nullptr) m.artifact = in.string("artifact");
  in.finish();
}

std::optional<std::string> check_param_value(const ParamSpec& spec, const Json& value) {
  bool ok = false;
  switch (spec.type) {
    case ParamType::Number: ok = value.is_number(); break;
    case ParamType::Text: ok = value.is_string(); break;
    case ParamType::Boolean: ok = value.is_boolean(); break;
    case ParamType::List: ok = value.is_array(); break;
    case ParamType::Object: ok = value.is_object(); break;
  }
  if (!ok) return "param '" + spec.key + "' must be of type " + to_string(spec.type);
  if (spec.bounds && value.is_number()) {
    const double v = value.get<double>();
    if (v < spec.bounds->first || v > spec.bounds->second) {
      return "param '" + spec.key + "' = " + value.dump() + " outside bounds [" +
             Json(spec.bounds->first).dump() + ", " + Json(spec.bounds->second).dump() + "]";
    }
  }
  return std::nullopt;
}

std::vector<std::string> manifest_problems(const ModelManifest& m) {
  std::vector<std::string> out;
  if (m.name.empty()) out.push_back("name must not be empty");
  if (m.version.empty()) out.push_back("version must not be empty");
  if (m.name.find('/') != std::string::npos || m.name.find('@') != std::string::npos) {
    out.push_back("name must not contain '/' or '@'");
  }
  std::set<std::string> keys;
  for (const auto& p : m.params) {
    if (p.key.empty()) out.push_back("param with empty key");
    if (!keys.insert(p.key).second) out.push_back("duplicate param '" + p.key + "'");
    if (p.required && p.default_value) out.push_back("required param '" + p.key + "' must not have a default");
    if (p.bounds) {
      if (p.type != ParamType::Number) out.push_back("bounds on non-number param '" + p.key + "'");
      if (!(p.bounds->first < p.bounds->second)) out.push_back("bounds of '" + p.key + "' need lo < hi");
    }
    if (p.default_value) {
      if (auto err = check_param_value(p, *p.default_value)) out.push_back("default: " + *err);
    }
  }
  std::set<std::string> tags;
  for (const auto& t : m.emitted_tags) {
    if (t.tag.empty()) out.push_back("emitted tag with empty name");
    if (!tags.insert(t.tag).second) out.push_back("duplicate emitted tag '" + t.tag + "'");
  }
  return out;
}

}  // namespace asa
