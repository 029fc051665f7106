#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "asa/json.hpp"

namespace asa {

enum class ParamType { Number, Text, Boolean, List, Object };

std::string to_string(ParamType t);
ParamType param_type_from_string(const std::string& s);

struct ParamSpec {
  std::string key;
  ParamType type = ParamType::Number;
  std::optional<Json> default_value;
  bool required = false;
  std::optional<std::pair<double, double>> bounds;

  bool operator==(const ParamSpec&) const = default;
};

struct EmittedTag {
  std::string tag;
  std::vector<std::string> payload_keys;

  bool operator==(const EmittedTag&) const = default;
};

/// Contract of a loadable agent model: the parameters it accepts, the
/// component models it can carry and the record tags it emits.
struct ModelManifest {
  std::string name;
  std::string version;
  std::vector<ParamSpec> params;
  std::vector<std::string> accepted_components;
  std::vector<EmittedTag> emitted_tags;
  /// Shared library path relative to the manifest file (extensions only).
  std::string artifact;

  std::string qualified_name() const { return name + "/" + version; }
  const ParamSpec* find_param(const std::string& key) const;
  const EmittedTag* find_tag(const std::string& tag) const;

  bool operator==(const ModelManifest&) const = default;
};

void to_json(Json& j, const ModelManifest& m);
void from_json(const Json& j, ModelManifest& m);

/// Invariant violations of a single manifest; empty when valid.
std::vector<std::string> manifest_problems(const ModelManifest& m);

/// Type check of one param value against its spec; empty when valid.
std::optional<std::string> check_param_value(const ParamSpec& spec, const Json& value);

}  // namespace asa
