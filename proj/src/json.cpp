#include "asa/json.hpp"

#include <algorithm>

#include "asa/error.hpp"

namespace asa {

JsonReader::JsonReader(const Json& object, std::string context)
    : object_(object), context_(std::move(context)) {
  if (!object_.is_object()) throw SchemaError(context_ + ": expected an object");
}

const Json* JsonReader::optional(std::string_view key) {
  seen_.emplace_back(key);
  auto it = object_.find(std::string(key));
  if (it == object_.end() || it->is_null()) return nullptr;
  return &*it;
}

const Json& JsonReader::required(std::string_view key) {
  const Json* v = optional(key);
  if (v == nullptr) throw SchemaError(context_ + ": missing field '" + std::string(key) + "'");
  return *v;
}

std::string JsonReader::string(std::string_view key) {
  const Json& v = required(key);
  if (!v.is_string()) throw SchemaError(context_ + ": field '" + std::string(key) + "' must be a string");
  return v.get<std::string>();
}

double JsonReader::number(std::string_view key) {
  const Json& v = required(key);
  if (!v.is_number()) throw SchemaError(context_ + ": field '" + std::string(key) + "' must be a number");
  return v.get<double>();
}

std::uint64_t JsonReader::u64(std::string_view key) {
  const Json& v = required(key);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
  throw SchemaError(context_ + ": field '" + std::string(key) + "' must be a non-negative integer");
}

std::int64_t JsonReader::i64(std::string_view key) {
  const Json& v = required(key);
  if (v.is_number_integer() && !(v.is_number_unsigned() && v.get<std::uint64_t>() > INT64_MAX)) {
    return v.get<std::int64_t>();
  }
  throw SchemaError(context_ + ": field '" + std::string(key) + "' must be an integer");
}

bool JsonReader::boolean(std::string_view key) {
  const Json& v = required(key);
  if (!v.is_boolean()) throw SchemaError(context_ + ": field '" + std::string(key) + "' must be a boolean");
  return v.get<bool>();
}

void JsonReader::finish() const {
  for (const auto& [key, _] : object_.items()) {
    if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
      throw SchemaError(context_ + ": unexpected field '" + key + "'");
    }
  }
}

}  // namespace asa
