#pragma once

#include <string>
#include <string_view>
#include <vector>
#include <cstdint>

#include <json.hpp>

namespace asa {

using Json = nlohmann::json;

/// Canonical serialization: object keys sorted, no whitespace, shortest
/// round-trip numbers. Equal values always produce equal bytes.
inline std::string canonical(const Json& value) { return value.dump(); }

/// Strict field access used by every from_json in the project. Errors name
/// the offending field so they can be surfaced verbatim to clients.
class JsonReader {
 public:
  JsonReader(const Json& object, std::string context);

  const Json& required(std::string_view key);
  const Json* optional(std::string_view key);

  std::string string(std::string_view key);
  double number(std::string_view key);
  std::uint64_t u64(std::string_view key);
  std::int64_t i64(std::string_view key);
  bool boolean(std::string_view key);

  /// Throws if the object carries a key that was never read.
  void finish() const;

  const std::string& context() const { return context_; }

 private:
  const Json& object_;
  std::string context_;
  std::vector<std::string> seen_;
};

}  // namespace asa
