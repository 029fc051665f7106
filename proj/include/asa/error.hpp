#pragma once

#include <stdexcept>
#include <string>

namespace asa {

/// Base exception carrying a stable, machine-readable code (e.g.
/// "RevisionConflict") alongside a human message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

/// A JSON document did not match the expected schema.
class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& message) : Error("SchemaError", message) {}
};

}  // namespace asa
