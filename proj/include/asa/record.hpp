#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "asa/json.hpp"

namespace asa {

/// Payload values are flat scalars.
using Scalar = std::variant<bool, std::int64_t, double, std::string>;
using Payload = std::map<std::string, Scalar>;

std::optional<double> as_number(const Scalar& value);
Json scalar_to_json(const Scalar& value);
Scalar scalar_from_json(const Json& value, const std::string& context);

/// One tagged observation of one agent at one step. The unit of persistence,
/// replay and analysis.
struct StepRecord {
  std::string run_id;
  std::uint64_t step = 0;
  double sim_time = 0.0;
  std::string tag;
  std::string agent_id;
  Payload payload;

  bool operator==(const StepRecord&) const = default;
};

/// Records are totally ordered by (step, agent_id, tag) within a run.
struct RecordKey {
  std::uint64_t step = 0;
  std::string agent_id;
  std::string tag;

  auto operator<=>(const RecordKey&) const = default;
};

inline RecordKey key_of(const StepRecord& r) { return {r.step, r.agent_id, r.tag}; }

void to_json(Json& j, const StepRecord& r);
void from_json(const Json& j, StepRecord& r);

/// Canonical JSON line (no trailing newline).
std::string to_canonical_line(const StepRecord& r);

/// Canonical JSON-lines rendering of a record stream.
std::string to_canonical_log(const std::vector<StepRecord>& records);

}  // namespace asa
