#include "asa/record.hpp"

#include "asa/error.hpp"

namespace asa {

std::optional<double> as_number(const Scalar& value) {
  if (const auto* i = std::get_if<std::int64_t>(&value)) return static_cast<double>(*i);
  if (const auto* d = std::get_if<double>(&value)) return *d;
  return std::nullopt;
}

Json scalar_to_json(const Scalar& value) {
  return std::visit([](const auto& v) { return Json(v); }, value);
}

Scalar scalar_from_json(const Json& value, const std::string& context) {
  if (value.is_boolean()) return value.get<bool>();
  if (value.is_number_integer()) {
    if (value.is_number_unsigned() && value.get<std::uint64_t>() > INT64_MAX) {
      return static_cast<double>(value.get<std::uint64_t>());
    }
    return value.get<std::int64_t>();
  }
  if (value.is_number_float()) return value.get<double>();
  if (value.is_string()) return value.get<std::string>();
  throw SchemaError(context + ": payload values must be number, text or boolean");
}

void to_json(Json& j, const StepRecord& r) {
  Json payload = Json::object();
  for (const auto& [k, v] : r.payload) payload[k] = scalar_to_json(v);
  j = Json{{"run_id", r.run_id}, {"step", r.step},       {"sim_time", r.sim_time},
           {"tag", r.tag},       {"agent_id", r.agent_id}, {"payload", std::move(payload)}};
}

void from_json(const Json& j, StepRecord& r) {
  JsonReader in(j, "record");
  r.run_id = in.string("run_id");
  r.step = in.u64("step");
  r.sim_time = in.number("sim_time");
  r.tag = in.string("tag");
  r.agent_id = in.string("agent_id");
  r.payload.clear();
  const Json& payload = in.required("payload");
  if (!payload.is_object()) throw SchemaError("record: field 'payload' must be an object");
  for (const auto& [k, v] : payload.items()) r.payload[k] = scalar_from_json(v, "record.payload." + k);
  in.finish();
}

std::string to_canonical_line(const StepRecord& r) { return canonical(Json(r)); }

std::string to_canonical_log(const std::vector<StepRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_canonical_line(r);
    out += '\n';
  }
  return out;
}

}  // namespace asa
