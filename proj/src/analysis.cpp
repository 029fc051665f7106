#include "asa/analysis.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>

namespace asa::analysis {

std::string to_string(Reducer r) {
  switch (r) {
    case Reducer::CountByTag: return "count_by_tag";
    case Reducer::TimeOfFirst: return "time_of_first";
    case Reducer::FinalValue: return "final_value";
    case Reducer::SurvivalCount: return "survival_count";
  }
  return "count_by_tag";
}

Reducer reducer_from_string(const std::string& s) {
  for (Reducer r : {Reducer::CountByTag, Reducer::TimeOfFirst, Reducer::FinalValue, Reducer::SurvivalCount}) {
    if (to_string(r) == s) return r;
  }
  throw SchemaError("metric: unknown reducer '" + s + "'");
}

void to_json(Json& j, const MetricSpec& m) {
  j = Json{{"name", m.name}, {"reducer", to_string(m.reducer)}};
  switch (m.reducer) {
    case Reducer::CountByTag:
    case Reducer::TimeOfFirst: j["tag"] = m.tag; break;
    case Reducer::FinalValue:
      j["agent_id"] = m.agent_id;
      j["key"] = m.key;
      break;
    case Reducer::SurvivalCount: j["side"] = side_name(m.side); break;
  }
}

void from_json(const Json& j, MetricSpec& m) {
  JsonReader in(j, "metric");
  m = MetricSpec{};
  m.name = in.string("name");
  m.reducer = reducer_from_string(in.string("reducer"));
  switch (m.reducer) {
    case Reducer::CountByTag:
    case Reducer::TimeOfFirst: m.tag = in.string("tag"); break;
    case Reducer::FinalValue:
      m.agent_id = in.string("agent_id");
      m.key = in.string("key");
      break;
    case Reducer::SurvivalCount: m.side = side_from_string(in.string("side")); break;
  }
  in.finish();
  if (m.name.empty()) throw SchemaError("metric: 'name' must not be empty");
}

std::vector<MetricSpec> metrics_from_json(const Json& j) {
  const Json& list = j.is_object() && j.contains("metrics") ? j.at("metrics") : j;
  if (!list.is_array()) throw SchemaError("metrics: expected a list");
  std::vector<MetricSpec> out;
  std::set<std::string> names;
  for (const auto& m : list) {
    out.push_back(m.get<MetricSpec>());
    if (!names.insert(out.back().name).second) throw SchemaError("metrics: duplicate name '" + out.back().name + "'");
  }
  return out;
}

std::vector<std::string> metric_warnings(std::span<const MetricSpec> metrics, std::span<const ModelManifest> manifests) {
  std::set<std::string> tags{"status", "param_rejected"};
  std::set<std::string> keys{"alive", "side", "role", "x", "y", "z", "speed", "heading", "path", "reason", "count"};
  for (const auto& m : manifests) {
    for (const auto& t : m.emitted_tags) {
      tags.insert(t.tag);
      keys.insert(t.payload_keys.begin(), t.payload_keys.end());
    }
  }
  std::vector<std::string> out;
  for (const auto& m : metrics) {
    if ((m.reducer == Reducer::CountByTag || m.reducer == Reducer::TimeOfFirst) && !tags.count(m.tag)) {
      out.push_back(m.name + ": tag '" + m.tag + "' is not emitted by any model");
    }
    if (m.reducer == Reducer::FinalValue && !keys.count(m.key)) {
      out.push_back(m.name + ": key '" + m.key + "' is not emitted by any model");
    }
  }
  return out;
}

MetricValue compute_metric(std::span<const StepRecord> records, const MetricSpec& spec) {
  MetricValue out;
  switch (spec.reducer) {
    case Reducer::CountByTag: {
      std::int64_t n = 0;
      for (const auto& r : records) n += r.tag == spec.tag;
      out.value = static_cast<double>(n);
      break;
    }
    case Reducer::TimeOfFirst:
      for (const auto& r : records) {
        if (r.tag == spec.tag) {
          out.value = r.sim_time;
          break;
        }
      }
      break;
    case Reducer::FinalValue:
      for (auto it = records.rbegin(); it != records.rend(); ++it) {
        if (it->agent_id != spec.agent_id) continue;
        auto v = it->payload.find(spec.key);
        if (v == it->payload.end()) continue;
        if (const bool* b = std::get_if<bool>(&v->second)) {
          out.value = *b ? 1.0 : 0.0;
        } else if (auto num = as_number(v->second)) {
          out.value = *num;
        } else {
          out.warnings.push_back("MalformedRecord: " + spec.agent_id + "." + spec.key + " at step " +
                                 std::to_string(it->step) + " is not numeric");
        }
        break;
      }
      break;
    case Reducer::SurvivalCount: {
      if (records.empty()) break;
      const std::uint64_t final_step = records.back().step;
      std::int64_t alive = 0;
      bool seen = false;
      for (const auto& r : records) {
        if (r.step != final_step || r.tag != "status") continue;
        seen = true;
        auto a = r.payload.find("alive");
        auto s = r.payload.find("side");
        auto role = r.payload.find("role");
        if (a == r.payload.end() || s == r.payload.end() || role == r.payload.end() ||
            !std::holds_alternative<bool>(a->second) || !std::holds_alternative<std::string>(s->second) ||
            !std::holds_alternative<std::string>(role->second)) {
          out.warnings.push_back("MalformedRecord: status of " + r.agent_id + " at step " + std::to_string(r.step));
          return MetricValue{std::nullopt, out.warnings};
        }
        if (std::get<bool>(a->second) && std::get<std::string>(s->second) == side_name(spec.side) &&
            std::get<std::string>(role->second) == "platform") {
          ++alive;
        }
      }
      if (seen) out.value = static_cast<double>(alive);
      break;
    }
  }
  return out;
}

MetricSummary summarize(std::span<const std::optional<double>> values) {
  MetricSummary s;
  std::vector<double> v;
  for (const auto& x : values) {
    if (x && std::isfinite(*x)) {
      v.push_back(*x);
    } else {
      ++s.undefined;
    }
  }
  s.n = v.size();
  if (v.empty()) return s;
  double sum = 0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  s.mean = mean;
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  if (v.size() >= 2) {
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    s.std = sd;
    const double half = 1.96 * sd / std::sqrt(static_cast<double>(v.size()));
    s.ci95_lo = mean - half;
    s.ci95_hi = mean + half;
  }
  return s;
}

BatchSummary aggregate(std::string batch_id, std::vector<RunRow> rows) {
  BatchSummary out;
  out.batch_id = std::move(batch_id);
  std::sort(rows.begin(), rows.end(), [](const RunRow& a, const RunRow& b) { return a.run_index < b.run_index; });
  std::set<std::string> names;
  for (const auto& r : rows) {
    for (const auto& [name, _] : r.metrics) names.insert(name);
  }
  for (const auto& name : names) {
    std::vector<std::optional<double>> values;
    for (const auto& r : rows) {
      auto it = r.metrics.find(name);
      values.push_back(it == r.metrics.end() ? std::nullopt : it->second);
    }
    out.metrics[name] = summarize(values);
  }
  out.runs = std::move(rows);
  return out;
}

namespace {

Json opt(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string cell_of(const Json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return format_number(v.get<double>());
  return canonical(v);
}

std::string cell_of(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

void append_row(std::string& out, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += csv_cell(cells[i]);
  }
  out += "\r\n";
}

}  // namespace

Json to_json(const BatchSummary& s) {
  Json metrics = Json::object();
  for (const auto& [name, m] : s.metrics) {
    metrics[name] = {{"n", m.n},       {"undefined", m.undefined}, {"mean", opt(m.mean)},
                     {"std", opt(m.std)}, {"min", opt(m.min)},      {"max", opt(m.max)},
                     {"ci95", m.ci95_lo ? Json::array({*m.ci95_lo, *m.ci95_hi}) : Json(nullptr)}};
  }
  Json runs = Json::array();
  for (const auto& r : s.runs) {
    Json bindings = Json::object();
    for (const auto& [k, v] : r.bindings) bindings[k] = v;
    Json values = Json::object();
    for (const auto& [k, v] : r.metrics) values[k] = opt(v);
    runs.push_back({{"run_index", r.run_index}, {"run_id", r.run_id}, {"bindings", bindings}, {"metrics", values}});
  }
  return {{"batch_id", s.batch_id}, {"metrics", metrics}, {"runs", runs}};
}

std::string format_number(double v) {
  if (std::isnan(v)) return "";
  if (v == 0) return "0";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string runs_csv(const BatchSummary& s) {
  std::set<std::string> binding_names;
  for (const auto& r : s.runs) {
    for (const auto& [k, _] : r.bindings) binding_names.insert(k);
  }
  std::vector<std::string> header{"run_index"};
  header.insert(header.end(), binding_names.begin(), binding_names.end());
  for (const auto& [name, _] : s.metrics) header.push_back(name);
  std::string out;
  append_row(out, header);
  for (const auto& r : s.runs) {
    std::vector<std::string> row{std::to_string(r.run_index)};
    for (const auto& b : binding_names) {
      auto it = r.bindings.find(b);
      row.push_back(it == r.bindings.end() ? "" : cell_of(it->second));
    }
    for (const auto& [name, _] : s.metrics) {
      auto it = r.metrics.find(name);
      row.push_back(it == r.metrics.end() ? "" : cell_of(it->second));
    }
    append_row(out, row);
  }
  return out;
}

std::string summary_csv(const BatchSummary& s) {
  std::string out;
  append_row(out, {"metric", "n", "undefined", "mean", "std", "min", "max", "ci95_lo", "ci95_hi"});
  for (const auto& [name, m] : s.metrics) {
    append_row(out, {name, std::to_string(m.n), std::to_string(m.undefined), cell_of(m.mean), cell_of(m.std),
                     cell_of(m.min), cell_of(m.max), cell_of(m.ci95_lo), cell_of(m.ci95_hi)});
  }
  return out;
}

void export_csv(const std::string& content, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << content;
    out.flush();
    if (!out) throw Error("IoError", "cannot write " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("IoError", "cannot write " + path.string() + ": " + ec.message());
}

}  // namespace asa::analysis
