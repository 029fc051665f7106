#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asa/manifest.hpp"
#include "asa/model.hpp"
#include "asa/record.hpp"
#include "asa/scenario.hpp"

namespace asa::analysis {

enum class Reducer { CountByTag, TimeOfFirst, FinalValue, SurvivalCount };

std::string to_string(Reducer r);
Reducer reducer_from_string(const std::string& s);

struct MetricSpec {
  std::string name;
  Reducer reducer = Reducer::CountByTag;
  std::string tag;       // count_by_tag, time_of_first
  std::string agent_id;  // final_value
  std::string key;       // final_value
  Side side = Side::Blue;  // survival_count

  bool operator==(const MetricSpec&) const = default;
};

void to_json(Json& j, const MetricSpec& m);
void from_json(const Json& j, MetricSpec& m);

/// Accepts a list of specs or {"metrics": [...]}. Names must be unique.
std::vector<MetricSpec> metrics_from_json(const Json& j);

/// Tags and keys not declared by any of `manifests` (plus the host's status
/// record). Advisory only.
std::vector<std::string> metric_warnings(std::span<const MetricSpec> metrics, std::span<const ModelManifest> manifests);

struct MetricValue {
  std::optional<double> value;
  std::vector<std::string> warnings;
};

/// Reduce one run's ordered records.
MetricValue compute_metric(std::span<const StepRecord> records, const MetricSpec& spec);

struct MetricSummary {
  std::size_t n = 0;
  std::size_t undefined = 0;
  std::optional<double> mean, std, min, max, ci95_lo, ci95_hi;
};

/// Moments over the defined values; std uses n-1 and the interval is the
/// normal approximation mean +/- 1.96 std / sqrt(n).
MetricSummary summarize(std::span<const std::optional<double>> values);

struct RunRow {
  std::uint64_t run_index = 0;
  std::string run_id;
  BindingSet bindings;
  std::map<std::string, std::optional<double>> metrics;
};

struct BatchSummary {
  std::string batch_id;
  std::map<std::string, MetricSummary> metrics;  // sorted by metric name
  std::vector<RunRow> runs;                      // sorted by run_index
};

BatchSummary aggregate(std::string batch_id, std::vector<RunRow> rows);

Json to_json(const BatchSummary& s);

/// Shortest representation that parses back to the same double.
std::string format_number(double v);

/// Per-run table: run_index, bindings (sorted), metrics (sorted). CRLF line ends.
std::string runs_csv(const BatchSummary& s);
/// One row per metric: metric,n,undefined,mean,std,min,max,ci95_lo,ci95_hi.
std::string summary_csv(const BatchSummary& s);

/// Write `content` to `path` atomically. Throws Error("IoError").
void export_csv(const std::string& content, const std::filesystem::path& path);

}  // namespace asa::analysis
