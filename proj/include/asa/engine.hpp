#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "asa/error.hpp"
#include "asa/manifest.hpp"
#include "asa/model.hpp"
#include "asa/record.hpp"
#include "asa/scenario.hpp"

namespace asa {

using BehaviorPtr = std::shared_ptr<ModelBehavior>;
using BehaviorFactory = std::function<BehaviorPtr()>;

/// Registry load failure: ManifestInvalid, ArtifactUnloadable or DuplicateModel.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Models constructible by name@version. Built-ins are always present and
/// cannot be shadowed by extensions.
class ModelRegistry {
 public:
  /// Registry holding only the built-in models.
  static ModelRegistry with_builtins();

  void add(ModelManifest manifest, BehaviorFactory factory, bool builtin = false);

  /// Load a shared library plus its JSON manifest.
  void register_extension(const std::filesystem::path& artifact, const std::filesystem::path& manifest);

  /// Every `<stem>.json` in `dir` with a sibling library (`artifact` field,
  /// `lib<stem>.so` or `<stem>.so`). Returns one message per failure.
  std::vector<std::string> load_extension_dir(const std::filesystem::path& dir);

  const ModelManifest* find(const std::string& name, const std::string& version) const;
  bool contains_name(const std::string& name) const;
  bool is_builtin(const std::string& name) const;
  /// Throws Error("UnknownModel") when absent.
  BehaviorPtr create(const std::string& name, const std::string& version) const;

  std::vector<ModelManifest> manifests() const;

 private:
  struct Entry {
    ModelManifest manifest;
    BehaviorFactory factory;
    bool builtin = false;
  };
  std::map<std::string, Entry> entries_;  // keyed by name/version
};

/// Host-reserved record tags every agent may emit.
inline constexpr const char* kStatusTag = "status";
inline constexpr const char* kParamRejectedTag = "param_rejected";

struct ParamUpdate {
  std::string agent_id;
  std::string param_path;
  Json value;
};

struct BoundaryDecision {
  bool stop = false;
  std::vector<ParamUpdate> param_updates;
};

/// Polled once before every step. Implementations may block (pause, pacing).
class ControlSource {
 public:
  virtual ~ControlSource() = default;
  virtual BoundaryDecision at_boundary(std::uint64_t next_step, double sim_time) = 0;
};

class FreeRunning : public ControlSource {
 public:
  BoundaryDecision at_boundary(std::uint64_t, double) override { return {}; }
};

/// Receives each step's records, sorted by (agent_id, tag). Called for every
/// step including step 0, possibly with no records. Throwing fails the run.
class RecordSink {
 public:
  virtual ~RecordSink() = default;
  virtual void consume(std::uint64_t step, std::span<const StepRecord> records) = 0;
};

class CollectingSink : public RecordSink {
 public:
  void consume(std::uint64_t, std::span<const StepRecord> records) override {
    records_.insert(records_.end(), records.begin(), records.end());
  }
  const std::vector<StepRecord>& records() const { return records_; }

 private:
  std::vector<StepRecord> records_;
};

enum class RunStatus { Completed, Stopped, Failed };

std::string to_string(RunStatus s);

struct RunOutcome {
  RunStatus status = RunStatus::Completed;
  std::string reason;
  std::string failed_agent_id;
  std::uint64_t last_step = 0;
};

struct RunOptions {
  std::string run_id = "run";
  /// Overrides the scenario's sim.seed when set.
  std::optional<std::uint64_t> seed;
};

/// Executes one scenario to completion, stop or failure. Step 0 carries the
/// initial state; steps 1..max_steps follow.
RunOutcome run_simulation(const ScenarioSpec& spec, const ModelRegistry& registry, RecordSink& sink,
                          ControlSource& control, const RunOptions& options = {});

/// Number of run_simulation calls in this process.
std::uint64_t engine_invocations();

/// Seed of an agent's private RNG stream.
inline std::uint64_t agent_stream_seed(std::uint64_t run_seed, std::string_view agent_id) {
  return splitmix64_mix(run_seed ^ fnv1a64(agent_id));
}

}  // namespace asa
