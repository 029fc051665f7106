#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "asa/error.hpp"
#include "asa/json.hpp"
#include "asa/record.hpp"

namespace asa::store {

// On-disk layout under a data root:
//   catalog/<kind>/<id>.json
//   runs/<run_id>/<attempt>/records.jsonl   (<canonical json>\t<crc32 hex>\n)
//   runs/<run_id>/<attempt>/index.json

inline constexpr std::uint64_t kIndexEvery = 1000;

/// CRC-32 (IEEE) of `data`, as used for the per-line checksum.
std::uint32_t crc32_of(std::string_view data);
/// `<line>\t<crc 8 lowercase hex>\n`.
std::string checksummed_line(std::string_view canonical_json);

struct CatalogEntry {
  std::string kind;
  std::string id;
  std::uint64_t revision = 0;
  Json body;
  std::string created;
  std::string updated;
  bool deleted = false;
};

void to_json(Json& j, const CatalogEntry& e);
void from_json(const Json& j, CatalogEntry& e);

/// Kinds accepted by the catalog.
const std::set<std::string>& catalog_kinds();
bool valid_id(std::string_view id);

/// Versioned key-value documents. Writes are atomic (tmp + rename) and
/// serialized per key; deletes leave tombstones so revisions are never reused.
class Catalog {
 public:
  explicit Catalog(std::filesystem::path data_root);

  /// Create or replace. With `expected_revision` the write only succeeds if the
  /// stored revision matches (0 = must not exist or be deleted); otherwise
  /// throws Error("RevisionConflict").
  CatalogEntry put(const std::string& kind, const std::string& id, const Json& body,
                   std::optional<std::uint64_t> expected_revision = std::nullopt);

  /// Throws Error("UnknownId") when absent or deleted (unless include_deleted).
  CatalogEntry get(const std::string& kind, const std::string& id, bool include_deleted = false) const;
  std::optional<CatalogEntry> find(const std::string& kind, const std::string& id, bool include_deleted = false) const;

  /// Live entries of `kind` whose id starts with `prefix`, ordered by id.
  std::vector<CatalogEntry> list(const std::string& kind, const std::string& prefix = "",
                                 bool include_deleted = false) const;

  /// Tombstone. Throws UnknownId if absent or already deleted.
  CatalogEntry remove(const std::string& kind, const std::string& id,
                      std::optional<std::uint64_t> expected_revision = std::nullopt);

 private:
  std::filesystem::path path_of(const std::string& kind, const std::string& id) const;
  std::mutex& key_mutex(const std::string& kind, const std::string& id);

  std::filesystem::path root_;
  std::mutex table_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> key_mutexes_;
};

struct IndexEntry {
  std::uint64_t step = 0;
  std::uint64_t offset = 0;
};

struct LogIndex {
  std::vector<IndexEntry> entries;
  std::int64_t last_step = -1;
  bool complete = false;
};

struct RecoveryReport {
  std::uint64_t good_lines = 0;
  std::uint64_t truncated_bytes = 0;
};

struct StoreOptions {
  bool fsync = true;
};

/// Append-only per-attempt record logs. One writer per log, any number of readers.
class RecordStore {
 public:
  explicit RecordStore(std::filesystem::path data_root, StoreOptions options = {});
  ~RecordStore();

  /// Idempotent append. Records whose key is not after the last persisted
  /// key are dropped as duplicates. Returns the highest persisted step, or -1.
  /// Throws OrderViolation (batch unsorted, or run_id mismatch), StorageFull,
  /// CorruptLog (the log is quarantined).
  std::int64_t append(const std::string& run_id, std::uint32_t attempt, std::span<const StepRecord> records);

  std::int64_t through_step(const std::string& run_id, std::uint32_t attempt);

  /// Flag the attempt as the completed one; replay reads default to it.
  void mark_complete(const std::string& run_id, std::uint32_t attempt);

  /// Attempts with a log, ascending. Empty if the run is unknown.
  std::vector<std::uint32_t> attempts(const std::string& run_id) const;
  /// Completed attempt if any, else the latest. Throws UnknownRun.
  std::uint32_t default_attempt(const std::string& run_id) const;

  /// Records with from_step <= step <= to_step, in log order, optionally
  /// limited to `tags`. Throws UnknownRun, CorruptLog.
  std::vector<StepRecord> read(const std::string& run_id, std::optional<std::uint32_t> attempt,
                               std::uint64_t from_step, std::uint64_t to_step,
                               const std::set<std::string>& tags = {}) const;

  LogIndex index(const std::string& run_id, std::uint32_t attempt) const;

  /// Close open writers; the next append re-runs recovery.
  void close_all();

  /// Scan a log, truncate a torn or corrupt final line, and rebuild its
  /// index. Throws CorruptLog for damage before the final line.
  static RecoveryReport recover(const std::filesystem::path& attempt_dir);

  std::filesystem::path attempt_dir(const std::string& run_id, std::uint32_t attempt) const;

 private:
  struct Writer;
  Writer& writer(const std::string& run_id, std::uint32_t attempt);

  std::filesystem::path root_;
  StoreOptions options_;
  std::mutex mutex_;
  std::map<std::pair<std::string, std::uint32_t>, std::unique_ptr<Writer>> writers_;
};

}  // namespace asa::store
