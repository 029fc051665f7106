#include "asa/datastore.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <thread>

namespace asa::store {

namespace fs = std::filesystem;

namespace {

std::string now_iso() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const auto t = system_clock::to_time_t(now);
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::system_error(errno, std::generic_category());
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Write-then-rename so readers never observe a half-written file.
void atomic_write(const fs::path& path, const std::string& content, bool sync) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid()) + "." +
                       std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error("IoError", "cannot write " + tmp.string() + ": " + std::strerror(errno));
  try {
    write_all(fd, content);
    if (sync) ::fdatasync(fd);
  } catch (const std::system_error& e) {
    ::close(fd);
    fs::remove(tmp);
    throw Error(e.code().value() == ENOSPC ? "StorageFull" : "IoError", tmp.string() + ": " + e.what());
  }
  ::close(fd);
  fs::rename(tmp, path);
}

std::string hex8(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

/// Parse one log line (without '\n'); nullopt when the checksum fails.
std::optional<StepRecord> parse_line(std::string_view line) {
  const auto tab = line.rfind('\t');
  if (tab == std::string_view::npos || line.size() - tab - 1 != 8) return std::nullopt;
  const auto body = line.substr(0, tab);
  if (hex8(crc32_of(body)) != line.substr(tab + 1)) return std::nullopt;
  try {
    return Json::parse(body).get<StepRecord>();
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

Json index_to_json(const LogIndex& idx) {
  Json entries = Json::array();
  for (const auto& e : idx.entries) entries.push_back({{"step", e.step}, {"offset", e.offset}});
  return {{"every", kIndexEvery}, {"entries", entries}, {"last_step", idx.last_step}, {"complete", idx.complete}};
}

LogIndex index_from_json(const Json& j) {
  LogIndex idx;
  for (const auto& e : j.at("entries")) idx.entries.push_back({e.at("step").get<std::uint64_t>(), e.at("offset").get<std::uint64_t>()});
  idx.last_step = j.at("last_step").get<std::int64_t>();
  idx.complete = j.at("complete").get<bool>();
  return idx;
}

void maybe_index(LogIndex& idx, std::uint64_t step, std::uint64_t offset) {
  const std::uint64_t next = idx.entries.empty() ? 0 : (idx.entries.back().step / kIndexEvery + 1) * kIndexEvery;
  if (idx.entries.empty() || step >= next) idx.entries.push_back({step, offset});
}

struct ScanResult {
  LogIndex index;
  std::optional<RecordKey> last_key;
  std::uint64_t good_size = 0;
  std::uint64_t good_lines = 0;
};

[[noreturn]] void quarantine(const fs::path& log, const std::string& why) {
  const fs::path q = log.string() + ".quarantined";
  std::error_code ec;
  fs::rename(log, q, ec);
  throw Error("CorruptLog", log.string() + ": " + why + (ec ? "" : " (moved to " + q.filename().string() + ")"));
}

ScanResult scan(const fs::path& log) {
  ScanResult r;
  const auto size = fs::file_size(log);
  std::ifstream in(log, std::ios::binary);
  std::string line;
  std::uint64_t pos = 0;
  while (std::getline(in, line)) {
    if (in.eof()) break;  // torn final line
    const std::uint64_t next = pos + line.size() + 1;
    const auto rec = parse_line(line);
    if (!rec) {
      if (next == size) break;  // bad final line: treat as torn
      quarantine(log, "checksum mismatch at byte " + std::to_string(pos));
    }
    auto key = key_of(*rec);
    if (r.last_key && !(*r.last_key < key)) quarantine(log, "order violation at byte " + std::to_string(pos));
    maybe_index(r.index, rec->step, pos);
    r.index.last_step = static_cast<std::int64_t>(rec->step);
    r.last_key = std::move(key);
    ++r.good_lines;
    pos = next;
  }
  r.good_size = pos;
  return r;
}

}  // namespace

std::uint32_t crc32_of(std::string_view data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size()));
  return static_cast<std::uint32_t>(crc);
}

std::string checksummed_line(std::string_view canonical_json) {
  std::string out(canonical_json);
  out += '\t';
  out += hex8(crc32_of(canonical_json));
  out += '\n';
  return out;
}

// --- catalog ---------------------------------------------------------------------

void to_json(Json& j, const CatalogEntry& e) {
  j = Json{{"kind", e.kind},       {"id", e.id},           {"revision", e.revision}, {"body", e.body},
           {"created", e.created}, {"updated", e.updated}, {"deleted", e.deleted}};
}

void from_json(const Json& j, CatalogEntry& e) {
  JsonReader in(j, "catalog entry");
  e.kind = in.string("kind");
  e.id = in.string("id");
  e.revision = in.u64("revision");
  e.body = in.required("body");
  e.created = in.string("created");
  e.updated = in.string("updated");
  e.deleted = in.boolean("deleted");
  in.finish();
}

const std::set<std::string>& catalog_kinds() {
  static const std::set<std::string> kinds{"scenario", "template", "batch", "run", "analysis"};
  return kinds;
}

bool valid_id(std::string_view id) {
  if (id.empty() || id.size() > 128 || id.front() == '.') return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

Catalog::Catalog(fs::path data_root) : root_(std::move(data_root) / "catalog") {
  for (const auto& k : catalog_kinds()) fs::create_directories(root_ / k);
}

fs::path Catalog::path_of(const std::string& kind, const std::string& id) const {
  if (!catalog_kinds().count(kind)) throw Error("UnknownKind", "unknown catalog kind '" + kind + "'");
  if (!valid_id(id)) throw Error("BadId", "invalid id '" + id + "'");
  return root_ / kind / (id + ".json");
}

std::mutex& Catalog::key_mutex(const std::string& kind, const std::string& id) {
  std::lock_guard lock(table_mutex_);
  auto& m = key_mutexes_[kind + "/" + id];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

std::optional<CatalogEntry> Catalog::find(const std::string& kind, const std::string& id, bool include_deleted) const {
  const fs::path p = path_of(kind, id);
  std::ifstream in(p);
  if (!in) return std::nullopt;
  CatalogEntry e = Json::parse(in).get<CatalogEntry>();
  if (e.deleted && !include_deleted) return std::nullopt;
  return e;
}

CatalogEntry Catalog::get(const std::string& kind, const std::string& id, bool include_deleted) const {
  auto e = find(kind, id, include_deleted);
  if (!e) throw Error("UnknownId", kind + " '" + id + "' not found");
  return *e;
}

CatalogEntry Catalog::put(const std::string& kind, const std::string& id, const Json& body,
                          std::optional<std::uint64_t> expected_revision) {
  const fs::path p = path_of(kind, id);
  std::lock_guard lock(key_mutex(kind, id));
  const auto current = find(kind, id, true);
  const bool live = current && !current->deleted;
  if (expected_revision && *expected_revision != (live ? current->revision : 0)) {
    throw Error("RevisionConflict", kind + " '" + id + "' is at revision " +
                                        std::to_string(live ? current->revision : 0) + ", expected " +
                                        std::to_string(*expected_revision));
  }
  CatalogEntry e;
  e.kind = kind;
  e.id = id;
  e.revision = (current ? current->revision : 0) + 1;
  e.body = body;
  e.updated = now_iso();
  e.created = live ? current->created : e.updated;
  atomic_write(p, canonical(Json(e)), true);
  return e;
}

CatalogEntry Catalog::remove(const std::string& kind, const std::string& id,
                             std::optional<std::uint64_t> expected_revision) {
  const fs::path p = path_of(kind, id);
  std::lock_guard lock(key_mutex(kind, id));
  auto current = find(kind, id, false);
  if (!current) throw Error("UnknownId", kind + " '" + id + "' not found");
  if (expected_revision && *expected_revision != current->revision) {
    throw Error("RevisionConflict", kind + " '" + id + "' is at revision " + std::to_string(current->revision));
  }
  current->deleted = true;
  current->revision += 1;
  current->updated = now_iso();
  atomic_write(p, canonical(Json(*current)), true);
  return *current;
}

std::vector<CatalogEntry> Catalog::list(const std::string& kind, const std::string& prefix,
                                        bool include_deleted) const {
  if (!catalog_kinds().count(kind)) throw Error("UnknownKind", "unknown catalog kind '" + kind + "'");
  std::vector<std::string> ids;
  for (const auto& f : fs::directory_iterator(root_ / kind)) {
    if (f.path().extension() != ".json") continue;
    const std::string id = f.path().stem().string();
    if (id.rfind(prefix, 0) == 0) ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());
  std::vector<CatalogEntry> out;
  for (const auto& id : ids) {
    if (auto e = find(kind, id, include_deleted)) out.push_back(std::move(*e));
  }
  return out;
}

// --- record logs -----------------------------------------------------------------

struct RecordStore::Writer {
  std::mutex mutex;
  int fd = -1;
  std::uint64_t size = 0;
  std::optional<RecordKey> last_key;
  LogIndex index;
  fs::path dir;

  ~Writer() {
    if (fd >= 0) ::close(fd);
  }
};

RecordStore::RecordStore(fs::path data_root, StoreOptions options)
    : root_(std::move(data_root) / "runs"), options_(options) {
  fs::create_directories(root_);
}

RecordStore::~RecordStore() = default;

fs::path RecordStore::attempt_dir(const std::string& run_id, std::uint32_t attempt) const {
  if (!valid_id(run_id)) throw Error("BadId", "invalid run id '" + run_id + "'");
  return root_ / run_id / std::to_string(attempt);
}

namespace {

// Truncates a torn tail, rewrites index.json, and returns the scan.
ScanResult recover_scan(const fs::path& dir, RecoveryReport& report) {
  const fs::path log = dir / "records.jsonl";
  ScanResult s;
  if (!fs::exists(log)) return s;
  const auto size = fs::file_size(log);
  s = scan(log);
  if (s.good_size < size) {
    fs::resize_file(log, s.good_size);
    report.truncated_bytes = size - s.good_size;
  }
  report.good_lines = s.good_lines;
  std::ifstream in(dir / "index.json");
  if (in) {
    try {
      s.index.complete = index_from_json(Json::parse(in)).complete;
    } catch (const std::exception&) {
    }
  }
  atomic_write(dir / "index.json", canonical(index_to_json(s.index)), false);
  return s;
}

}  // namespace

RecoveryReport RecordStore::recover(const fs::path& dir) {
  RecoveryReport report;
  recover_scan(dir, report);
  return report;
}

RecordStore::Writer& RecordStore::writer(const std::string& run_id, std::uint32_t attempt) {
  std::lock_guard lock(mutex_);
  auto& slot = writers_[{run_id, attempt}];
  if (slot) return *slot;
  auto w = std::make_unique<Writer>();
  w->dir = attempt_dir(run_id, attempt);
  fs::create_directories(w->dir);
  const fs::path log = w->dir / "records.jsonl";
  RecoveryReport report;
  ScanResult s = recover_scan(w->dir, report);
  w->index = s.index;
  w->last_key = s.last_key;
  w->size = s.good_size;
  w->fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (w->fd < 0) throw Error("IoError", "cannot open " + log.string() + ": " + std::strerror(errno));
  slot = std::move(w);
  return *slot;
}

std::int64_t RecordStore::append(const std::string& run_id, std::uint32_t attempt,
                                 std::span<const StepRecord> records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].run_id != run_id) {
      throw Error("OrderViolation", "record for run '" + records[i].run_id + "' in batch for '" + run_id + "'");
    }
    if (i > 0 && !(key_of(records[i - 1]) < key_of(records[i]))) {
      throw Error("OrderViolation", "batch not strictly ordered at position " + std::to_string(i));
    }
  }
  Writer& w = writer(run_id, attempt);
  std::lock_guard lock(w.mutex);
  std::string buffer;
  LogIndex index = w.index;
  std::optional<RecordKey> last = w.last_key;
  for (const auto& r : records) {
    auto key = key_of(r);
    if (last && !(*last < key)) continue;  // already persisted
    maybe_index(index, r.step, w.size + buffer.size());
    index.last_step = static_cast<std::int64_t>(r.step);
    buffer += checksummed_line(to_canonical_line(r));
    last = std::move(key);
  }
  if (buffer.empty()) return w.index.last_step;
  try {
    write_all(w.fd, buffer);
    if (options_.fsync) ::fdatasync(w.fd);
  } catch (const std::system_error& e) {
    if (::ftruncate(w.fd, static_cast<off_t>(w.size)) != 0) {
      // leave the torn tail for recovery
    }
    throw Error(e.code().value() == ENOSPC ? "StorageFull" : "IoError", e.what());
  }
  w.size += buffer.size();
  w.index = std::move(index);
  w.last_key = std::move(last);
  atomic_write(w.dir / "index.json", canonical(index_to_json(w.index)), false);
  return w.index.last_step;
}

std::int64_t RecordStore::through_step(const std::string& run_id, std::uint32_t attempt) {
  Writer& w = writer(run_id, attempt);
  std::lock_guard lock(w.mutex);
  return w.index.last_step;
}

void RecordStore::mark_complete(const std::string& run_id, std::uint32_t attempt) {
  Writer& w = writer(run_id, attempt);
  std::lock_guard lock(w.mutex);
  w.index.complete = true;
  atomic_write(w.dir / "index.json", canonical(index_to_json(w.index)), true);
}

void RecordStore::close_all() {
  std::lock_guard lock(mutex_);
  writers_.clear();
}

std::vector<std::uint32_t> RecordStore::attempts(const std::string& run_id) const {
  std::vector<std::uint32_t> out;
  if (!valid_id(run_id)) return out;
  std::error_code ec;
  for (const auto& d : fs::directory_iterator(root_ / run_id, ec)) {
    const std::string name = d.path().filename().string();
    if (!name.empty() && std::all_of(name.begin(), name.end(), ::isdigit) && fs::exists(d.path() / "records.jsonl")) {
      out.push_back(static_cast<std::uint32_t>(std::stoul(name)));
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

LogIndex RecordStore::index(const std::string& run_id, std::uint32_t attempt) const {
  std::ifstream in(attempt_dir(run_id, attempt) / "index.json");
  if (!in) return {};
  try {
    return index_from_json(Json::parse(in));
  } catch (const std::exception&) {
    return {};
  }
}

std::uint32_t RecordStore::default_attempt(const std::string& run_id) const {
  const auto all = attempts(run_id);
  if (all.empty()) throw Error("UnknownRun", "no records for run '" + run_id + "'");
  for (auto it = all.rbegin(); it != all.rend(); ++it) {
    if (index(run_id, *it).complete) return *it;
  }
  return all.back();
}

std::vector<StepRecord> RecordStore::read(const std::string& run_id, std::optional<std::uint32_t> attempt,
                                          std::uint64_t from_step, std::uint64_t to_step,
                                          const std::set<std::string>& tags) const {
  const std::uint32_t a = attempt ? *attempt : default_attempt(run_id);
  const fs::path log = attempt_dir(run_id, a) / "records.jsonl";
  std::ifstream in(log, std::ios::binary);
  if (!in) throw Error("UnknownRun", "no attempt " + std::to_string(a) + " for run '" + run_id + "'");
  std::vector<StepRecord> out;
  if (from_step > to_step) return out;
  std::uint64_t offset = 0;
  for (const auto& e : index(run_id, a).entries) {
    if (e.step <= from_step) offset = e.offset;
  }
  in.seekg(static_cast<std::streamoff>(offset));
  std::string line;
  while (std::getline(in, line)) {
    if (in.eof()) break;  // no trailing newline: an append in progress
    auto rec = parse_line(line);
    if (!rec) throw Error("CorruptLog", log.string() + ": checksum mismatch near byte " + std::to_string(offset));
    offset += line.size() + 1;
    if (rec->step > to_step) break;
    if (rec->step < from_step) continue;
    if (!tags.empty() && !tags.count(rec->tag)) continue;
    out.push_back(std::move(*rec));
  }
  return out;
}

}  // namespace asa::store
