#include "cfsim/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <unordered_map>

#include "cfsim/errors.hpp"

namespace cfsim {

namespace fs = std::filesystem;

std::string file_name(RecordKind kind) {
  switch (kind) {
    case RecordKind::explanations: return "explanations.jsonl";
    case RecordKind::units: return "units.jsonl";
    case RecordKind::counterfactuals: return "counterfactuals.jsonl";
    case RecordKind::outputs: return "outputs.jsonl";
    case RecordKind::annotations: return "annotations.jsonl";
    case RecordKind::audits: return "audits.jsonl";
  }
  return "unknown.jsonl";
}

bool RunManifest::stage_done(const std::string& stage) const {
  return std::find(completed_stages.begin(), completed_stages.end(), stage) !=
         completed_stages.end();
}

json to_json_value(const RunManifest& m) {
  json counts = json::object();
  for (const auto& [stage, c] : m.stage_counts) {
    counts[stage] = json{{"succeeded", c.succeeded}, {"failed", c.failed}};
  }
  return json{{"run_id", m.run_id},
              {"schema_version", m.schema_version},
              {"config", to_json_value(m.config)},
              {"stage_counts", counts},
              {"completed_stages", m.completed_stages},
              {"events", m.events},
              {"template_versions", m.template_versions},
              {"started_at", m.started_at},
              {"finished_at", m.finished_at}};
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.schema_version = j.at("schema_version").get<int>();
  if (m.schema_version > kSchemaVersion) {
    throw VersionError("run " + m.run_id + " has schema_version " +
                       std::to_string(m.schema_version) + "; this build reads up to " +
                       std::to_string(kSchemaVersion));
  }
  m.config = run_config_from_json(j.at("config"));
  for (const auto& [stage, c] : j.at("stage_counts").items()) {
    m.stage_counts[stage] = {c.at("succeeded").get<std::size_t>(),
                             c.at("failed").get<std::size_t>()};
  }
  m.completed_stages = j.at("completed_stages").get<std::vector<std::string>>();
  m.events = j.value("events", std::vector<std::string>{});
  m.template_versions = j.value("template_versions", json::object());
  m.started_at = j.value("started_at", std::string{});
  m.finished_at = j.value("finished_at", std::string{});
  return m;
}

// ---- locking ----

WriterLock::WriterLock(const fs::path& lock_file) {
  fs::create_directories(lock_file.parent_path());
  fd_ = ::open(lock_file.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw StorageError("cannot open lock " + lock_file.string() + ": " + std::strerror(errno));
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw StorageError("run is locked by another writer: " + lock_file.string());
  }
}

WriterLock::~WriterLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

namespace {

std::mutex& file_mutex(const fs::path& p) {
  static std::mutex registry_mu;
  static std::unordered_map<std::string, std::unique_ptr<std::mutex>> registry;
  std::lock_guard lock(registry_mu);
  auto& m = registry[fs::absolute(p).lexically_normal().string()];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

void fsync_path(const fs::path& p, int flags) {
  int fd = ::open(p.c_str(), flags | O_CLOEXEC);
  if (fd < 0) return;
  ::fsync(fd);
  ::close(fd);
}

// Replaces `target` with `content` via a temp file in the same directory.
void atomic_write(const fs::path& target, const std::string& content) {
  static std::atomic<unsigned> counter{0};
  fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << content;
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw StorageError("cannot write " + tmp.string());
    }
  }
  fsync_path(tmp, O_RDONLY);
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw StorageError("cannot rename into " + target.string() + ": " + ec.message());
  }
  fsync_path(target.parent_path(), O_RDONLY | O_DIRECTORY);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
std::vector<T> read_jsonl(const fs::path& p) {
  std::vector<T> out;
  std::ifstream in(p, std::ios::binary);
  if (!in) return out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<T>());
    } catch (const std::exception& e) {
      throw LoadError(p.string(), lineno, e.what());
    }
  }
  return out;
}

std::string identity(const ExplanationRecord& r) { return r.id; }
std::string identity(const AtomicUnit& r) { return r.unit_id; }
std::string identity(const Counterfactual& r) { return r.cf_id; }
std::string identity(const CounterfactualOutput& r) { return r.cf_id; }
std::string identity(const UnitAnnotation& r) {
  return r.annotator.str() + "\x1f" + r.cf_id + "\x1f" + r.unit_id + "\x1f" + to_string(r.target);
}
std::string identity(const ParseAudit& r) { return r.explanation_id; }

// Records whose later versions supersede earlier ones instead of being
// rejected as duplicates.
template <typename T>
constexpr bool kVersioned = std::is_same_v<T, UnitAnnotation> || std::is_same_v<T, ParseAudit>;

}  // namespace

RunStore::RunStore(fs::path root, std::string run_id)
    : root_(std::move(root)), run_id_(std::move(run_id)) {
  if (run_id_.empty() || run_id_.find('/') != std::string::npos || run_id_ == "." ||
      run_id_ == "..") {
    throw ValidationError("invalid run id '" + run_id_ + "'");
  }
}

bool RunStore::exists() const { return fs::is_directory(dir()); }

WriterLock RunStore::lock_writer() const { return WriterLock(dir() / ".lock"); }

template <typename T>
std::size_t RunStore::append_impl(RecordKind kind, std::span<const T> records) {
  std::vector<std::string> violations;
  for (const auto& r : records) {
    for (auto& v : check_record(r)) violations.push_back(std::move(v));
  }
  if (!violations.empty()) {
    std::string msg = "rejected " + file_name(kind) + " batch:";
    for (const auto& v : violations) msg += "\n  " + v;
    throw ValidationError(msg, violations);
  }
  if (records.empty()) return 0;

  const fs::path path = file(kind);
  std::lock_guard lock(file_mutex(path));
  std::string content = read_file(path);

  std::unordered_map<std::string, json> current;
  for (const auto& r : read_jsonl<T>(path)) current[identity(r)] = json(r);

  std::string added;
  std::size_t written = 0;
  for (const auto& r : records) {
    json j = r;
    auto id = identity(r);
    auto it = current.find(id);
    if (it != current.end()) {
      if (!kVersioned<T> || it->second == j) continue;
    }
    current[id] = j;
    added += j.dump() + "\n";
    ++written;
  }
  if (written == 0) return 0;
  if (!content.empty() && content.back() != '\n') content.push_back('\n');
  atomic_write(path, content + added);
  return written;
}

std::size_t RunStore::append(std::span<const ExplanationRecord> r) {
  return append_impl(RecordKind::explanations, r);
}
std::size_t RunStore::append(std::span<const AtomicUnit> r) {
  return append_impl(RecordKind::units, r);
}
std::size_t RunStore::append(std::span<const Counterfactual> r) {
  return append_impl(RecordKind::counterfactuals, r);
}
std::size_t RunStore::append(std::span<const CounterfactualOutput> r) {
  return append_impl(RecordKind::outputs, r);
}
std::size_t RunStore::append(std::span<const UnitAnnotation> r) {
  return append_impl(RecordKind::annotations, r);
}
std::size_t RunStore::append(std::span<const ParseAudit> r) {
  return append_impl(RecordKind::audits, r);
}

void RunStore::write_manifest(const RunManifest& m) {
  std::lock_guard lock(file_mutex(dir() / "manifest.json"));
  atomic_write(dir() / "manifest.json", to_json_value(m).dump(2) + "\n");
}

std::optional<RunManifest> RunStore::read_manifest() const {
  const fs::path p = dir() / "manifest.json";
  if (!fs::exists(p)) return std::nullopt;
  json j;
  try {
    j = json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw LoadError(p.string(), 1, e.what());
  }
  // Check the version before anything else so newer layouts fail clearly.
  if (j.is_object() && j.contains("schema_version") && j["schema_version"].is_number_integer() &&
      j["schema_version"].get<int>() > kSchemaVersion) {
    throw VersionError("run " + run_id_ + " has schema_version " +
                       std::to_string(j["schema_version"].get<int>()) +
                       "; this build reads up to " + std::to_string(kSchemaVersion));
  }
  try {
    return manifest_from_json(j);
  } catch (const VersionError&) {
    throw;
  } catch (const std::exception& e) {
    throw LoadError(p.string(), 1, e.what());
  }
}

LoadedRun RunStore::load(bool strict) const {
  if (!exists()) throw NotFoundError("unknown run " + run_id_);
  LoadedRun run;
  run.manifest = read_manifest();
  auto& g = run.graph;
  g.explanations = read_jsonl<ExplanationRecord>(file(RecordKind::explanations));
  g.units = read_jsonl<AtomicUnit>(file(RecordKind::units));
  g.counterfactuals = read_jsonl<Counterfactual>(file(RecordKind::counterfactuals));
  g.outputs = read_jsonl<CounterfactualOutput>(file(RecordKind::outputs));
  g.audits = read_jsonl<ParseAudit>(file(RecordKind::audits));

  // Latest verdict per key wins, at the position the key first appeared.
  auto raw = read_jsonl<UnitAnnotation>(file(RecordKind::annotations));
  std::map<AnnotationKey, std::size_t> slot;
  for (auto& a : raw) {
    auto [it, fresh] = slot.emplace(a.key(), g.annotations.size());
    if (fresh) {
      g.annotations.push_back(std::move(a));
    } else {
      g.annotation_history.push_back(std::move(g.annotations[it->second]));
      g.annotations[it->second] = std::move(a);
    }
  }

  ValidationContext ctx;
  if (run.manifest) {
    ctx.counterfactuals_per_explanation = run.manifest->config.counterfactuals_per_explanation;
    ctx.sanity_conditioned = run.manifest->config.sanity_conditioned;
  }
  run.violations = validate_record_graph(g, ctx);
  if (strict && !run.violations.empty()) {
    std::string msg = "run " + run_id_ + " fails validation:";
    for (const auto& v : run.violations) msg += "\n  " + v;
    throw ValidationError(msg, run.violations);
  }
  return run;
}

LoadedRun load_run(const fs::path& root, const std::string& run_id, bool strict) {
  return RunStore(root, run_id).load(strict);
}

}  // namespace cfsim
