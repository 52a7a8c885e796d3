#pragma once

// Append-only JSON-lines persistence of one run:
//
//   <root>/<run_id>/manifest.json
//                   explanations.jsonl units.jsonl counterfactuals.jsonl
//                   outputs.jsonl annotations.jsonl audits.jsonl
//                   transcript.jsonl
//
// Each append rewrites the file through a temp file and rename, so a batch
// lands completely or not at all.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfsim/config.hpp"
#include "cfsim/model.hpp"

namespace cfsim {

inline constexpr int kSchemaVersion = 1;

enum class RecordKind { explanations, units, counterfactuals, outputs, annotations, audits };

std::string file_name(RecordKind kind);

struct StageCount {
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  bool operator==(const StageCount&) const = default;
};

struct RunManifest {
  std::string run_id;
  int schema_version = kSchemaVersion;
  RunConfig config;
  std::map<std::string, StageCount> stage_counts;
  std::vector<std::string> completed_stages;
  std::vector<std::string> events;  // failures and shortfalls, in order
  json template_versions = json::object();
  std::string started_at;
  std::string finished_at;

  bool stage_done(const std::string& stage) const;
  bool operator==(const RunManifest&) const = default;
};

json to_json_value(const RunManifest& m);
RunManifest manifest_from_json(const json& j);

struct LoadedRun {
  std::optional<RunManifest> manifest;
  RecordGraph graph;
  std::vector<std::string> violations;
};

// Exclusive advisory lock on <run dir>/.lock for the lifetime of the object.
class WriterLock {
 public:
  explicit WriterLock(const std::filesystem::path& lock_file);
  ~WriterLock();
  WriterLock(const WriterLock&) = delete;
  WriterLock& operator=(const WriterLock&) = delete;

 private:
  int fd_ = -1;
};

class RunStore {
 public:
  RunStore(std::filesystem::path root, std::string run_id);

  const std::string& run_id() const { return run_id_; }
  std::filesystem::path dir() const { return root_ / run_id_; }
  std::filesystem::path transcript_path() const { return dir() / "transcript.jsonl"; }
  bool exists() const;

  // Throws StorageError when another writer holds the run.
  WriterLock lock_writer() const;

  // Validates every record first; any violation rejects the whole batch
  // with a ValidationError listing them. Records whose identity is already
  // stored are skipped, as are annotations/audits identical to the current
  // value. Returns the number of lines written.
  std::size_t append(std::span<const ExplanationRecord> records);
  std::size_t append(std::span<const AtomicUnit> records);
  std::size_t append(std::span<const Counterfactual> records);
  std::size_t append(std::span<const CounterfactualOutput> records);
  std::size_t append(std::span<const UnitAnnotation> records);
  std::size_t append(std::span<const ParseAudit> records);

  void write_manifest(const RunManifest& m);
  std::optional<RunManifest> read_manifest() const;

  // Throws NotFoundError for a missing run directory, VersionError for a
  // newer schema and LoadError for a corrupt line. With `strict`, graph
  // violations raise ValidationError; otherwise they are returned.
  LoadedRun load(bool strict = true) const;

 private:
  std::filesystem::path file(RecordKind kind) const { return dir() / file_name(kind); }
  template <typename T>
  std::size_t append_impl(RecordKind kind, std::span<const T> records);

  std::filesystem::path root_;
  std::string run_id_;
};

LoadedRun load_run(const std::filesystem::path& root, const std::string& run_id,
                   bool strict = true);

}  // namespace cfsim
