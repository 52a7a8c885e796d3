#pragma once

// HTTP service for human annotators. Endpoints (JSON):
//
//   GET  /runs/{id}/tasks?annotator=&status=open|done
//   POST /runs/{id}/annotations   {annotator, cf_id, unit_id, target, verdict, note?}
//   POST /runs/{id}/parse-audits  {explanation_id, parsed_ok, error_kind?, note?}
//   GET  /runs/{id}/explanations  explanations with their units and latest audit
//   GET  /runs/{id}/progress
//   GET  /roster, POST /session   {annotator} -> {token}
//
// The built UI, when configured, is served from "/".

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "cfsim/model.hpp"

namespace httplib {
class Server;
}

namespace cfsim {

enum class TaskStatus { open, done };

std::string to_string(TaskStatus s);
TaskStatus parse_task_status(std::string_view s);

struct TaskContext {
  std::string explanation_text;
  std::string unit_text;
  std::string counterfactual_text;
  std::optional<std::string> counterfactual_output_text;  // output target only
};

struct AnnotationTask {
  std::string task_id;  // "<cf_id>|<unit_id>|<target>"
  std::string explanation_id;
  std::string cf_id;
  std::string unit_id;
  Target target = Target::counterfactual;
  TaskContext context;
  TaskStatus status = TaskStatus::open;
  std::optional<bool> verdict;  // the annotator's current verdict when done
};

json to_json_value(const AnnotationTask& t);

// Tasks in explanation order, then counterfactual index, then the
// simulatability units followed by the output units, each by ordinal.
// Output-target tasks exist only for counterfactuals that have an output.
// Without an annotator every task is open.
std::vector<AnnotationTask> derive_tasks(const RecordGraph& graph,
                                         const std::optional<AnnotatorId>& annotator);

struct ProgressCount {
  std::size_t done = 0;
  std::size_t open = 0;
  bool operator==(const ProgressCount&) const = default;
};

struct AnnotatorProgress {
  AnnotatorId annotator;
  ProgressCount counterfactual;
  ProgressCount counterfactual_output;
  ProgressCount total() const {
    return {counterfactual.done + counterfactual_output.done,
            counterfactual.open + counterfactual_output.open};
  }
};

// One row per annotator that has annotated the run, plus `extra`
// (e.g. the roster), sorted by annotator id.
std::vector<AnnotatorProgress> compute_progress(const RecordGraph& graph,
                                                const std::vector<AnnotatorId>& extra = {});

struct ServiceOptions {
  std::filesystem::path store_root;
  std::optional<std::filesystem::path> ui_dir;
  // When non-empty, writes need a session token for one of these names.
  std::vector<std::string> roster;
  std::string session_secret;
  std::string cors_origin = "*";
};

class AnnotationService {
 public:
  explicit AnnotationService(ServiceOptions opts);

  void install(httplib::Server& server);

  std::string issue_token(const std::string& annotator) const;
  // Annotator name for a valid token.
  std::optional<std::string> verify_token(std::string_view token) const;

  // `session` is the token-holder's name when a roster is configured.
  UnitAnnotation submit_annotation(const std::string& run_id, const json& body,
                                   const std::optional<std::string>& session);
  ParseAudit submit_audit(const std::string& run_id, const json& body,
                          const std::optional<std::string>& session);

 private:
  RecordGraph snapshot(const std::string& run_id) const;

  ServiceOptions opts_;
  std::mutex write_mu_;
};

}  // namespace cfsim
