#pragma once

// Shared record types for every pipeline stage, their canonical JSON
// shapes, and the unit routing rules that decide which atomic units are
// judged against a counterfactual input versus a counterfactual output.

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cfsim {

using json = nlohmann::json;

enum class TaskKind { news_summarization, medical_suggestion };

enum class ExplanationMethod { chain_of_thought, post_hoc };

enum class UnitCategory { general, patient_information, suggestion };

// What an annotation judges a unit against.
enum class Target { counterfactual, counterfactual_output };

enum class AnnotatorKind { human, llm_judge };

enum class ParseErrorKind {
  missing_extraction,
  incorrect_extraction,
  missing_and_incorrect
};

NLOHMANN_JSON_SERIALIZE_ENUM(TaskKind,
                             {{TaskKind::news_summarization, "news_summarization"},
                              {TaskKind::medical_suggestion, "medical_suggestion"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ExplanationMethod,
                             {{ExplanationMethod::chain_of_thought, "chain_of_thought"},
                              {ExplanationMethod::post_hoc, "post_hoc"}})
NLOHMANN_JSON_SERIALIZE_ENUM(UnitCategory,
                             {{UnitCategory::general, "general"},
                              {UnitCategory::patient_information, "patient_information"},
                              {UnitCategory::suggestion, "suggestion"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Target,
                             {{Target::counterfactual, "counterfactual"},
                              {Target::counterfactual_output, "counterfactual_output"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AnnotatorKind,
                             {{AnnotatorKind::human, "human"},
                              {AnnotatorKind::llm_judge, "llm_judge"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ParseErrorKind,
                             {{ParseErrorKind::missing_extraction, "missing_extraction"},
                              {ParseErrorKind::incorrect_extraction, "incorrect_extraction"},
                              {ParseErrorKind::missing_and_incorrect, "missing_and_incorrect"}})

// Strict string conversions; the parse_* functions throw ValidationError on
// unknown names (the json macros above silently map unknowns to the first
// enumerator, so loaders go through these instead).
std::string to_string(TaskKind v);
std::string to_string(ExplanationMethod v);
std::string to_string(UnitCategory v);
std::string to_string(Target v);
std::string to_string(AnnotatorKind v);
std::string to_string(ParseErrorKind v);
TaskKind parse_task_kind(std::string_view s);
ExplanationMethod parse_explanation_method(std::string_view s);
UnitCategory parse_unit_category(std::string_view s);
Target parse_target(std::string_view s);
AnnotatorKind parse_annotator_kind(std::string_view s);
ParseErrorKind parse_error_kind(std::string_view s);

struct AnnotatorId {
  AnnotatorKind kind = AnnotatorKind::human;
  std::string name;

  // "human:alice" / "llm_judge:gpt-4-turbo"
  std::string str() const;
  // Accepts "kind:name"; a bare name is taken as a human annotator.
  static AnnotatorId parse(std::string_view s);

  auto operator<=>(const AnnotatorId&) const = default;
};

struct ExplanationRecord {
  std::string id;
  TaskKind task = TaskKind::news_summarization;
  ExplanationMethod method = ExplanationMethod::chain_of_thought;
  std::string input_text;
  std::string output_text;
  std::string explanation_text;
  std::string model_id;
  std::string created_at;  // informational, never part of identity

  bool operator==(const ExplanationRecord&) const = default;
};

struct AtomicUnit {
  std::string unit_id;
  std::string explanation_id;
  std::string text;
  UnitCategory category = UnitCategory::general;
  std::int64_t ordinal = 0;

  bool operator==(const AtomicUnit&) const = default;
};

struct Counterfactual {
  std::string cf_id;
  std::string explanation_id;
  std::string text;
  std::int64_t index = 0;

  bool operator==(const Counterfactual&) const = default;
};

struct CounterfactualOutput {
  std::string cf_id;
  std::string text;
  bool conditioned_on_explanation = false;

  bool operator==(const CounterfactualOutput&) const = default;
};

struct AnnotationKey {
  AnnotatorId annotator;
  std::string cf_id;
  std::string unit_id;
  Target target = Target::counterfactual;

  auto operator<=>(const AnnotationKey&) const = default;
};

struct UnitAnnotation {
  AnnotatorId annotator;
  std::string cf_id;
  std::string unit_id;
  Target target = Target::counterfactual;
  bool verdict = false;
  std::optional<std::string> note;

  AnnotationKey key() const { return {annotator, cf_id, unit_id, target}; }
  bool operator==(const UnitAnnotation&) const = default;
};

// parsed_ok unset marks a placeholder row emitted by the pipeline and not
// yet audited.
struct ParseAudit {
  std::string explanation_id;
  std::optional<bool> parsed_ok;
  std::optional<ParseErrorKind> error_kind;
  std::optional<std::string> note;

  bool pending() const { return !parsed_ok.has_value(); }
  bool operator==(const ParseAudit&) const = default;
};

// Every record of one run. `annotations` holds the effective verdict per
// AnnotationKey; superseded verdicts are kept in `annotation_history`.
struct RecordGraph {
  std::vector<ExplanationRecord> explanations;
  std::vector<AtomicUnit> units;
  std::vector<Counterfactual> counterfactuals;
  std::vector<CounterfactualOutput> outputs;
  std::vector<UnitAnnotation> annotations;
  std::vector<UnitAnnotation> annotation_history;
  std::vector<ParseAudit> audits;

  bool operator==(const RecordGraph&) const = default;
};

void to_json(json& j, const AnnotatorId& v);
void from_json(const json& j, AnnotatorId& v);
void to_json(json& j, const ExplanationRecord& v);
void from_json(const json& j, ExplanationRecord& v);
void to_json(json& j, const AtomicUnit& v);
void from_json(const json& j, AtomicUnit& v);
void to_json(json& j, const Counterfactual& v);
void from_json(const json& j, Counterfactual& v);
void to_json(json& j, const CounterfactualOutput& v);
void from_json(const json& j, CounterfactualOutput& v);
void to_json(json& j, const UnitAnnotation& v);
void from_json(const json& j, UnitAnnotation& v);
void to_json(json& j, const ParseAudit& v);
void from_json(const json& j, ParseAudit& v);
void to_json(json& j, const RecordGraph& v);
void from_json(const json& j, RecordGraph& v);

// Stable ids derived from parents, so replayed runs reproduce them.
std::string make_unit_id(std::string_view explanation_id, std::int64_t ordinal);
std::string make_cf_id(std::string_view explanation_id, std::int64_t index);

// Whether a unit of `category` is judged against `target` for `task`.
bool routes_to(TaskKind task, UnitCategory category, Target target);

// Category/task consistency of one unit.
bool category_allowed(TaskKind task, UnitCategory category);

// Units of one explanation that are judged against `target`, in ordinal
// order. Summarization units serve both targets; medical units split into
// patient information (counterfactual) and suggestions (output).
// Throws ValidationError naming the first unit whose category does not fit
// the task.
std::vector<AtomicUnit> relevant_units(TaskKind task,
                                       std::span<const AtomicUnit> units,
                                       Target target);

// Per-record invariant checks. Each returns human-readable violations.
std::vector<std::string> check_record(const ExplanationRecord& r);
std::vector<std::string> check_record(const AtomicUnit& r);
std::vector<std::string> check_record(const Counterfactual& r);
std::vector<std::string> check_record(const CounterfactualOutput& r);
std::vector<std::string> check_record(const UnitAnnotation& r);
std::vector<std::string> check_record(const ParseAudit& r);

struct ValidationContext {
  std::optional<int> counterfactuals_per_explanation;
  std::optional<bool> sanity_conditioned;
};

// Checks references, per-record invariants, routing, and that every
// precision verdict an annotator gave for a counterfactual is backed by
// that annotator's complete simulatability verdicts for it. Violations are
// returned sorted, so the result does not depend on insertion order.
std::vector<std::string> validate_record_graph(const RecordGraph& graph,
                                               const ValidationContext& ctx = {});

// ISO-8601 UTC timestamp for created_at/recorded_at fields.
std::string utc_now();

}  // namespace cfsim
