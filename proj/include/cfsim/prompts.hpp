#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfsim/gateway.hpp"
#include "cfsim/model.hpp"

namespace cfsim {

enum class Stage {
  explain_cot,
  explain_posthoc,
  gen_counterfactual,
  parse_explanation,
  gen_cf_output,
  judge_simulatability,
  judge_precision
};

std::string to_string(Stage s);
Stage parse_stage(std::string_view s);

Stage explain_stage(ExplanationMethod method);

// Generation stages sample at 0.7; parsing and judging run at 0.
double default_temperature(Stage s);

using Bindings = std::map<std::string, std::string, std::less<>>;

// A versioned prompt. The body may be split into messages with lines that
// read exactly "### system" / "### user"; without them the whole body is a
// single user message. Placeholders are written {{name}}.
struct PromptTemplate {
  Stage stage = Stage::explain_cot;
  TaskKind task = TaskKind::news_summarization;
  std::string version;
  std::string body;

  // Distinct placeholder names in order of first appearance.
  std::vector<std::string> placeholders() const;
};

// Template file format: "key: value" header lines (stage, task, version),
// a line "---", then the body.
PromptTemplate parse_template(std::string_view file_text);
PromptTemplate load_template(const std::filesystem::path& path);

class TemplateCatalog {
 public:
  // Loads every *.tmpl file under `dir`. Duplicate (stage, task) pairs are
  // a ConfigError.
  static TemplateCatalog load_dir(const std::filesystem::path& dir);

  void add(PromptTemplate t);
  const PromptTemplate& get(Stage stage, TaskKind task) const;
  bool has(Stage stage, TaskKind task) const;
  // {"<task>/<stage>": version}
  json versions() const;

 private:
  std::map<std::pair<Stage, TaskKind>, PromptTemplate> templates_;
};

// Substitutes every placeholder in one pass; substituted text is never
// re-expanded. Throws RenderError naming the first unbound placeholder.
// model_id is left empty for the caller; request_tag is the stage name.
ChatRequest render(const PromptTemplate& tmpl, const Bindings& bindings);

struct ExplainedOutput {
  std::string output_text;
  std::string explanation_text;
  bool operator==(const ExplainedOutput&) const = default;
};

// Splits a response into its OUTPUT and EXPLANATION sections. A section
// starts at a line holding only its label, optionally decorated as
// "=== OUTPUT ===", "### OUTPUT", "[OUTPUT]", "**OUTPUT**" or "OUTPUT:".
// Either order is accepted for both methods.
ExplainedOutput parse_explanation_response(std::string_view stage_output,
                                           ExplanationMethod method);

struct CounterfactualList {
  std::vector<std::string> texts;
  bool shortfall = false;  // fewer than expected
};

// Numbered items ("1.", "2)", "Counterfactual 3:") delimit counterfactuals;
// lines up to the next item belong to the current one. Bullets are used
// only when no numbered item exists. Items beyond expected_k are dropped.
CounterfactualList parse_counterfactual_list(std::string_view stage_output, int expected_k);

struct UnitList {
  std::vector<AtomicUnit> units;
  std::vector<std::string> skipped;  // reasons for dropped lines
};

// One unit per bullet. Medical bullets take the category of the nearest
// preceding group header ("Patient Information" / "Suggested Actions").
UnitList parse_unit_list(std::string_view stage_output, TaskKind task,
                         std::string_view explanation_id = {});

// Canonical bullet rendering of units, the inverse of parse_unit_list.
std::string format_unit_list(std::span<const AtomicUnit> units, TaskKind task);

// Leading yes/no token, case-insensitive ("Y"/"N" accepted, as are
// "Verdict:"/"Answer:" prefixes). Throws VerdictParseError otherwise.
bool parse_judge_verdict(std::string_view stage_output);

}  // namespace cfsim
