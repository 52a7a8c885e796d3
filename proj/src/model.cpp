#include "cfsim/model.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <map>
#include <set>
#include <unordered_map>

#include "cfsim/errors.hpp"

namespace cfsim {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<E, const char*> (&table)[N],
             const char* what) {
  for (const auto& [value, name] : table) {
    if (s == name) return value;
  }
  throw ValidationError("unknown " + std::string(what) + " '" + std::string(s) + "'");
}

template <typename E, std::size_t N>
std::string enum_name(E v, const std::pair<E, const char*> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (value == v) return name;
  }
  return "?";
}

constexpr std::pair<TaskKind, const char*> kTaskKinds[] = {
    {TaskKind::news_summarization, "news_summarization"},
    {TaskKind::medical_suggestion, "medical_suggestion"}};
constexpr std::pair<ExplanationMethod, const char*> kMethods[] = {
    {ExplanationMethod::chain_of_thought, "chain_of_thought"},
    {ExplanationMethod::post_hoc, "post_hoc"}};
constexpr std::pair<UnitCategory, const char*> kCategories[] = {
    {UnitCategory::general, "general"},
    {UnitCategory::patient_information, "patient_information"},
    {UnitCategory::suggestion, "suggestion"}};
constexpr std::pair<Target, const char*> kTargets[] = {
    {Target::counterfactual, "counterfactual"},
    {Target::counterfactual_output, "counterfactual_output"}};
constexpr std::pair<AnnotatorKind, const char*> kAnnotatorKinds[] = {
    {AnnotatorKind::human, "human"}, {AnnotatorKind::llm_judge, "llm_judge"}};
constexpr std::pair<ParseErrorKind, const char*> kErrorKinds[] = {
    {ParseErrorKind::missing_extraction, "missing_extraction"},
    {ParseErrorKind::incorrect_extraction, "incorrect_extraction"},
    {ParseErrorKind::missing_and_incorrect, "missing_and_incorrect"}};

template <typename T>
std::optional<T> opt_field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<T>();
}

template <typename T>
void put_opt(json& j, const char* key, const std::optional<T>& v) {
  if (v) {
    j[key] = *v;
  } else {
    j[key] = nullptr;
  }
}

}  // namespace

std::string to_string(TaskKind v) { return enum_name(v, kTaskKinds); }
std::string to_string(ExplanationMethod v) { return enum_name(v, kMethods); }
std::string to_string(UnitCategory v) { return enum_name(v, kCategories); }
std::string to_string(Target v) { return enum_name(v, kTargets); }
std::string to_string(AnnotatorKind v) { return enum_name(v, kAnnotatorKinds); }
std::string to_string(ParseErrorKind v) { return enum_name(v, kErrorKinds); }

TaskKind parse_task_kind(std::string_view s) { return parse_enum(s, kTaskKinds, "task"); }
ExplanationMethod parse_explanation_method(std::string_view s) {
  return parse_enum(s, kMethods, "explanation method");
}
UnitCategory parse_unit_category(std::string_view s) {
  return parse_enum(s, kCategories, "unit category");
}
Target parse_target(std::string_view s) { return parse_enum(s, kTargets, "target"); }
AnnotatorKind parse_annotator_kind(std::string_view s) {
  return parse_enum(s, kAnnotatorKinds, "annotator kind");
}
ParseErrorKind parse_error_kind(std::string_view s) {
  return parse_enum(s, kErrorKinds, "error kind");
}

std::string AnnotatorId::str() const { return to_string(kind) + ":" + name; }

AnnotatorId AnnotatorId::parse(std::string_view s) {
  AnnotatorId id;
  auto colon = s.find(':');
  if (colon == std::string_view::npos) {
    id.kind = AnnotatorKind::human;
    id.name = std::string(s);
  } else {
    id.kind = parse_annotator_kind(s.substr(0, colon));
    id.name = std::string(s.substr(colon + 1));
  }
  if (id.name.empty()) throw ValidationError("annotator name is empty");
  return id;
}

// ---- JSON ----

void to_json(json& j, const AnnotatorId& v) {
  j = json{{"kind", to_string(v.kind)}, {"name", v.name}};
}
void from_json(const json& j, AnnotatorId& v) {
  v.kind = parse_annotator_kind(j.at("kind").get<std::string>());
  v.name = j.at("name").get<std::string>();
}

void to_json(json& j, const ExplanationRecord& v) {
  j = json{{"id", v.id},
           {"task", to_string(v.task)},
           {"method", to_string(v.method)},
           {"input_text", v.input_text},
           {"output_text", v.output_text},
           {"explanation_text", v.explanation_text},
           {"model_id", v.model_id},
           {"created_at", v.created_at}};
}
void from_json(const json& j, ExplanationRecord& v) {
  v.id = j.at("id").get<std::string>();
  v.task = parse_task_kind(j.at("task").get<std::string>());
  v.method = parse_explanation_method(j.at("method").get<std::string>());
  v.input_text = j.at("input_text").get<std::string>();
  v.output_text = j.at("output_text").get<std::string>();
  v.explanation_text = j.at("explanation_text").get<std::string>();
  v.model_id = j.at("model_id").get<std::string>();
  v.created_at = j.value("created_at", std::string{});
}

void to_json(json& j, const AtomicUnit& v) {
  j = json{{"unit_id", v.unit_id},
           {"explanation_id", v.explanation_id},
           {"text", v.text},
           {"category", to_string(v.category)},
           {"ordinal", v.ordinal}};
}
void from_json(const json& j, AtomicUnit& v) {
  v.unit_id = j.at("unit_id").get<std::string>();
  v.explanation_id = j.at("explanation_id").get<std::string>();
  v.text = j.at("text").get<std::string>();
  v.category = parse_unit_category(j.at("category").get<std::string>());
  v.ordinal = j.at("ordinal").get<std::int64_t>();
}

void to_json(json& j, const Counterfactual& v) {
  j = json{{"cf_id", v.cf_id},
           {"explanation_id", v.explanation_id},
           {"text", v.text},
           {"index", v.index}};
}
void from_json(const json& j, Counterfactual& v) {
  v.cf_id = j.at("cf_id").get<std::string>();
  v.explanation_id = j.at("explanation_id").get<std::string>();
  v.text = j.at("text").get<std::string>();
  v.index = j.at("index").get<std::int64_t>();
}

void to_json(json& j, const CounterfactualOutput& v) {
  j = json{{"cf_id", v.cf_id},
           {"text", v.text},
           {"conditioned_on_explanation", v.conditioned_on_explanation}};
}
void from_json(const json& j, CounterfactualOutput& v) {
  v.cf_id = j.at("cf_id").get<std::string>();
  v.text = j.at("text").get<std::string>();
  v.conditioned_on_explanation = j.at("conditioned_on_explanation").get<bool>();
}

void to_json(json& j, const UnitAnnotation& v) {
  j = json{{"annotator", v.annotator},
           {"cf_id", v.cf_id},
           {"unit_id", v.unit_id},
           {"target", to_string(v.target)},
           {"verdict", v.verdict}};
  put_opt(j, "note", v.note);
}
void from_json(const json& j, UnitAnnotation& v) {
  v.annotator = j.at("annotator").get<AnnotatorId>();
  v.cf_id = j.at("cf_id").get<std::string>();
  v.unit_id = j.at("unit_id").get<std::string>();
  v.target = parse_target(j.at("target").get<std::string>());
  v.verdict = j.at("verdict").get<bool>();
  v.note = opt_field<std::string>(j, "note");
}

void to_json(json& j, const ParseAudit& v) {
  j = json{{"explanation_id", v.explanation_id}};
  put_opt(j, "parsed_ok", v.parsed_ok);
  if (v.error_kind) {
    j["error_kind"] = to_string(*v.error_kind);
  } else {
    j["error_kind"] = nullptr;
  }
  put_opt(j, "note", v.note);
}
void from_json(const json& j, ParseAudit& v) {
  v.explanation_id = j.at("explanation_id").get<std::string>();
  v.parsed_ok = opt_field<bool>(j, "parsed_ok");
  auto kind = opt_field<std::string>(j, "error_kind");
  v.error_kind = kind ? std::optional(parse_error_kind(*kind)) : std::nullopt;
  v.note = opt_field<std::string>(j, "note");
}

void to_json(json& j, const RecordGraph& v) {
  j = json{{"explanations", v.explanations},
           {"units", v.units},
           {"counterfactuals", v.counterfactuals},
           {"outputs", v.outputs},
           {"annotations", v.annotations},
           {"annotation_history", v.annotation_history},
           {"audits", v.audits}};
}
void from_json(const json& j, RecordGraph& v) {
  v.explanations = j.at("explanations").get<std::vector<ExplanationRecord>>();
  v.units = j.at("units").get<std::vector<AtomicUnit>>();
  v.counterfactuals = j.at("counterfactuals").get<std::vector<Counterfactual>>();
  v.outputs = j.at("outputs").get<std::vector<CounterfactualOutput>>();
  v.annotations = j.at("annotations").get<std::vector<UnitAnnotation>>();
  v.annotation_history =
      j.value("annotation_history", std::vector<UnitAnnotation>{});
  v.audits = j.at("audits").get<std::vector<ParseAudit>>();
}

// ---- ids and routing ----

std::string make_unit_id(std::string_view explanation_id, std::int64_t ordinal) {
  return std::string(explanation_id) + "/u" + std::to_string(ordinal);
}

std::string make_cf_id(std::string_view explanation_id, std::int64_t index) {
  return std::string(explanation_id) + "/cf" + std::to_string(index);
}

bool category_allowed(TaskKind task, UnitCategory category) {
  if (task == TaskKind::news_summarization) return category == UnitCategory::general;
  return category != UnitCategory::general;
}

bool routes_to(TaskKind task, UnitCategory category, Target target) {
  if (!category_allowed(task, category)) return false;
  if (task == TaskKind::news_summarization) return true;
  return target == Target::counterfactual
             ? category == UnitCategory::patient_information
             : category == UnitCategory::suggestion;
}

std::vector<AtomicUnit> relevant_units(TaskKind task,
                                       std::span<const AtomicUnit> units,
                                       Target target) {
  std::vector<AtomicUnit> out;
  for (const auto& u : units) {
    if (!category_allowed(task, u.category)) {
      throw ValidationError("unit " + u.unit_id + " has category " +
                            to_string(u.category) + " which is not allowed for " +
                            to_string(task));
    }
    if (routes_to(task, u.category, target)) out.push_back(u);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const AtomicUnit& a, const AtomicUnit& b) {
                     return a.ordinal < b.ordinal;
                   });
  return out;
}

// ---- validation ----

std::vector<std::string> check_record(const ExplanationRecord& r) {
  std::vector<std::string> v;
  if (r.id.empty()) v.push_back("explanation with empty id");
  if (r.input_text.empty()) v.push_back("explanation " + r.id + ": empty input_text");
  if (r.output_text.empty()) v.push_back("explanation " + r.id + ": empty output_text");
  if (r.explanation_text.empty())
    v.push_back("explanation " + r.id + ": empty explanation_text");
  return v;
}

std::vector<std::string> check_record(const AtomicUnit& r) {
  std::vector<std::string> v;
  if (r.unit_id.empty()) v.push_back("unit with empty unit_id");
  if (r.text.empty()) v.push_back("unit " + r.unit_id + ": empty text");
  if (r.ordinal < 0) v.push_back("unit " + r.unit_id + ": negative ordinal");
  return v;
}

std::vector<std::string> check_record(const Counterfactual& r) {
  std::vector<std::string> v;
  if (r.cf_id.empty()) v.push_back("counterfactual with empty cf_id");
  if (r.text.empty()) v.push_back("counterfactual " + r.cf_id + ": empty text");
  if (r.index < 0) v.push_back("counterfactual " + r.cf_id + ": negative index");
  return v;
}

std::vector<std::string> check_record(const CounterfactualOutput& r) {
  std::vector<std::string> v;
  if (r.cf_id.empty()) v.push_back("output with empty cf_id");
  if (r.text.empty()) v.push_back("output for " + r.cf_id + ": empty text");
  return v;
}

std::vector<std::string> check_record(const UnitAnnotation& r) {
  std::vector<std::string> v;
  if (r.annotator.name.empty()) v.push_back("annotation with empty annotator name");
  if (r.cf_id.empty() || r.unit_id.empty())
    v.push_back("annotation by " + r.annotator.str() + " with empty reference");
  return v;
}

std::vector<std::string> check_record(const ParseAudit& r) {
  std::vector<std::string> v;
  if (r.explanation_id.empty()) v.push_back("parse audit with empty explanation_id");
  bool wants_kind = r.parsed_ok.has_value() && !*r.parsed_ok;
  if (wants_kind != r.error_kind.has_value()) {
    v.push_back("parse audit for " + r.explanation_id +
                ": error_kind must be present iff parsed_ok is false");
  }
  return v;
}

std::vector<std::string> validate_record_graph(const RecordGraph& g,
                                               const ValidationContext& ctx) {
  std::vector<std::string> out;
  auto add = [&](std::vector<std::string> v) {
    out.insert(out.end(), std::make_move_iterator(v.begin()),
               std::make_move_iterator(v.end()));
  };

  std::unordered_map<std::string, const ExplanationRecord*> expl;
  for (const auto& e : g.explanations) {
    add(check_record(e));
    if (!expl.emplace(e.id, &e).second) out.push_back("duplicate explanation id " + e.id);
  }

  std::unordered_map<std::string, const AtomicUnit*> units;
  std::map<std::string, std::vector<std::int64_t>> ordinals;
  for (const auto& u : g.units) {
    add(check_record(u));
    if (!units.emplace(u.unit_id, &u).second) out.push_back("duplicate unit id " + u.unit_id);
    auto it = expl.find(u.explanation_id);
    if (it == expl.end()) {
      out.push_back("unit " + u.unit_id + " references unknown explanation " +
                    u.explanation_id);
      continue;
    }
    if (!category_allowed(it->second->task, u.category)) {
      out.push_back("unit " + u.unit_id + " has category " + to_string(u.category) +
                    " not allowed for " + to_string(it->second->task));
    }
    ordinals[u.explanation_id].push_back(u.ordinal);
  }
  for (auto& [eid, ords] : ordinals) {
    std::sort(ords.begin(), ords.end());
    for (std::size_t i = 0; i < ords.size(); ++i) {
      if (ords[i] != static_cast<std::int64_t>(i)) {
        out.push_back("unit ordinals of explanation " + eid +
                      " are not distinct and contiguous from 0");
        break;
      }
    }
  }

  std::unordered_map<std::string, const Counterfactual*> cfs;
  std::set<std::pair<std::string, std::int64_t>> cf_slots;
  for (const auto& c : g.counterfactuals) {
    add(check_record(c));
    if (!cfs.emplace(c.cf_id, &c).second) out.push_back("duplicate counterfactual id " + c.cf_id);
    if (!expl.contains(c.explanation_id)) {
      out.push_back("counterfactual " + c.cf_id + " references unknown explanation " +
                    c.explanation_id);
    }
    if (ctx.counterfactuals_per_explanation &&
        c.index >= *ctx.counterfactuals_per_explanation) {
      out.push_back("counterfactual " + c.cf_id + " index " + std::to_string(c.index) +
                    " >= k=" + std::to_string(*ctx.counterfactuals_per_explanation));
    }
    if (!cf_slots.emplace(c.explanation_id, c.index).second) {
      out.push_back("counterfactual index " + std::to_string(c.index) +
                    " repeated for explanation " + c.explanation_id);
    }
  }

  std::set<std::string> output_cfs;
  for (const auto& o : g.outputs) {
    add(check_record(o));
    if (!cfs.contains(o.cf_id)) {
      out.push_back("output references unknown counterfactual " + o.cf_id);
    }
    if (!output_cfs.insert(o.cf_id).second) {
      out.push_back("more than one output for counterfactual " + o.cf_id);
    }
    if (ctx.sanity_conditioned && o.conditioned_on_explanation != *ctx.sanity_conditioned) {
      out.push_back("output for " + o.cf_id +
                    " has conditioned_on_explanation inconsistent with run mode");
    }
  }

  // (annotator, cf) -> units with a simulatability verdict
  std::map<std::pair<AnnotatorId, std::string>, std::set<std::string>> sim_seen;
  std::set<std::pair<AnnotatorId, std::string>> precision_used;
  std::set<AnnotationKey> keys;
  for (const auto& a : g.annotations) {
    add(check_record(a));
    if (!keys.insert(a.key()).second) {
      out.push_back("duplicate annotation key (" + a.annotator.str() + ", " + a.cf_id +
                    ", " + a.unit_id + ", " + to_string(a.target) + ")");
    }
    auto cf = cfs.find(a.cf_id);
    auto unit = units.find(a.unit_id);
    if (cf == cfs.end()) {
      out.push_back("annotation references unknown counterfactual " + a.cf_id);
    }
    if (unit == units.end()) {
      out.push_back("annotation references unknown unit " + a.unit_id);
    }
    if (cf == cfs.end() || unit == units.end()) continue;
    if (cf->second->explanation_id != unit->second->explanation_id) {
      out.push_back("annotation pairs counterfactual " + a.cf_id + " with unit " +
                    a.unit_id + " of a different explanation");
      continue;
    }
    auto e = expl.find(unit->second->explanation_id);
    if (e == expl.end()) continue;
    if (!routes_to(e->second->task, unit->second->category, a.target)) {
      out.push_back("annotation by " + a.annotator.str() + " targets " +
                    to_string(a.target) + " with " + to_string(unit->second->category) +
                    " unit " + a.unit_id);
      continue;
    }
    if (a.target == Target::counterfactual) {
      sim_seen[{a.annotator, a.cf_id}].insert(a.unit_id);
    } else {
      precision_used.insert({a.annotator, a.cf_id});
    }
  }

  if (!precision_used.empty()) {
    std::map<std::string, std::vector<std::string>> sim_units_by_expl;
    for (const auto& u : g.units) {
      auto e = expl.find(u.explanation_id);
      if (e != expl.end() && routes_to(e->second->task, u.category, Target::counterfactual)) {
        sim_units_by_expl[u.explanation_id].push_back(u.unit_id);
      }
    }
    for (const auto& [who, cf_id] : precision_used) {
      const auto& need = sim_units_by_expl[cfs.at(cf_id)->explanation_id];
      const auto& have = sim_seen[{who, cf_id}];
      for (const auto& uid : need) {
        if (!have.contains(uid)) {
          out.push_back("precision verdicts by " + who.str() + " on " + cf_id +
                        " without a simulatability verdict for unit " + uid);
          break;
        }
      }
    }
  }

  for (const auto& a : g.audits) {
    add(check_record(a));
    if (!expl.contains(a.explanation_id)) {
      out.push_back("parse audit references unknown explanation " + a.explanation_id);
    }
  }

  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::string utc_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace cfsim
