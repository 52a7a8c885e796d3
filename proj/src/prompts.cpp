#include "cfsim/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <regex>
#include <set>
#include <sstream>

#include "cfsim/errors.hpp"

namespace cfsim {

namespace {

constexpr std::pair<Stage, const char*> kStages[] = {
    {Stage::explain_cot, "explain_cot"},
    {Stage::explain_posthoc, "explain_posthoc"},
    {Stage::gen_counterfactual, "gen_counterfactual"},
    {Stage::parse_explanation, "parse_explanation"},
    {Stage::gen_cf_output, "gen_cf_output"},
    {Stage::judge_simulatability, "judge_simulatability"},
    {Stage::judge_precision, "judge_precision"}};

std::string_view trim(std::string_view s) {
  const char* ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    auto line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = nl + 1;
  }
  return lines;
}

bool is_placeholder_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

// Visits literal runs and {{name}} placeholders of `body` in order.
template <typename OnText, typename OnName>
void scan_placeholders(std::string_view body, OnText&& on_text, OnName&& on_name) {
  std::size_t i = 0;
  while (i < body.size()) {
    auto open = body.find("{{", i);
    if (open == std::string_view::npos) break;
    auto close = body.find("}}", open + 2);
    if (close == std::string_view::npos) break;
    auto name = body.substr(open + 2, close - open - 2);
    if (name.empty() || !std::all_of(name.begin(), name.end(), is_placeholder_char)) {
      on_text(body.substr(i, open + 2 - i));
      i = open + 2;
      continue;
    }
    on_text(body.substr(i, open - i));
    on_name(name);
    i = close + 2;
  }
  on_text(body.substr(i));
}

}  // namespace

std::string to_string(Stage s) {
  for (const auto& [v, n] : kStages) {
    if (v == s) return n;
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (const auto& [v, n] : kStages) {
    if (s == n) return v;
  }
  throw ConfigError("unknown prompt stage '" + std::string(s) + "'");
}

Stage explain_stage(ExplanationMethod method) {
  return method == ExplanationMethod::chain_of_thought ? Stage::explain_cot
                                                       : Stage::explain_posthoc;
}

double default_temperature(Stage s) {
  switch (s) {
    case Stage::explain_cot:
    case Stage::explain_posthoc:
    case Stage::gen_counterfactual:
    case Stage::gen_cf_output:
      return 0.7;
    case Stage::parse_explanation:
    case Stage::judge_simulatability:
    case Stage::judge_precision:
      return 0.0;
  }
  return 0.0;
}

// ---- templates ----

std::vector<std::string> PromptTemplate::placeholders() const {
  std::vector<std::string> names;
  scan_placeholders(
      body, [](std::string_view) {},
      [&](std::string_view n) {
        if (std::find(names.begin(), names.end(), n) == names.end()) names.emplace_back(n);
      });
  return names;
}

PromptTemplate parse_template(std::string_view file_text) {
  auto lines = split_lines(file_text);
  PromptTemplate t;
  std::optional<std::string> stage, task, version;
  std::size_t i = 0;
  bool found_separator = false;
  for (; i < lines.size(); ++i) {
    auto line = trim(lines[i]);
    if (line == "---") {
      found_separator = true;
      ++i;
      break;
    }
    if (line.empty() || line.front() == '#') continue;
    auto colon = line.find(':');
    if (colon == std::string_view::npos) {
      throw ConfigError("template header line without ':': " + std::string(line));
    }
    auto key = trim(line.substr(0, colon));
    auto value = std::string(trim(line.substr(colon + 1)));
    if (key == "stage") {
      stage = value;
    } else if (key == "task") {
      task = value;
    } else if (key == "version") {
      version = value;
    } else {
      throw ConfigError("unknown template header key '" + std::string(key) + "'");
    }
  }
  if (!found_separator) throw ConfigError("template has no '---' separator");
  if (!stage || !task || !version) {
    throw ConfigError("template header needs stage, task and version");
  }
  t.stage = parse_stage(*stage);
  try {
    t.task = parse_task_kind(*task);
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  t.version = *version;
  std::string body;
  for (std::size_t j = i; j < lines.size(); ++j) {
    body.append(lines[j]);
    if (j + 1 < lines.size()) body.push_back('\n');
  }
  t.body = std::string(trim(body));
  return t;
}

PromptTemplate load_template(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot read template " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_template(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

TemplateCatalog TemplateCatalog::load_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw NotFoundError("template directory not found: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".tmpl") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  TemplateCatalog catalog;
  for (const auto& f : files) catalog.add(load_template(f));
  return catalog;
}

void TemplateCatalog::add(PromptTemplate t) {
  auto key = std::pair{t.stage, t.task};
  if (templates_.contains(key)) {
    throw ConfigError("duplicate template for " + to_string(t.task) + "/" +
                      to_string(t.stage));
  }
  templates_.emplace(key, std::move(t));
}

const PromptTemplate& TemplateCatalog::get(Stage stage, TaskKind task) const {
  auto it = templates_.find({stage, task});
  if (it == templates_.end()) {
    throw NotFoundError("no template for " + to_string(task) + "/" + to_string(stage));
  }
  return it->second;
}

bool TemplateCatalog::has(Stage stage, TaskKind task) const {
  return templates_.contains({stage, task});
}

json TemplateCatalog::versions() const {
  json j = json::object();
  for (const auto& [key, t] : templates_) {
    j[to_string(t.task) + "/" + to_string(t.stage)] = t.version;
  }
  return j;
}

ChatRequest render(const PromptTemplate& tmpl, const Bindings& bindings) {
  std::string text;
  scan_placeholders(
      tmpl.body, [&](std::string_view lit) { text.append(lit); },
      [&](std::string_view name) {
        auto it = bindings.find(name);
        if (it == bindings.end()) throw RenderError(std::string(name));
        text.append(it->second);
      });

  ChatRequest req;
  req.request_tag = to_string(tmpl.stage);
  req.temperature = default_temperature(tmpl.stage);

  // Role markers are taken from the literal template only; bound text
  // can never open a new message.
  bool has_markers = false;
  for (auto line : split_lines(tmpl.body)) {
    if (trim(line) == "### system" || trim(line) == "### user") has_markers = true;
  }
  if (!has_markers) {
    req.messages.push_back({Role::user, text});
    return req;
  }

  std::optional<Role> role;
  std::string section_body;
  auto flush = [&] {
    if (!role) return;
    std::string rendered;
    scan_placeholders(
        section_body, [&](std::string_view lit) { rendered.append(lit); },
        [&](std::string_view name) { rendered.append(bindings.find(name)->second); });
    req.messages.push_back({*role, std::string(trim(rendered))});
    section_body.clear();
  };
  for (auto line : split_lines(tmpl.body)) {
    auto t = trim(line);
    if (t == "### system" || t == "### user") {
      flush();
      role = t == "### system" ? Role::system : Role::user;
      continue;
    }
    if (!role) continue;  // text before the first marker is a comment
    section_body.append(line);
    section_body.push_back('\n');
  }
  flush();
  return req;
}

// ---- response parsers ----

namespace {

// Returns "OUTPUT"/"EXPLANATION" when the line is a bare section label.
std::optional<std::string> section_label(std::string_view line) {
  auto t = trim(line);
  auto strip_front = t.find_first_not_of("#=[*_ ");
  if (strip_front == std::string_view::npos) return std::nullopt;
  t = t.substr(strip_front);
  auto strip_back = t.find_last_not_of("=]*_: ");
  t = t.substr(0, strip_back + 1);
  auto up = lower(t);
  if (up == "output") return "OUTPUT";
  if (up == "explanation") return "EXPLANATION";
  return std::nullopt;
}

}  // namespace

ExplainedOutput parse_explanation_response(std::string_view stage_output,
                                           ExplanationMethod /*method*/) {
  std::map<std::string, std::string> sections;
  std::optional<std::string> current;
  for (auto line : split_lines(stage_output)) {
    if (auto label = section_label(line)) {
      if (sections.contains(*label)) {
        throw ParseError("duplicated " + *label + " section", std::string(stage_output));
      }
      sections[*label];
      current = *label;
      continue;
    }
    if (current) {
      auto& s = sections[*current];
      s.append(line);
      s.push_back('\n');
    }
  }
  for (const char* name : {"OUTPUT", "EXPLANATION"}) {
    auto it = sections.find(name);
    if (it == sections.end()) {
      throw ParseError(std::string("missing ") + name + " section", std::string(stage_output));
    }
    if (trim(it->second).empty()) {
      throw ParseError(std::string("empty ") + name + " section", std::string(stage_output));
    }
  }
  return {std::string(trim(sections["OUTPUT"])), std::string(trim(sections["EXPLANATION"]))};
}

CounterfactualList parse_counterfactual_list(std::string_view stage_output, int expected_k) {
  if (expected_k < 1) throw ValidationError("expected_k must be >= 1");
  static const std::regex labelled(
      R"(^\s*(?:\*\*|#+\s*)?counterfactual\s*#?\s*(\d+)\s*(?:\*\*)?\s*[.):]?\s*(?:\*\*)?\s*(.*)$)",
      std::regex::icase);
  static const std::regex numbered(R"(^\s*(?:\*\*)?(\d+)[.)](?:\*\*)?\s+(.*)$)");
  static const std::regex bullet(R"(^\s*[-*•]\s+(.*)$)");

  auto lines = split_lines(stage_output);
  auto collect = [&](auto&& match_item) {
    std::vector<std::string> items;
    std::optional<std::string> cur;
    for (auto line : lines) {
      std::string l(line);
      std::optional<std::string> head = match_item(l);
      if (head) {
        if (cur) items.push_back(std::move(*cur));
        cur = *head;
      } else if (cur) {
        cur->push_back('\n');
        cur->append(line);
      }
    }
    if (cur) items.push_back(std::move(*cur));
    return items;
  };

  std::vector<std::string> items = collect([&](const std::string& l) -> std::optional<std::string> {
    std::smatch m;
    if (std::regex_match(l, m, labelled) || std::regex_match(l, m, numbered)) return m[2].str();
    return std::nullopt;
  });
  if (items.empty()) {
    items = collect([&](const std::string& l) -> std::optional<std::string> {
      std::smatch m;
      if (std::regex_match(l, m, bullet)) return m[1].str();
      return std::nullopt;
    });
  }

  CounterfactualList out;
  for (auto& item : items) {
    auto t = trim(item);
    if (t.empty()) continue;
    if (static_cast<int>(out.texts.size()) == expected_k) break;
    out.texts.emplace_back(t);
  }
  if (out.texts.empty()) {
    throw ParseError("no counterfactual list items found", std::string(stage_output));
  }
  out.shortfall = static_cast<int>(out.texts.size()) < expected_k;
  return out;
}

namespace {

std::optional<UnitCategory> header_category(std::string_view line) {
  auto l = lower(line);
  if (l.find("patient") != std::string::npos) return UnitCategory::patient_information;
  if (l.find("suggest") != std::string::npos || l.find("action") != std::string::npos ||
      l.find("recommend") != std::string::npos) {
    return UnitCategory::suggestion;
  }
  return std::nullopt;
}

}  // namespace

UnitList parse_unit_list(std::string_view stage_output, TaskKind task,
                         std::string_view explanation_id) {
  static const std::regex bullet(R"(^\s*(?:[-*•]|\d+[.)])(?:\s+(.*)|\s*)$)");
  const bool medical = task == TaskKind::medical_suggestion;
  UnitList out;
  std::optional<UnitCategory> group;
  bool saw_header = false;
  std::size_t lineno = 0;
  for (auto line : split_lines(stage_output)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty()) continue;
    if (t.size() >= 3 && t.find_first_not_of("-=*_") == std::string_view::npos) continue;  // rule line
    std::string l(line);
    std::smatch m;
    if (std::regex_match(l, m, bullet)) {
      auto text = std::string(trim(m[1].str()));
      if (text.empty()) {
        out.skipped.push_back("line " + std::to_string(lineno) + ": empty bullet");
        continue;
      }
      UnitCategory cat = UnitCategory::general;
      if (medical) {
        if (!group) {
          out.skipped.push_back("line " + std::to_string(lineno) +
                                ": bullet outside a group header");
          continue;
        }
        cat = *group;
      }
      AtomicUnit u;
      u.explanation_id = std::string(explanation_id);
      u.ordinal = static_cast<std::int64_t>(out.units.size());
      u.unit_id = make_unit_id(explanation_id, u.ordinal);
      u.text = std::move(text);
      u.category = cat;
      out.units.push_back(std::move(u));
      continue;
    }
    if (medical) {
      if (auto cat = header_category(t)) {
        group = cat;
        saw_header = true;
      }
    }
  }
  if (medical && !saw_header) {
    throw ParseError("medical unit list lacks both group headers", std::string(stage_output));
  }
  if (out.units.empty()) {
    throw ParseError("no atomic units found", std::string(stage_output));
  }
  return out;
}

std::string format_unit_list(std::span<const AtomicUnit> units, TaskKind task) {
  std::vector<AtomicUnit> sorted(units.begin(), units.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.ordinal < b.ordinal; });
  std::string out;
  if (task == TaskKind::news_summarization) {
    for (const auto& u : sorted) out += "- " + u.text + "\n";
    return out;
  }
  for (auto [cat, header] : {std::pair{UnitCategory::patient_information, "Patient Information:"},
                             std::pair{UnitCategory::suggestion, "Suggested Actions:"}}) {
    out += std::string(header) + "\n";
    for (const auto& u : sorted) {
      if (u.category == cat) out += "- " + u.text + "\n";
    }
  }
  return out;
}

bool parse_judge_verdict(std::string_view stage_output) {
  auto t = trim(stage_output);
  auto skip_decoration = [&] {
    auto p = t.find_first_not_of(" \t\r\n*\"'`([_>#");
    t = p == std::string_view::npos ? std::string_view{} : t.substr(p);
  };
  skip_decoration();
  for (const char* prefix : {"verdict", "answer"}) {
    auto n = std::char_traits<char>::length(prefix);
    if (t.size() > n && lower(t.substr(0, n)) == prefix) {
      auto rest = t.substr(n);
      auto p = rest.find_first_not_of(" \t*");
      if (p != std::string_view::npos && rest[p] == ':') {
        t = rest.substr(p + 1);
        skip_decoration();
      }
      break;
    }
  }
  std::size_t n = 0;
  while (n < t.size() && std::isalpha(static_cast<unsigned char>(t[n]))) ++n;
  auto word = lower(t.substr(0, n));
  if (word == "yes" || word == "y") return true;
  if (word == "no" || word == "n") return false;
  throw VerdictParseError("no leading YES/NO verdict", std::string(stage_output));
}

}  // namespace cfsim
