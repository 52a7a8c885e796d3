#include "mock_backend.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <regex>
#include <sstream>

#include "cfsim/errors.hpp"
#include "cfsim/hash.hpp"

namespace cfsim::testing {

const std::vector<VocabEntry>& vocabulary(TaskKind task) {
  static const std::vector<VocabEntry> news = {
      {"election results", "election results"},
      {"casualty figures", "casualty figures"},
      {"official statements", "official statements"},
      {"economic impact", "economic impact"},
      {"timeline of events", "timeline of events"},
      {"public reaction", "public reaction"},
      {"weather conditions", "weather conditions"},
      {"legal consequences", "legal consequences"},
  };
  static const std::vector<VocabEntry> medical = {
      {"persistent cough", "get a chest x-ray"},
      {"high fever", "take an antipyretic"},
      {"chest pain", "see a cardiologist"},
      {"shortness of breath", "check oxygen saturation"},
      {"history of asthma", "carry a rescue inhaler"},
      {"recent travel abroad", "get tested for malaria"},
      {"swollen ankles", "check kidney function"},
      {"frequent headaches", "keep a headache diary"},
  };
  return task == TaskKind::news_summarization ? news : medical;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::optional<std::string> tagged(const std::string& text, const std::string& tag) {
  const std::string open = "<" + tag + ">", close = "</" + tag + ">";
  auto a = text.find(open);
  if (a == std::string::npos) return std::nullopt;
  a += open.size();
  auto b = text.find(close, a);
  if (b == std::string::npos) return std::nullopt;
  auto body = text.substr(a, b - a);
  auto first = body.find_first_not_of(" \n");
  auto last = body.find_last_not_of(" \n");
  return first == std::string::npos ? std::string{} : body.substr(first, last - first + 1);
}

std::vector<VocabEntry> details_in(TaskKind task, const std::string& text) {
  const auto hay = lower(text);
  std::vector<VocabEntry> out;
  for (const auto& v : vocabulary(task)) {
    if (hay.find(v.detail) != std::string::npos) out.push_back(v);
  }
  return out;
}

MockExplanation read_mock_explanation(const std::string& explanation) {
  MockExplanation m;
  std::istringstream in(explanation);
  std::string line;
  bool actions = false;
  while (std::getline(in, line)) {
    if (line.rfind("Recommended actions", 0) == 0) actions = true;
    if (line.rfind("- ", 0) != 0) continue;
    auto item = line.substr(2);
    (actions ? m.actions : m.details).push_back(item);
  }
  if (m.actions.empty() && !actions) m.actions = m.details;
  return m;
}

namespace {

std::string join(const std::vector<std::string>& xs, const std::string& sep) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : sep) + x;
  return out;
}

std::string base_tag(const std::string& tag) { return tag.substr(0, tag.find(':')); }

std::string user_text(const ChatRequest& req) {
  std::string all;
  for (const auto& m : req.messages) all += m.content + "\n";
  return all;
}

}  // namespace

std::map<std::string, std::size_t> MockBackend::calls_by_tag() const {
  std::lock_guard lock(mu_);
  return by_tag_;
}

std::string MockBackend::explain(const std::string& input, bool sanity,
                                 const std::optional<std::string>& explanation, bool cot) const {
  const bool news = task_ == TaskKind::news_summarization;
  auto found = details_in(task_, input);
  std::vector<std::string> details, actions;
  for (const auto& v : found) {
    details.push_back(v.detail);
    actions.push_back(v.action);
  }

  std::vector<std::string> said = actions;
  if (sanity && explanation) {
    said = read_mock_explanation(*explanation).actions;
  } else if (said.size() >= 2 && stable_hash(input) % 4 == 0) {
    said.erase(said.begin() + static_cast<long>(stable_hash(input + "#drop") % said.size()));
  }

  std::string expl;
  if (news) {
    expl = "A useful summary keeps these kinds of content:\n";
    for (const auto& d : details) expl += "- " + d + "\n";
    if (details.empty()) expl += "General coverage only.\n";
  } else {
    expl = "Patient details:\n";
    for (const auto& d : details) expl += "- " + d + "\n";
    expl += "Recommended actions:\n";
    for (const auto& a : actions) expl += "- " + a + "\n";
  }
  std::string output = news ? "Summary: the article reports " +
                                  (said.empty() ? std::string("little of note") : join(said, ", ")) + "."
                            : "Suggestion: " +
                                  (said.empty() ? std::string("rest and monitor") : join(said, "; ")) + ".";
  if (cot) return "=== EXPLANATION ===\n" + expl + "\n=== OUTPUT ===\n" + output + "\n";
  return "=== OUTPUT ===\n" + output + "\n\n=== EXPLANATION ===\n" + expl;
}

std::string MockBackend::chat(const ChatRequest& req) {
  ++chat_calls_;
  {
    std::lock_guard lock(mu_);
    ++by_tag_[req.request_tag];
  }
  if (script) {
    if (auto r = script(req)) return *r;
  }
  const auto text = user_text(req);
  const auto tag = base_tag(req.request_tag);
  const bool news = task_ == TaskKind::news_summarization;

  if (tag == "explain_cot" || tag == "explain_posthoc" || tag == "gen_cf_output") {
    auto input = tagged(text, "input").value_or("");
    auto explanation = tagged(text, "explanation");
    bool cot = text.find("=== EXPLANATION ===\n<your explanation>\n\n=== OUTPUT") != std::string::npos;
    return explain(input, explanation.has_value(), explanation, cot);
  }

  if (tag == "gen_counterfactual") {
    auto explanation = read_mock_explanation(tagged(text, "explanation").value_or(""));
    int k = 3;
    std::smatch m;
    if (std::regex_search(text, m, std::regex(R"(Write (\d+) new)"))) k = std::stoi(m[1]);
    std::string out;
    for (int j = 0; j < k; ++j) {
      std::vector<std::string> picked;
      for (const auto& d : explanation.details) {
        if (j == 0 || stable_hash(d + "#" + std::to_string(j) + join(explanation.details, "|")) % 3 != 0) {
          picked.push_back(d);
        }
      }
      const auto& vocab = vocabulary(task_);
      const auto& extra = vocab[stable_hash(std::to_string(j) + join(explanation.details, "|")) % vocab.size()];
      if (std::find(picked.begin(), picked.end(), extra.detail) == picked.end() && j % 2 == 1) {
        picked.push_back(extra.detail);
      }
      std::string body = news ? "Story variant " + std::to_string(j + 1) + " covers " +
                                    (picked.empty() ? std::string("a quiet day") : join(picked, ", ")) + "."
                              : "Patient " + std::to_string(j + 1) + ": I have " +
                                    (picked.empty() ? std::string("no clear symptoms") : join(picked, ", ")) +
                                    ". What should I do?";
      out += "Counterfactual " + std::to_string(j + 1) + ": " + body + "\n";
    }
    return out;
  }

  if (tag == "parse_explanation") {
    auto explanation = read_mock_explanation(tagged(text, "explanation").value_or(""));
    std::string out;
    if (news) {
      for (const auto& d : explanation.details) out += "- " + d + "\n";
    } else {
      out = "Patient Information:\n";
      for (const auto& d : explanation.details) out += "- " + d + "\n";
      out += "Suggested Actions:\n";
      for (const auto& a : explanation.actions) out += "- " + a + "\n";
    }
    return out;
  }

  if (tag == "judge_simulatability" || tag == "judge_precision") {
    auto unit = lower(tagged(text, "unit").value_or(""));
    auto passage = lower(tagged(text, "passage").value_or(""));
    bool present = !unit.empty() && passage.find(unit) != std::string::npos;
    return present ? "Yes, it appears." : "No.";
  }
  throw TransportError("mock backend: unexpected request tag " + req.request_tag);
}

std::vector<double> MockBackend::embed(const std::string& text, const std::string& model_id) {
  ++embed_calls_;
  std::vector<double> v(kDims);
  double norm = 0.0;
  for (std::size_t i = 0; i < kDims; ++i) {
    auto h = std::stoull(sha256_hex(model_id + "\x1f" + text + "\x1f" + std::to_string(i)).substr(0, 15), nullptr, 16);
    v[i] = static_cast<double>(h % 1001) / 1000.0;
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  if (norm == 0.0) v[0] = norm = 1.0;
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace cfsim::testing
