#include "cfsim/report.hpp"

#include <cstdio>
#include <iomanip>
#include <set>
#include <sstream>

namespace cfsim {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool right = false) {
  // Width counts code points so the en-dash labels line up.
  std::size_t cps = 0;
  for (unsigned char c : s) cps += (c & 0xC0) != 0x80;
  if (cps >= width) return s;
  std::string fill(width - cps, ' ');
  return right ? fill + s : s + fill;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json optional_number(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

std::string fixed2(std::optional<double> v) { return v ? fixed(*v, 2) : "—"; }

json report_json(const EvalReport& r) {
  json buckets = json::object();
  const auto& labels = bucket_labels();
  for (std::size_t i = 0; i < kBucketCount; ++i) buckets[labels[i]] = r.buckets[i];
  json samples = json::array();
  for (const auto& s : r.samples) {
    samples.push_back(json{{"explanation_id", s.explanation_id},
                           {"cf_id", s.cf_id},
                           {"presence_proportion", s.presence_proportion},
                           {"simulatable", s.simulatable},
                           {"precision", optional_number(s.precision)}});
  }
  return json{{"task", to_string(r.task)},
              {"method", to_string(r.method)},
              {"model_id", r.model_id},
              {"annotator", r.annotator},
              {"threshold", r.threshold},
              {"n_explanations", r.n_explanations},
              {"n_samples", r.n_samples},
              {"n_scored", r.n_scored},
              {"n_simulatable", r.n_simulatable},
              {"n_generated", r.n_generated},
              {"generality", optional_number(r.generality)},
              {"n_generality_explanations", r.n_generality_explanations},
              {"precision", r.precision},
              {"buckets", buckets},
              {"kappa_matrix", kappa_json(r.kappa)},
              {"samples", samples},
              {"notes", r.notes}};
}

std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  const std::string task = to_string(r.task);
  const std::string method = to_string(r.method);
  const std::size_t tw = std::max<std::size_t>(task.size(), 4) + 2;
  const std::size_t mw = std::max<std::size_t>(method.size(), 6) + 2;
  const std::size_t modw = std::max<std::size_t>(r.model_id.size(), 5) + 2;
  os << pad("Task", tw) << pad("Method", mw) << pad("Model", modw) << pad("# Expl", 8, true)
     << pad("# Samples", 11, true) << pad("Generality", 12, true) << pad("Precision", 11, true)
     << '\n';
  os << pad(task, tw) << pad(method, mw) << pad(r.model_id, modw)
     << pad(std::to_string(r.n_explanations), 8, true)
     << pad(std::to_string(r.n_samples), 11, true) << pad(fixed2(r.generality), 12, true)
     << pad(fixed2(r.precision), 11, true) << '\n';
  os << '\n'
     << "Simulatable counterfactuals: " << r.n_simulatable << " of " << r.n_scored
     << " scored (" << r.n_generated << " generated), threshold " << fixed2(r.threshold)
     << ", annotator " << r.annotator.str() << '\n';
  os << '\n' << "Proportion of atomic units present in counterfactual\n";
  const auto& labels = bucket_labels();
  std::size_t total = 0;
  for (std::size_t i = 0; i < kBucketCount; ++i) {
    os << "  " << pad(labels[i], 12) << pad(std::to_string(r.buckets[i]), 6, true) << '\n';
    total += r.buckets[i];
  }
  os << "  " << pad("Total", 12) << pad(std::to_string(total), 6, true) << '\n';
  if (!r.notes.empty()) os << '\n' << r.notes.size() << " note(s); see --format json\n";
  return os.str();
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "explanation_id,cf_id,presence_proportion,simulatable,precision\n";
  for (const auto& s : r.samples) {
    os << csv_field(s.explanation_id) << ',' << csv_field(s.cf_id) << ','
       << json(s.presence_proportion).dump() << ',' << (s.simulatable ? "true" : "false")
       << ',' << (s.precision ? json(*s.precision).dump() : "") << '\n';
  }
  return os.str();
}

json kappa_json(std::span<const KappaCell> cells) {
  json out = json::array();
  for (const auto& c : cells) {
    json cell{{"a", c.a},
              {"b", c.b},
              {"kappa", optional_number(c.result.kappa)},
              {"n", c.result.n}};
    if (c.target) cell["target"] = to_string(*c.target);
    out.push_back(std::move(cell));
  }
  return out;
}

std::string kappa_table(std::span<const KappaCell> cells) {
  std::set<AnnotatorId> who;
  for (const auto& c : cells) {
    who.insert(c.a);
    who.insert(c.b);
  }
  std::vector<AnnotatorId> names(who.begin(), who.end());
  std::size_t w = 10;
  for (const auto& n : names) w = std::max(w, n.str().size() + 2);
  auto find = [&](const AnnotatorId& a, const AnnotatorId& b) -> const KappaCell* {
    for (const auto& c : cells) {
      if (c.target) continue;
      if ((c.a == a && c.b == b) || (c.a == b && c.b == a)) return &c;
    }
    return nullptr;
  };
  std::ostringstream os;
  os << pad("Annotator", w);
  for (const auto& n : names) os << pad(n.str(), w, true);
  os << '\n';
  for (const auto& a : names) {
    os << pad(a.str(), w);
    for (const auto& b : names) {
      std::string cell;
      if (a == b) {
        cell = "-";
      } else if (const auto* c = find(a, b)) {
        cell = fixed2(c->result.kappa) + " (n=" + std::to_string(c->result.n) + ")";
      } else {
        cell = "n/a";
      }
      os << pad(cell, w, true);
    }
    os << '\n';
  }
  bool split = false;
  for (const auto& c : cells) split |= c.target.has_value();
  if (split) {
    os << "\nPer-target breakdown\n";
    for (const auto& c : cells) {
      if (!c.target) continue;
      os << "  " << c.a.str() << " vs " << c.b.str() << " [" << to_string(*c.target)
         << "]: " << fixed2(c.result.kappa) << " (n=" << c.result.n << ")\n";
    }
  }
  return os.str();
}

json audit_json(const AuditSummary& s) {
  return json{{"n_audited", s.n_audited},
              {"n_ok", s.n_ok},
              {"accuracy", optional_number(s.accuracy)},
              {"missing_extraction", s.missing},
              {"incorrect_extraction", s.incorrect},
              {"missing_and_incorrect", s.missing_and_incorrect}};
}

std::string audit_table(const AuditSummary& s, TaskKind task) {
  std::ostringstream os;
  const std::string col = to_string(task) + " (n=" + std::to_string(s.n_audited) + ")";
  const std::size_t w = 38;
  os << pad("Parsed Explanations", w) << col << '\n';
  os << pad("Accuracy", w) << fixed2(s.accuracy) << '\n';
  os << "Breakdown of Incorrect Examples:\n";
  os << pad("    Missing Extraction", w) << s.missing << '\n';
  os << pad("    Incorrect Extraction", w) << s.incorrect << '\n';
  os << pad("    Missing and Incorrect Extraction", w) << s.missing_and_incorrect << '\n';
  return os.str();
}

std::string sweep_table(std::span<const SweepRow> rows) {
  std::ostringstream os;
  const std::size_t w = 34, cw = 10;
  os << pad("Metric", w);
  for (const auto& r : rows) os << pad(std::to_string(r.k), cw, true);
  os << '\n';
  os << pad("Generality", w);
  for (const auto& r : rows) {
    std::string cell = r.error ? "error" : r.generality ? fixed(*r.generality, 3) : "excluded";
    os << pad(cell, cw, true);
  }
  os << '\n' << pad("Simulatable counterfactuals", w);
  for (const auto& r : rows) {
    os << pad(r.error ? "error" : std::to_string(r.simulatable), cw, true);
  }
  os << '\n' << pad("Total generated counterfactuals", w);
  for (const auto& r : rows) {
    os << pad(r.error ? "error" : std::to_string(r.generated), cw, true);
  }
  os << '\n';
  for (const auto& r : rows) {
    if (r.error) os << "k=" << r.k << ": " << *r.error << '\n';
  }
  return os.str();
}

json sweep_json(std::span<const SweepRow> rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json row{{"k", r.k},
             {"generality", optional_number(r.generality)},
             {"simulatable", r.simulatable},
             {"generated", r.generated}};
    row["error"] = r.error ? json(*r.error) : json(nullptr);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace cfsim
