#include "cfsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <tuple>
#include <unordered_map>

#include "cfsim/errors.hpp"

namespace cfsim {

double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

double mean(std::span<const double> xs) {
  if (xs.empty()) throw DomainError("mean of an empty set");
  return pairwise_sum(xs) / static_cast<double>(xs.size());
}

namespace {

// Fraction of units with a true verdict for `target`.
double unit_fraction(std::span<const AtomicUnit> units,
                     std::span<const UnitAnnotation> annotations, Target target) {
  if (units.empty()) throw DegenerateSampleError("sample has no relevant units");
  std::unordered_map<std::string_view, bool> verdicts;
  for (const auto& a : annotations) {
    if (a.target != target) continue;
    auto [it, fresh] = verdicts.emplace(a.unit_id, a.verdict);
    if (!fresh && it->second != a.verdict) {
      throw ValidationError("contradictory verdicts for unit " + a.unit_id);
    }
  }
  std::size_t present = 0;
  for (const auto& u : units) {
    auto it = verdicts.find(u.unit_id);
    if (it == verdicts.end()) {
      throw IncompleteAnnotationError("no " + to_string(target) + " verdict for unit " +
                                      u.unit_id);
    }
    if (it->second) ++present;
  }
  return static_cast<double>(present) / static_cast<double>(units.size());
}

}  // namespace

double presence_proportion(std::span<const AtomicUnit> units,
                           std::span<const UnitAnnotation> annotations) {
  return unit_fraction(units, annotations, Target::counterfactual);
}

bool is_simulatable(std::span<const AtomicUnit> units,
                    std::span<const UnitAnnotation> annotations, double threshold) {
  return presence_proportion(units, annotations) >= threshold;
}

double sample_precision(std::span<const AtomicUnit> units,
                        std::span<const UnitAnnotation> annotations) {
  return unit_fraction(units, annotations, Target::counterfactual_output);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine of vectors with dimensions " + std::to_string(a.size()) +
                         " and " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine similarity of a zero vector");
  double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
  return cosine_similarity(std::span<const double>(a.values),
                           std::span<const double>(b.values));
}

double generality(std::span<const EmbeddingVector> simulatable_cfs,
                  const SimilarityConfig& /*cfg*/) {
  if (simulatable_cfs.size() < 2) {
    throw DegenerateSampleError("generality needs at least two simulatable counterfactuals");
  }
  std::vector<double> sims;
  sims.reserve(simulatable_cfs.size() * (simulatable_cfs.size() - 1) / 2);
  for (std::size_t i = 0; i < simulatable_cfs.size(); ++i) {
    for (std::size_t j = i + 1; j < simulatable_cfs.size(); ++j) {
      sims.push_back(cosine_similarity(simulatable_cfs[i], simulatable_cfs[j]));
    }
  }
  return 1.0 - mean(sims);
}

KappaResult cohen_kappa(const std::vector<bool>& a, const std::vector<bool>& b) {
  if (a.size() != b.size()) throw ValidationError("kappa inputs differ in length");
  if (a.empty()) throw ValidationError("kappa needs at least one paired item");
  // Integer counts keep p_o and p_e exact until the final division.
  long long n = static_cast<long long>(a.size());
  long long agree = 0, a_yes = 0, b_yes = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    agree += a[i] == b[i];
    a_yes += a[i];
    b_yes += b[i];
  }
  const long long chance = a_yes * b_yes + (n - a_yes) * (n - b_yes);  // p_e * n^2
  KappaResult r;
  r.n = a.size();
  if (chance == n * n) return r;
  r.kappa = static_cast<double>(agree * n - chance) / static_cast<double>(n * n - chance);
  return r;
}

KappaResult cohen_kappa(std::span<const UnitAnnotation> a, std::span<const UnitAnnotation> b,
                        std::optional<Target> only_target) {
  using Item = std::tuple<std::string_view, std::string_view, Target>;
  std::map<Item, bool> left;
  for (const auto& x : a) {
    if (only_target && x.target != *only_target) continue;
    left[{x.cf_id, x.unit_id, x.target}] = x.verdict;
  }
  std::vector<bool> va, vb;
  std::set<Item> seen;
  for (const auto& y : b) {
    if (only_target && y.target != *only_target) continue;
    Item key{y.cf_id, y.unit_id, y.target};
    auto it = left.find(key);
    if (it == left.end() || !seen.insert(key).second) continue;
    va.push_back(it->second);
    vb.push_back(y.verdict);
  }
  if (va.empty()) throw ValidationError("annotators share no annotated items");
  return cohen_kappa(va, vb);
}

const std::array<std::string, kBucketCount>& bucket_labels() {
  static const std::array<std::string, kBucketCount> labels = {
      "1.00",          "0.80–0.99", "0.60–0.79",
      "0.40–0.59", "0.20–0.39", "0.00–0.19"};
  return labels;
}

std::size_t bucket_index(double p) {
  if (p >= 1.0) return 0;
  if (p >= 0.8) return 1;
  if (p >= 0.6) return 2;
  if (p >= 0.4) return 3;
  if (p >= 0.2) return 4;
  return 5;
}

BucketCounts bucket_distribution(std::span<const SampleScore> scores) {
  BucketCounts counts{};
  for (const auto& s : scores) ++counts[bucket_index(s.presence_proportion)];
  return counts;
}

namespace {

std::map<AnnotatorId, std::vector<UnitAnnotation>> by_annotator(
    std::span<const UnitAnnotation> annotations) {
  std::map<AnnotatorId, std::vector<UnitAnnotation>> out;
  for (const auto& a : annotations) out[a.annotator].push_back(a);
  return out;
}

}  // namespace

std::vector<KappaCell> kappa_matrix(std::span<const UnitAnnotation> annotations,
                                    KappaSplit split) {
  auto groups = by_annotator(annotations);
  std::vector<KappaCell> cells;
  for (auto i = groups.begin(); i != groups.end(); ++i) {
    for (auto j = std::next(i); j != groups.end(); ++j) {
      std::vector<std::optional<Target>> targets;
      if (split == KappaSplit::pooled) {
        targets = {std::nullopt};
      } else {
        targets = {Target::counterfactual, Target::counterfactual_output};
      }
      for (auto t : targets) {
        try {
          cells.push_back({i->first, j->first, cohen_kappa(i->second, j->second, t), t});
        } catch (const ValidationError&) {
          // no overlap for this pair
        }
      }
    }
  }
  return cells;
}

KappaAverages kappa_averages(std::span<const KappaCell> cells) {
  std::vector<double> hh, hl;
  for (const auto& c : cells) {
    if (!c.result.defined()) continue;
    const bool a_human = c.a.kind == AnnotatorKind::human;
    const bool b_human = c.b.kind == AnnotatorKind::human;
    if (a_human && b_human) {
      hh.push_back(*c.result.kappa);
    } else if (a_human != b_human) {
      hl.push_back(*c.result.kappa);
    }
  }
  KappaAverages out;
  if (!hh.empty()) out.human_human = mean(hh);
  if (!hl.empty()) out.human_llm = mean(hl);
  return out;
}

AnnotatorId resolve_report_annotator(const RecordGraph& graph,
                                     const std::optional<AnnotatorId>& requested) {
  std::set<AnnotatorId> present;
  for (const auto& a : graph.annotations) present.insert(a.annotator);
  if (requested) {
    if (!present.contains(*requested)) {
      throw NotFoundError("annotator " + requested->str() + " has no annotations in this run");
    }
    return *requested;
  }
  if (present.empty()) throw EmptyReportError("run has no annotations");
  if (present.size() == 1) return *present.begin();
  std::vector<AnnotatorId> judges;
  for (const auto& a : present) {
    if (a.kind == AnnotatorKind::llm_judge) judges.push_back(a);
  }
  if (judges.size() == 1) return judges.front();
  std::string names;
  for (const auto& a : present) names += (names.empty() ? "" : ", ") + a.str();
  throw ValidationError("several annotators in run (" + names + "); choose one");
}

EvalReport score_run(const RecordGraph& graph, const ReportOptions& opts,
                     const EmbeddingTable& embeddings) {
  if (!(opts.threshold >= 0.0 && opts.threshold <= 1.0)) {
    throw ValidationError("simulatability threshold must lie in [0, 1]");
  }
  EvalReport report;
  report.threshold = opts.threshold;
  report.annotator = resolve_report_annotator(graph, opts.annotator);
  report.n_generated = graph.counterfactuals.size();
  if (!graph.explanations.empty()) {
    report.task = graph.explanations.front().task;
    report.method = graph.explanations.front().method;
    report.model_id = graph.explanations.front().model_id;
  }

  std::unordered_map<std::string, std::vector<AtomicUnit>> units_of;
  for (const auto& u : graph.units) units_of[u.explanation_id].push_back(u);
  std::unordered_map<std::string, std::vector<const Counterfactual*>> cfs_of;
  for (const auto& c : graph.counterfactuals) cfs_of[c.explanation_id].push_back(&c);
  std::unordered_map<std::string, std::vector<UnitAnnotation>> verdicts_of;
  for (const auto& a : graph.annotations) {
    if (a.annotator == report.annotator) verdicts_of[a.cf_id].push_back(a);
  }

  std::vector<double> explanation_precisions;
  std::vector<double> explanation_generalities;
  for (const auto& e : graph.explanations) {
    auto& cfs = cfs_of[e.id];
    std::stable_sort(cfs.begin(), cfs.end(),
                     [](const auto* x, const auto* y) { return x->index < y->index; });
    const auto& units = units_of[e.id];
    const auto sim_units = relevant_units(e.task, units, Target::counterfactual);
    const auto out_units = relevant_units(e.task, units, Target::counterfactual_output);

    std::vector<double> precisions;
    std::vector<EmbeddingVector> simulatable_vectors;
    for (const auto* cf : cfs) {
      const auto& verdicts = verdicts_of[cf->cf_id];
      SampleScore s;
      s.explanation_id = e.id;
      s.cf_id = cf->cf_id;
      try {
        s.presence_proportion = presence_proportion(sim_units, verdicts);
      } catch (const DegenerateSampleError&) {
        report.notes.push_back("sample " + cf->cf_id + " excluded: no simulatability units");
        continue;
      } catch (const IncompleteAnnotationError& ex) {
        report.notes.push_back("sample " + cf->cf_id + " excluded: " + ex.what());
        continue;
      }
      s.simulatable = s.presence_proportion >= opts.threshold;
      if (s.simulatable) {
        ++report.n_simulatable;
        try {
          s.precision = sample_precision(out_units, verdicts);
          precisions.push_back(*s.precision);
        } catch (const DegenerateSampleError&) {
          report.notes.push_back("sample " + cf->cf_id + " has no precision units");
        } catch (const IncompleteAnnotationError& ex) {
          report.notes.push_back("sample " + cf->cf_id + " precision missing: " + ex.what());
        }
        auto emb = embeddings.find(cf->cf_id);
        if (emb != embeddings.end()) {
          simulatable_vectors.push_back(emb->second);
        } else {
          report.notes.push_back("no embedding for " + cf->cf_id);
        }
      }
      report.samples.push_back(std::move(s));
    }

    if (!precisions.empty()) {
      explanation_precisions.push_back(mean(precisions));
      report.n_samples += precisions.size();
    }
    if (simulatable_vectors.size() >= 2) {
      explanation_generalities.push_back(generality(simulatable_vectors, opts.similarity));
    } else {
      report.notes.push_back("explanation " + e.id +
                             " excluded from generality: fewer than two simulatable "
                             "counterfactuals");
    }
  }

  report.n_scored = report.samples.size();
  report.buckets = bucket_distribution(report.samples);
  report.kappa = kappa_matrix(graph.annotations, opts.kappa_split);
  report.n_generality_explanations = explanation_generalities.size();
  if (!explanation_generalities.empty()) report.generality = mean(explanation_generalities);
  report.n_explanations = explanation_precisions.size();
  if (!explanation_precisions.empty()) report.precision = mean(explanation_precisions);
  return report;
}

EvalReport aggregate_report(const RecordGraph& graph, const ReportOptions& opts,
                            const EmbeddingTable& embeddings) {
  auto report = score_run(graph, opts, embeddings);
  if (report.n_explanations == 0) {
    throw EmptyReportError(
        "no explanation has a simulatable counterfactual with a precision score");
  }
  return report;
}

AuditSummary summarize_audits(std::span<const ParseAudit> audits) {
  std::map<std::string, const ParseAudit*> latest;
  for (const auto& a : audits) {
    if (!a.pending()) latest[a.explanation_id] = &a;
  }
  AuditSummary s;
  for (const auto& [id, a] : latest) {
    ++s.n_audited;
    if (*a->parsed_ok) {
      ++s.n_ok;
      continue;
    }
    switch (a->error_kind.value_or(ParseErrorKind::missing_extraction)) {
      case ParseErrorKind::missing_extraction: ++s.missing; break;
      case ParseErrorKind::incorrect_extraction: ++s.incorrect; break;
      case ParseErrorKind::missing_and_incorrect: ++s.missing_and_incorrect; break;
    }
  }
  if (s.n_audited > 0) {
    s.accuracy = static_cast<double>(s.n_ok) / static_cast<double>(s.n_audited);
  }
  return s;
}

}  // namespace cfsim
