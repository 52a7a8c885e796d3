#pragma once

// Simulatability, precision, generality, presence buckets, Cohen's kappa
// and the per-run aggregate report. Everything here is a pure function of
// its inputs.

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfsim/gateway.hpp"
#include "cfsim/model.hpp"

namespace cfsim {

// Pairwise (cascade) summation.
double pairwise_sum(std::span<const double> xs);
// Arithmetic mean via pairwise_sum. Throws DomainError on empty input.
double mean(std::span<const double> xs);

struct SimilarityConfig {
  enum class Metric { cosine };
  Metric metric = Metric::cosine;
  std::string embed_model_id;
};

// Fraction of `units` judged present in the counterfactual. Only
// counterfactual-target verdicts whose unit is in `units` are read.
// Throws DegenerateSampleError for zero units, IncompleteAnnotationError
// when a unit has no verdict, ValidationError on contradictory duplicates.
double presence_proportion(std::span<const AtomicUnit> units,
                           std::span<const UnitAnnotation> annotations);

// presence_proportion >= threshold; 1.0 is the strict all-units rule.
bool is_simulatable(std::span<const AtomicUnit> units,
                    std::span<const UnitAnnotation> annotations, double threshold = 1.0);

// Fraction of `units` judged present in the counterfactual output.
double sample_precision(std::span<const AtomicUnit> units,
                        std::span<const UnitAnnotation> annotations);

// dot(a,b) / (|a| |b|). Throws DimensionError on length mismatch and
// DomainError for a zero vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b);

// One minus the mean cosine similarity over all unordered pairs of the
// explanation's simulatable counterfactuals. Throws DegenerateSampleError
// for fewer than two vectors.
double generality(std::span<const EmbeddingVector> simulatable_cfs,
                  const SimilarityConfig& cfg = {});

struct KappaResult {
  std::optional<double> kappa;  // empty when chance agreement is 1
  std::size_t n = 0;
  bool defined() const { return kappa.has_value(); }
};

// Cohen's kappa over paired binary verdicts. Throws ValidationError for
// unequal or empty inputs.
KappaResult cohen_kappa(const std::vector<bool>& a, const std::vector<bool>& b);

// Pairs two annotators' verdicts by (cf_id, unit_id, target); only items
// both annotated count. `only_target` restricts to one target.
KappaResult cohen_kappa(std::span<const UnitAnnotation> a, std::span<const UnitAnnotation> b,
                        std::optional<Target> only_target = std::nullopt);

// Presence-proportion buckets. Index 0 is exactly 1.00; the rest are
// upper-exclusive 0.20-wide ranges downward.
inline constexpr std::size_t kBucketCount = 6;
using BucketCounts = std::array<std::size_t, kBucketCount>;
const std::array<std::string, kBucketCount>& bucket_labels();
std::size_t bucket_index(double proportion);

struct SampleScore {
  std::string explanation_id;
  std::string cf_id;
  double presence_proportion = 0.0;
  bool simulatable = false;
  std::optional<double> precision;
  bool operator==(const SampleScore&) const = default;
};

BucketCounts bucket_distribution(std::span<const SampleScore> scores);

struct KappaCell {
  AnnotatorId a;
  AnnotatorId b;
  KappaResult result;
  std::optional<Target> target;  // set in per-target breakdowns
};

enum class KappaSplit { pooled, by_target };

// All annotator pairs with at least one jointly annotated item, pairs
// ordered by annotator id.
std::vector<KappaCell> kappa_matrix(std::span<const UnitAnnotation> annotations,
                                    KappaSplit split = KappaSplit::pooled);

struct KappaAverages {
  std::optional<double> human_human;
  std::optional<double> human_llm;
};
KappaAverages kappa_averages(std::span<const KappaCell> cells);

struct ReportOptions {
  double threshold = 1.0;
  // Whose verdicts drive the scores. Unset: the only annotator in the run,
  // or the only llm_judge when several annotators exist.
  std::optional<AnnotatorId> annotator;
  KappaSplit kappa_split = KappaSplit::pooled;
  SimilarityConfig similarity;
};

struct EvalReport {
  TaskKind task = TaskKind::news_summarization;
  ExplanationMethod method = ExplanationMethod::chain_of_thought;
  std::string model_id;
  AnnotatorId annotator;
  double threshold = 1.0;
  std::size_t n_explanations = 0;  // contributing to precision
  std::size_t n_samples = 0;       // simulatable samples contributing to precision
  std::size_t n_scored = 0;        // samples with a presence proportion
  std::size_t n_simulatable = 0;
  std::size_t n_generated = 0;     // counterfactuals in the run
  std::optional<double> generality;
  std::size_t n_generality_explanations = 0;
  double precision = 0.0;
  BucketCounts buckets{};
  std::vector<KappaCell> kappa;
  std::vector<SampleScore> samples;
  std::vector<std::string> notes;  // exclusions and other non-fatal events
};

// cf_id -> embedding of the counterfactual text.
using EmbeddingTable = std::map<std::string, EmbeddingVector, std::less<>>;

AnnotatorId resolve_report_annotator(const RecordGraph& graph,
                                     const std::optional<AnnotatorId>& requested);

// Same as aggregate_report but never throws EmptyReportError; precision is
// 0 with n_explanations == 0 when nothing qualifies.
EvalReport score_run(const RecordGraph& graph, const ReportOptions& opts,
                     const EmbeddingTable& embeddings);

// Per sample, then per explanation, then an unweighted mean across
// explanations. Throws EmptyReportError when no explanation has a
// simulatable counterfactual with a precision score.
EvalReport aggregate_report(const RecordGraph& graph, const ReportOptions& opts,
                            const EmbeddingTable& embeddings);

struct AuditSummary {
  std::size_t n_audited = 0;
  std::size_t n_ok = 0;
  std::size_t missing = 0;
  std::size_t incorrect = 0;
  std::size_t missing_and_incorrect = 0;
  std::optional<double> accuracy;  // n_ok / n_audited
};

// Latest non-pending audit per explanation.
AuditSummary summarize_audits(std::span<const ParseAudit> audits);

}  // namespace cfsim
