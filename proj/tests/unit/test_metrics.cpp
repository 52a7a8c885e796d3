#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfsim/errors.hpp"
#include "cfsim/metrics.hpp"
#include "cfsim/report.hpp"
#include "oracle.hpp"

using namespace cfsim;

namespace {

const AnnotatorId kJudge{AnnotatorKind::llm_judge, "j"};

AtomicUnit unit(int ord, UnitCategory cat = UnitCategory::general, const std::string& eid = "e") {
  return AtomicUnit{make_unit_id(eid, ord), eid, "u" + std::to_string(ord), cat, ord};
}

UnitAnnotation verdict(const AtomicUnit& u, bool v, Target t = Target::counterfactual,
                       const std::string& cf = "e/cf0", AnnotatorId who = kJudge) {
  return UnitAnnotation{who, cf, u.unit_id, t, v, {}};
}

std::vector<UnitAnnotation> labels(const AnnotatorId& who, const std::vector<bool>& vs) {
  std::vector<UnitAnnotation> out;
  for (std::size_t i = 0; i < vs.size(); ++i) {
    out.push_back(UnitAnnotation{who, "cf" + std::to_string(i), "u", Target::counterfactual, vs[i], {}});
  }
  return out;
}

// One news explanation per entry; each inner vector lists, per
// counterfactual, the (simulatability, precision) verdicts of a single
// unit.
RecordGraph news_graph(const std::vector<std::vector<std::pair<bool, bool>>>& spec) {
  RecordGraph g;
  for (std::size_t e = 0; e < spec.size(); ++e) {
    ExplanationRecord ex;
    ex.id = "e" + std::to_string(e);
    ex.input_text = ex.output_text = ex.explanation_text = "x";
    ex.model_id = "m";
    g.explanations.push_back(ex);
    auto u = unit(0, UnitCategory::general, ex.id);
    g.units.push_back(u);
    for (std::size_t c = 0; c < spec[e].size(); ++c) {
      auto cf = make_cf_id(ex.id, static_cast<int>(c));
      g.counterfactuals.push_back(Counterfactual{cf, ex.id, "cf", static_cast<std::int64_t>(c)});
      g.outputs.push_back(CounterfactualOutput{cf, "out", false});
      g.annotations.push_back(verdict(u, spec[e][c].first, Target::counterfactual, cf));
      g.annotations.push_back(verdict(u, spec[e][c].second, Target::counterfactual_output, cf));
    }
  }
  return g;
}

}  // namespace

TEST(Mean, PairwiseSumMatchesExactTotals) {
  std::vector<double> xs(1000, 0.1);
  EXPECT_NEAR(pairwise_sum(xs), 100.0, 1e-12);
  EXPECT_DOUBLE_EQ(mean(std::vector<double>{1, 2, 3, 4}), 2.5);
  EXPECT_THROW(mean(std::vector<double>{}), DomainError);
}

TEST(Presence, FractionOfUnitsPresent) {
  std::vector<AtomicUnit> units = {unit(0), unit(1), unit(2), unit(3)};
  std::vector<UnitAnnotation> a = {verdict(units[0], true), verdict(units[1], true),
                                   verdict(units[2], false), verdict(units[3], true),
                                   verdict(units[0], false, Target::counterfactual_output)};
  EXPECT_DOUBLE_EQ(presence_proportion(units, a), 0.75);
  EXPECT_FALSE(is_simulatable(units, a));
  EXPECT_TRUE(is_simulatable(units, a, 0.75));
  EXPECT_DOUBLE_EQ(sample_precision({units.data(), 1}, a), 0.0);
}

TEST(Presence, ErrorsForDegenerateIncompleteAndContradictory) {
  std::vector<AtomicUnit> units = {unit(0), unit(1)};
  std::vector<UnitAnnotation> a = {verdict(units[0], true)};
  EXPECT_THROW(presence_proportion({}, a), DegenerateSampleError);
  EXPECT_THROW(presence_proportion(units, a), IncompleteAnnotationError);
  a.push_back(verdict(units[1], true));
  a.push_back(verdict(units[1], false));
  EXPECT_THROW(presence_proportion(units, a), ValidationError);
}

TEST(Cosine, HandValues) {
  std::vector<double> a{1, 1}, b{1, 0};
  EXPECT_NEAR(cosine_similarity(a, b), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-12);
  std::vector<double> z{0, 0}, c{1, 2, 3};
  EXPECT_THROW(cosine_similarity(a, z), DomainError);
  EXPECT_THROW(cosine_similarity(a, c), DimensionError);
}

TEST(Generality, ThreeVectorFixture) {
  // Pairs: (1,0)-(0,1) -> 0, (1,0)-(1,0) -> 1, (0,1)-(1,0) -> 0; mean 1/3.
  std::vector<EmbeddingVector> v = {{{1, 0}, "e"}, {{0, 1}, "e"}, {{1, 0}, "e"}};
  EXPECT_NEAR(generality(v), 2.0 / 3.0, 1e-9);
}

TEST(Generality, IdenticalAndOrthogonal) {
  std::vector<EmbeddingVector> same = {{{0.3, 0.4}, "e"}, {{0.3, 0.4}, "e"}, {{0.6, 0.8}, "e"}};
  EXPECT_NEAR(generality(same), 0.0, 1e-12);
  std::vector<EmbeddingVector> ortho = {{{1, 0}, "e"}, {{0, 1}, "e"}};
  EXPECT_NEAR(generality(ortho), 1.0, 1e-12);
  EXPECT_THROW(generality(std::vector<EmbeddingVector>{{{1, 0}, "e"}}), DegenerateSampleError);
}

TEST(Kappa, ContingencyFixture) {
  // p_o = 3/4; chance = 1/2*1/4 + 1/2*3/4 = 1/2; kappa = (3/4-1/2)/(1/2).
  std::vector<bool> a{true, true, false, false}, b{true, false, false, false};
  auto k = cohen_kappa(a, b);
  ASSERT_TRUE(k.defined());
  EXPECT_EQ(*k.kappa, 0.5);
  EXPECT_EQ(k.n, 4u);
}

TEST(Kappa, SelfAgreementAndDegenerateCase) {
  std::vector<bool> mixed{true, false, true, true, false};
  EXPECT_EQ(*cohen_kappa(mixed, mixed).kappa, 1.0);
  std::vector<bool> ones{true, true, true};
  EXPECT_FALSE(cohen_kappa(ones, ones).defined());
  std::vector<bool> shorter{true};
  EXPECT_THROW(cohen_kappa(mixed, shorter), ValidationError);
}

TEST(Kappa, PairsAnnotationsByItem) {
  const AnnotatorId a{AnnotatorKind::human, "a"}, b{AnnotatorKind::human, "b"};
  auto la = labels(a, {true, true, false, false, true});
  auto lb = labels(b, {true, false, false, false});
  auto k = cohen_kappa(la, lb);
  EXPECT_EQ(k.n, 4u);
  EXPECT_EQ(*k.kappa, 0.5);
}

TEST(Kappa, MatrixAndAverages) {
  const AnnotatorId h1{AnnotatorKind::human, "a"}, h2{AnnotatorKind::human, "b"};
  std::vector<UnitAnnotation> all;
  for (auto& x : labels(h1, {true, true, false, false})) all.push_back(x);
  for (auto& x : labels(h2, {true, false, false, false})) all.push_back(x);
  for (auto& x : labels(kJudge, {true, true, false, false})) all.push_back(x);
  auto cells = kappa_matrix(all);
  ASSERT_EQ(cells.size(), 3u);
  auto avg = kappa_averages(cells);
  EXPECT_EQ(*avg.human_human, 0.5);
  // h1-judge = 1.0, h2-judge = 0.5.
  EXPECT_EQ(*avg.human_llm, 0.75);
}

TEST(Buckets, LabelsAndBoundaries) {
  const auto& l = bucket_labels();
  EXPECT_EQ(l[0], "1.00");
  EXPECT_EQ(l[1], "0.80\xe2\x80\x93" "0.99");
  EXPECT_EQ(l[5], "0.00\xe2\x80\x93" "0.19");
  EXPECT_EQ(bucket_index(1.0), 0u);
  EXPECT_EQ(bucket_index(0.99), 1u);
  EXPECT_EQ(bucket_index(4.0 / 5.0), 1u);
  EXPECT_EQ(bucket_index(0.79), 2u);
  EXPECT_EQ(bucket_index(3.0 / 5.0), 2u);
  EXPECT_EQ(bucket_index(2.0 / 5.0), 3u);
  EXPECT_EQ(bucket_index(1.0 / 5.0), 4u);
  EXPECT_EQ(bucket_index(0.19), 5u);
  EXPECT_EQ(bucket_index(0.0), 5u);
}

TEST(Report, UnweightedMeanAcrossExplanations) {
  // e0: one simulatable sample, precision 1. e1: three, precision 0.
  auto g = news_graph({{{true, true}}, {{true, false}, {true, false}, {true, false}}});
  auto r = aggregate_report(g, {}, {});
  EXPECT_DOUBLE_EQ(r.precision, 0.5);
  EXPECT_EQ(r.n_explanations, 2u);
  EXPECT_EQ(r.n_samples, 4u);
}

TEST(Report, ThresholdChangesSampleCount) {
  RecordGraph g = news_graph({});
  ExplanationRecord ex;
  ex.id = "e";
  ex.input_text = ex.output_text = ex.explanation_text = "x";
  ex.model_id = "m";
  g.explanations.push_back(ex);
  std::vector<AtomicUnit> units;
  for (int i = 0; i < 5; ++i) units.push_back(unit(i));
  g.units = units;
  // cf0: 5/5 present; cf1: 4/5 present.
  for (int c = 0; c < 2; ++c) {
    auto cf = make_cf_id("e", c);
    g.counterfactuals.push_back(Counterfactual{cf, "e", "t", c});
    g.outputs.push_back(CounterfactualOutput{cf, "o", false});
    for (int i = 0; i < 5; ++i) {
      g.annotations.push_back(verdict(units[i], !(c == 1 && i == 0), Target::counterfactual, cf));
    }
    for (int i = 0; i < 5; ++i) {
      g.annotations.push_back(verdict(units[i], i < 3, Target::counterfactual_output, cf));
    }
  }
  ReportOptions strict, loose;
  loose.threshold = 0.8;
  EXPECT_EQ(aggregate_report(g, strict, {}).n_samples, 1u);
  EXPECT_EQ(aggregate_report(g, loose, {}).n_samples, 2u);
  EXPECT_THROW(aggregate_report(g, ReportOptions{1.5}, {}), ValidationError);
}

TEST(Report, NothingSimulatableIsEmptyReport) {
  auto g = news_graph({{{false, true}, {false, true}}});
  EXPECT_THROW(aggregate_report(g, {}, {}), EmptyReportError);
  auto scored = score_run(g, {}, {});
  EXPECT_EQ(scored.n_explanations, 0u);
  EXPECT_EQ(scored.n_scored, 2u);
}

TEST(Report, AnnotatorSelection) {
  auto g = news_graph({{{true, true}}});
  EXPECT_EQ(resolve_report_annotator(g, std::nullopt), kJudge);
  auto human = g.annotations;
  for (auto& a : human) a.annotator = {AnnotatorKind::human, "h"};
  g.annotations.insert(g.annotations.end(), human.begin(), human.end());
  EXPECT_EQ(resolve_report_annotator(g, std::nullopt), kJudge);
  auto judge2 = human;
  for (auto& a : judge2) a.annotator = {AnnotatorKind::llm_judge, "other"};
  g.annotations.insert(g.annotations.end(), judge2.begin(), judge2.end());
  EXPECT_THROW(resolve_report_annotator(g, std::nullopt), ValidationError);
  EXPECT_THROW(resolve_report_annotator(g, AnnotatorId{AnnotatorKind::human, "nobody"}), NotFoundError);
}

TEST(Audits, AccuracyAndBreakdown) {
  std::vector<ParseAudit> audits;
  auto add = [&](int n, std::optional<ParseErrorKind> kind) {
    for (int i = 0; i < n; ++i) {
      audits.push_back(ParseAudit{"e" + std::to_string(audits.size()), !kind, kind, std::nullopt});
    }
  };
  add(25, std::nullopt);
  add(1, ParseErrorKind::missing_extraction);
  audits.push_back(ParseAudit{"pending", std::nullopt, std::nullopt, std::nullopt});
  auto s = summarize_audits(audits);
  EXPECT_EQ(s.n_audited, 26u);
  EXPECT_EQ(fixed2(s.accuracy), "0.96");
}

TEST(Audits, LatestVerdictPerExplanationWins) {
  std::vector<ParseAudit> audits = {
      {"e1", false, ParseErrorKind::incorrect_extraction, std::nullopt},
      {"e1", true, std::nullopt, std::nullopt},
  };
  auto s = summarize_audits(audits);
  EXPECT_EQ(s.n_audited, 1u);
  EXPECT_EQ(s.n_ok, 1u);
}

TEST(OracleProperty, RandomRunsMatchBruteForce) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    auto run = cfsim::testing::random_run(rng);
    for (double threshold : {1.0, 0.8, 0.5}) {
      ReportOptions opts;
      opts.threshold = threshold;
      auto expected = cfsim::testing::oracle_report(run.graph, run.judge, run.embeddings, threshold);
      auto got = score_run(run.graph, opts, run.embeddings);
      EXPECT_EQ(got.n_simulatable, expected.n_simulatable);
      EXPECT_EQ(got.n_samples, expected.n_precision_samples);
      EXPECT_EQ(got.generality.has_value(), expected.generality.has_value());
      if (expected.generality) EXPECT_NEAR(*got.generality, *expected.generality, 1e-9);
      if (expected.precision) {
        EXPECT_NEAR(got.precision, *expected.precision, 1e-9);
      } else {
        EXPECT_EQ(got.n_explanations, 0u);
      }
      EXPECT_EQ(got.buckets, expected.buckets);
      std::size_t total = 0;
      for (auto c : got.buckets) total += c;
      EXPECT_EQ(total, got.n_scored);
    }
  }
}

TEST(OracleProperty, PrecisionAndPresenceStayInUnitInterval) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    auto run = cfsim::testing::random_run(rng);
    auto r = score_run(run.graph, {}, run.embeddings);
    EXPECT_GE(r.precision, 0.0);
    EXPECT_LE(r.precision, 1.0);
    for (const auto& s : r.samples) {
      EXPECT_GE(s.presence_proportion, 0.0);
      EXPECT_LE(s.presence_proportion, 1.0);
    }
  }
}

TEST(KappaProperty, SymmetricAndBounded) {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution coin(0.6);
  for (int trial = 0; trial < 300; ++trial) {
    std::size_t n = 1 + rng() % 30;
    std::vector<char> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = coin(rng);
      b[i] = coin(rng) ? a[i] : !a[i];
    }
    std::vector<bool> va(a.begin(), a.end()), vb(b.begin(), b.end());
    auto ab = cohen_kappa(va, vb), ba = cohen_kappa(vb, va);
    ASSERT_EQ(ab.defined(), ba.defined());
    if (!ab.defined()) continue;
    EXPECT_EQ(*ab.kappa, *ba.kappa);
    EXPECT_LE(*ab.kappa, 1.0);
    EXPECT_GE(*ab.kappa, -1.0);
  }
}
