// One PASS/FAIL line per acceptance criterion; exits non-zero on any FAIL.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <random>
#include <regex>
#include <sstream>

#include "cfsim/errors.hpp"
#include "cfsim/metrics.hpp"
#include "cfsim/pipeline.hpp"
#include "cfsim/report.hpp"
#include "fixture.hpp"
#include "oracle.hpp"

using namespace cfsim;
using namespace cfsim::testing;
namespace fs = std::filesystem;

namespace {

struct Failure {
  std::string why;
};

void check(bool ok, const std::string& why) {
  if (!ok) throw Failure{why};
}

void near(double got, double want, double tol, const std::string& what) {
  std::ostringstream os;
  os.precision(17);
  os << what << ": got " << got << ", want " << want;
  check(std::abs(got - want) <= tol, os.str());
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void within(const Timer& t, double limit) {
  check(t.seconds() < limit, "took " + std::to_string(t.seconds()) + " s, limit " + std::to_string(limit));
}

std::vector<ReportOptions> thresholds_for(const AnnotatorId& judge) {
  std::vector<ReportOptions> out;
  for (double th : {1.0, 0.8, 0.5}) {
    ReportOptions o;
    o.threshold = th;
    o.annotator = judge;
    out.push_back(o);
  }
  return out;
}

void metrics_oracle() {
  Timer t;
  std::mt19937_64 rng(20240611);
  for (int trial = 0; trial < 50; ++trial) {
    auto run = random_run(rng, 5, 5, 6);
    for (const auto& opts : thresholds_for(run.judge)) {
      const auto want = oracle_report(run.graph, run.judge, run.embeddings, opts.threshold);
      const auto tag = "trial " + std::to_string(trial) + " threshold " + std::to_string(opts.threshold);
      if (!want.precision) {
        bool threw = false;
        try {
          aggregate_report(run.graph, opts, run.embeddings);
        } catch (const EmptyReportError&) {
          threw = true;
        }
        check(threw, tag + ": expected an empty report");
        continue;
      }
      auto got = aggregate_report(run.graph, opts, run.embeddings);
      near(got.precision, *want.precision, 1e-9, tag + " precision");
      check(got.generality.has_value() == want.generality.has_value(), tag + " generality presence");
      if (want.generality) near(*got.generality, *want.generality, 1e-9, tag + " generality");
      check(got.n_simulatable == want.n_simulatable, tag + " simulatable count");
      check(got.n_samples == want.n_precision_samples, tag + " precision sample count");
      check(got.buckets == want.buckets, tag + " buckets");
    }
  }
  within(t, 5.0);
}

void kappa() {
  auto k = cohen_kappa(std::vector<bool>{true, true, false, false}, std::vector<bool>{true, false, false, false});
  check(k.defined() && *k.kappa == 0.5, "fixture kappa is not exactly 0.5");
  std::vector<bool> mixed{true, false, true, true, false};
  auto self = cohen_kappa(mixed, mixed);
  check(self.defined() && *self.kappa == 1.0, "kappa(a, a) != 1");
  std::vector<bool> ones(4, true);
  check(!cohen_kappa(ones, ones).defined(), "constant agreement should be undefined");
}

EmbeddingVector vec(std::vector<double> v) { return EmbeddingVector{std::move(v), "fixture"}; }

void generality_fixture() {
  std::vector<EmbeddingVector> three{vec({1, 0}), vec({0, 1}), vec({1, 0})};
  // Pairs: (1,0)-(0,1) = 0, (1,0)-(1,0) = 1, (0,1)-(1,0) = 0; mean 1/3.
  near(generality(three), 2.0 / 3.0, 1e-9, "three-vector generality");
  std::vector<EmbeddingVector> same{vec({0.3, 0.4}), vec({0.3, 0.4}), vec({0.3, 0.4})};
  near(generality(same), 0.0, 1e-9, "identical vectors");
  std::vector<EmbeddingVector> ortho{vec({1, 0}), vec({0, 1})};
  near(generality(ortho), 1.0, 1e-9, "orthogonal pair");
}

LoadedRun replay(const std::string& config, const fs::path& root, const RunOptions& opts = {}) {
  auto cfg = load_run_config(fixture_dir() / config);
  auto manifest = run_full(cfg, fixture_inputs(cfg.task), PipelineEnv{root, nullptr, nullptr}, opts);
  return load_run(root, manifest.run_id);
}

void sanity_precision() {
  Timer t;
  TempDir dir;
  auto run = replay("medical_sanity.json", dir.path());
  check(!run.graph.outputs.empty(), "no outputs generated");
  for (const auto& o : run.graph.outputs) check(o.conditioned_on_explanation, "unconditioned output");
  auto r = aggregate_report(run.graph, {}, {});
  check(r.n_samples > 0, "no simulatable samples to score");
  check(r.precision == 1.0, "precision " + std::to_string(r.precision));
  check(fixed2(r.precision) == "1.00", "rendered precision " + fixed2(r.precision));
  within(t, 10.0);
}

void buckets() {
  const std::array<std::string, 6> want{"1.00", "0.80–0.99", "0.60–0.79",
                                        "0.40–0.59", "0.20–0.39", "0.00–0.19"};
  check(bucket_labels() == want, "bucket labels differ");
  // Boundaries as exact unit fractions, e.g. 4 of 5 present.
  const std::vector<std::pair<double, std::size_t>> cases = {
      {1.0, 0},       {5.0 / 6, 1},  {4.0 / 5, 1}, {0.99, 1},     {0.7999, 2}, {3.0 / 5, 2},
      {2.0 / 3, 2},   {0.5999, 3},   {2.0 / 5, 3}, {1.0 / 2, 3},  {0.3999, 4}, {1.0 / 5, 4},
      {1.0 / 3, 4},   {1.0 / 6, 5},  {0.0, 5},     {0.1999, 5}};
  for (const auto& [p, idx] : cases) {
    check(bucket_index(p) == idx, "bucket_index(" + std::to_string(p) + ") = " +
                                      std::to_string(bucket_index(p)) + ", want " + std::to_string(idx));
  }
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    auto run = random_run(rng);
    ReportOptions opts;
    opts.annotator = run.judge;
    auto r = score_run(run.graph, opts, run.embeddings);
    std::size_t total = 0;
    for (auto n : r.buckets) total += n;
    check(total == r.n_scored && total == r.samples.size(),
          "trial " + std::to_string(trial) + ": bucket counts sum to " + std::to_string(total) +
              " of " + std::to_string(r.n_scored));
  }
}

void audit_report() {
  std::vector<ParseAudit> audits;
  auto add = [&](int n, std::optional<ParseErrorKind> kind) {
    for (int i = 0; i < n; ++i) {
      ParseAudit a;
      a.explanation_id = "m" + std::to_string(audits.size());
      a.parsed_ok = !kind.has_value();
      a.error_kind = kind;
      audits.push_back(a);
    }
  };
  add(8, ParseErrorKind::missing_extraction);
  add(4, ParseErrorKind::incorrect_extraction);
  add(1, ParseErrorKind::missing_and_incorrect);
  add(17, std::nullopt);
  auto s = summarize_audits(audits);
  check(s.n_audited == 30, "audited " + std::to_string(s.n_audited));
  check(s.accuracy && fixed2(*s.accuracy) == "0.57", "accuracy " + fixed2(s.accuracy));
  const auto table = audit_table(s, TaskKind::medical_suggestion);
  auto row = [&](const std::string& label, const std::string& value) {
    std::regex re("(^|\n)\\s*" + label + "\\s+" + value + "\n");
    check(std::regex_search(table, re), "row '" + label + "' with " + value + " missing:\n" + table);
  };
  row("Accuracy", "0\\.57");
  row("Missing Extraction", "8");
  row("Incorrect Extraction", "4");
  row("Missing and Incorrect Extraction", "1");
  check(table.find("(n=30)") != std::string::npos, "column header lacks n=30");
}

void routing() {
  for (const auto* config : {"medical_replay.json", "medical_sanity.json"}) {
    TempDir dir;
    auto run = replay(config, dir.path());
    std::map<std::string, UnitCategory> category;
    for (const auto& u : run.graph.units) category[u.unit_id] = u.category;
    std::size_t checked = 0;
    for (const auto& a : run.graph.annotations) {
      const auto c = category.at(a.unit_id);
      if (a.target == Target::counterfactual) {
        check(c != UnitCategory::suggestion, std::string(config) + ": simulatability verdict on " + a.unit_id);
      } else {
        check(c != UnitCategory::patient_information,
              std::string(config) + ": precision verdict on " + a.unit_id);
      }
      ++checked;
    }
    check(checked > 0, std::string(config) + ": no annotations generated");
  }
}

std::string without_timestamps(const fs::path& p) {
  static const std::regex ts(R"re("(created_at|started_at|finished_at)":"[^"]*")re");
  std::string text = read_text(p);
  return std::regex_replace(text, ts, "\"$1\":\"\"");
}

void determinism() {
  Timer t;
  for (const auto* config : {"news_replay.json", "medical_replay.json"}) {
    TempDir a, b;
    auto ra = replay(config, a.path());
    auto rb = replay(config, b.path());
    check(ra.manifest->run_id == rb.manifest->run_id, "run ids differ");
    const auto& id = ra.manifest->run_id;
    for (auto kind : {RecordKind::explanations, RecordKind::units, RecordKind::counterfactuals,
                      RecordKind::outputs, RecordKind::annotations, RecordKind::audits}) {
      const auto f = file_name(kind);
      const auto fa = without_timestamps(a.path() / id / f);
      check(!fa.empty() || kind == RecordKind::audits, std::string(config) + ": empty " + f);
      check(fa == without_timestamps(b.path() / id / f), std::string(config) + ": " + f + " differs");
    }
  }
  within(t, 10.0);
}

std::map<std::string, std::size_t> record_counts(const RecordGraph& g) {
  return {{"explanations", g.explanations.size()}, {"units", g.units.size()},
          {"counterfactuals", g.counterfactuals.size()}, {"outputs", g.outputs.size()},
          {"annotations", g.annotations.size()}, {"audits", g.audits.size()}};
}

void resumability() {
  for (const auto* config : {"news_replay.json", "medical_replay.json"}) {
    TempDir full_dir;
    auto full = replay(config, full_dir.path());
    const auto want = record_counts(full.graph);
    for (auto stage : kPipelineStages) {
      TempDir dir;
      RunOptions stop;
      stop.stop_after = stage;
      auto partial = replay(config, dir.path(), stop);
      check(partial.manifest->completed_stages.back() == to_string(stage),
            "did not stop after " + to_string(stage));
      auto resumed = replay(config, dir.path());
      const auto where = std::string(config) + " killed after " + to_string(stage);
      check(record_counts(resumed.graph) == want, where + ": record counts differ");
      check(resumed.manifest->stage_counts == full.manifest->stage_counts, where + ": stage counts differ");
      check(resumed.manifest->completed_stages.size() == kPipelineStages.size(), where + ": incomplete");
    }
  }
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void()>>> criteria = {
      {"metrics oracle equivalence (50 random runs, 1e-9, <5s)", metrics_oracle},
      {"kappa correctness", kappa},
      {"generality fixture", generality_fixture},
      {"sanity-conditioned precision is 1.00 (<10s)", sanity_precision},
      {"bucket labels, boundaries and totals", buckets},
      {"medical parse audit report (accuracy 0.57, 8/4/1)", audit_report},
      {"medical routing of verdicts", routing},
      {"replay determinism of record files (<10s)", determinism},
      {"resumability at every stage", resumability},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    try {
      fn();
      std::cout << "PASS " << name << "\n";
    } catch (const Failure& f) {
      ++failed;
      std::cout << "FAIL " << name << ": " << f.why << "\n";
    } catch (const std::exception& e) {
      ++failed;
      std::cout << "FAIL " << name << ": exception: " << e.what() << "\n";
    }
  }
  return failed == 0 ? 0 : 1;
}
