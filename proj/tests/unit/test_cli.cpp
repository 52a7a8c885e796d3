#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cfsim/cli.hpp"
#include "cfsim/metrics.hpp"
#include "cfsim/store.hpp"
#include "fixture.hpp"

using namespace cfsim;
using namespace cfsim::testing;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cfsim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json expected(const std::string& config, int k = 3) {
  return json::parse(read_text(fixture_dir() / "expected.json"))[config][std::to_string(k)];
}

class CliTest : public ::testing::Test {
 protected:
  std::string store() const { return dir_.path().string(); }
  std::string fixture(const std::string& name) const { return (fixture_dir() / name).string(); }

  std::string run_replay(const std::string& config, const std::string& inputs) {
    auto r = cli({"--store", store(), "run", "--config", fixture(config), "--inputs", fixture(inputs)});
    EXPECT_EQ(r.code, 0) << r.err;
    return expected(config)["run_id"];
  }

  TempDir dir_;
};

}  // namespace

TEST(Cli, HelpDocumentsConfigSchema) {
  auto r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const auto* key : {"counterfactuals_per_explanation", "judge_model_id", "transport",
                          "sanity_conditioned", "seed"}) {
    EXPECT_NE(r.out.find(key), std::string::npos) << key;
  }
  EXPECT_NE(cli({"run", "--help"}).out.find("embed_model_id"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"report"}).code, 2);
  EXPECT_EQ(cli({"report", "r", "--format", "xml"}).code, 2);
}

TEST_F(CliTest, RunPrintsManifestSummary) {
  auto r = cli({"--store", store(), "run", "--config", fixture("news_replay.json"), "--inputs",
                fixture("news_inputs.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  auto e = expected("news_replay.json");
  EXPECT_NE(r.out.find("run_id: " + e["run_id"].get<std::string>()), std::string::npos);
  EXPECT_NE(r.out.find("annotation: " + std::to_string(e["annotations"].get<int>()) + " ok, 0 failed"),
            std::string::npos)
      << r.out;
  EXPECT_NE(r.out.find("status: complete"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_.path() / e["run_id"].get<std::string>() / "manifest.json"));
}

TEST_F(CliTest, ReportFormats) {
  auto id = run_replay("news_replay.json", "news_inputs.jsonl");
  auto e = expected("news_replay.json");

  auto j = cli({"--store", store(), "report", id, "--format", "json"});
  ASSERT_EQ(j.code, 0) << j.err;
  auto report = json::parse(j.out);
  EXPECT_EQ(report["n_simulatable"], e["simulatable"]);
  EXPECT_EQ(report["n_generated"], e["counterfactuals"]);
  EXPECT_EQ(report["n_explanations"].get<int>() > 0, true);
  EXPECT_TRUE(report["generality"].is_number());
  std::size_t bucket_total = 0;
  for (const auto& [label, n] : report["buckets"].items()) bucket_total += n.get<std::size_t>();
  EXPECT_EQ(bucket_total, report["n_scored"].get<std::size_t>());

  auto table = cli({"--store", store(), "report", id});
  ASSERT_EQ(table.code, 0);
  for (const auto* heading : {"Task", "Method", "Model", "# Expl", "# Samples", "Generality", "Precision",
                              bucket_labels()[1].c_str(), "Total"}) {
    EXPECT_NE(table.out.find(heading), std::string::npos) << heading;
  }

  auto csv = cli({"--store", store(), "report", id, "--format", "csv"});
  ASSERT_EQ(csv.code, 0);
  EXPECT_EQ(csv.out.rfind("explanation_id,cf_id,presence_proportion,simulatable,precision\n", 0), 0u);
  EXPECT_EQ(std::count(csv.out.begin(), csv.out.end(), '\n'), 1 + e["counterfactuals"].get<int>());
}

TEST_F(CliTest, LowerThresholdAdmitsMoreSamples) {
  auto id = run_replay("news_replay.json", "news_inputs.jsonl");
  auto strict = json::parse(cli({"--store", store(), "report", id, "--format", "json"}).out);
  auto loose = json::parse(
      cli({"--store", store(), "report", id, "--format", "json", "--threshold", "0.5"}).out);
  EXPECT_GE(loose["n_simulatable"].get<int>(), strict["n_simulatable"].get<int>());
  EXPECT_EQ(loose["threshold"], 0.5);
  std::size_t at_least_half = 0;
  for (const auto& s : strict["samples"]) at_least_half += s["presence_proportion"].get<double>() >= 0.5;
  EXPECT_EQ(loose["n_simulatable"].get<std::size_t>(), at_least_half);
}

TEST_F(CliTest, KappaAgainstJudge) {
  auto id = run_replay("news_replay.json", "news_inputs.jsonl");
  EXPECT_EQ(cli({"--store", store(), "kappa", id}).code, 1);

  // A human who copies the judge, except for the first verdict.
  RunStore run(dir_.path(), id);
  auto judge = run.load().graph.annotations;
  std::vector<UnitAnnotation> human;
  long long n = 0, agree = 0, judge_yes = 0, human_yes = 0;
  for (std::size_t i = 0; i < judge.size(); ++i) {
    UnitAnnotation a = judge[i];
    a.annotator = {AnnotatorKind::human, "alice"};
    if (i == 0) a.verdict = !a.verdict;
    human.push_back(a);
    ++n;
    agree += a.verdict == judge[i].verdict;
    judge_yes += judge[i].verdict;
    human_yes += a.verdict;
  }
  run.append(std::span<const UnitAnnotation>(human));
  const double po = double(agree) / double(n);
  const double pe = (double(judge_yes) * double(human_yes) + double(n - judge_yes) * double(n - human_yes)) /
                    (double(n) * double(n));
  const double want = (po - pe) / (1 - pe);

  auto r = cli({"--store", store(), "kappa", id, "--format", "json"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = json::parse(r.out);
  EXPECT_NEAR(j["average_human_llm"].get<double>(), want, 1e-12);
  EXPECT_TRUE(j["average_human_human"].is_null());
  ASSERT_EQ(j["pairs"].size(), 1u);

  auto table = cli({"--store", store(), "kappa", id});
  EXPECT_NE(table.out.find("Average human-LLM"), std::string::npos);
}

TEST_F(CliTest, SweepWarnsOnDuplicateK) {
  auto r = cli({"--store", store(), "sweep", "--config", fixture("news_replay.json"), "--inputs",
                fixture("news_inputs.jsonl"), "--k", "3,5,3", "--format", "json"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  auto rows = json::parse(r.out)["rows"];
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["generated"], expected("news_replay.json", 3)["counterfactuals"]);
  EXPECT_EQ(rows[1]["generated"], expected("news_replay.json", 5)["counterfactuals"]);
  EXPECT_EQ(cli({"--store", store(), "sweep", "--config", fixture("news_replay.json"), "--inputs",
                 fixture("news_inputs.jsonl"), "--k", "3,x"})
                .code,
            1);
}

TEST_F(CliTest, FailuresExitOneWithMessage) {
  auto r = cli({"--store", store(), "report", "run-missing"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("run-missing"), std::string::npos);
  EXPECT_EQ(cli({"--store", store(), "serve", "run-missing", "--bind", "127.0.0.1:0"}).code, 1);

  auto bad = dir_.path() / "bad.json";
  std::ofstream(bad) << R"({"task": "news_summarization", "counterfactuals_per_explanation": -1})";
  auto b = cli({"--store", store(), "run", "--config", bad.string(), "--inputs", fixture("news_inputs.jsonl")});
  EXPECT_EQ(b.code, 1);
  EXPECT_NE(b.err.find("error:"), std::string::npos);

  auto id = run_replay("news_replay.json", "news_inputs.jsonl");
  // Only pending placeholders so far.
  EXPECT_EQ(cli({"--store", store(), "audits", id}).code, 1);
}

TEST_F(CliTest, ResumeUnknownRunRejected) {
  auto r = cli({"--store", store(), "run", "--config", fixture("news_replay.json"), "--inputs",
                fixture("news_inputs.jsonl"), "--resume", "run-000000000000"});
  EXPECT_EQ(r.code, 1);
}
