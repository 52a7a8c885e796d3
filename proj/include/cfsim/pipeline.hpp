#pragma once

// The five evaluation stages: explanations, counterfactuals, explanation
// parsing, counterfactual outputs, and LLM annotation. Each stage is a
// function of its inputs and the gateway; run_full persists after every
// stage and skips stages a previous attempt already committed.

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfsim/config.hpp"
#include "cfsim/gateway.hpp"
#include "cfsim/metrics.hpp"
#include "cfsim/model.hpp"
#include "cfsim/prompts.hpp"
#include "cfsim/report.hpp"
#include "cfsim/store.hpp"

namespace cfsim {

enum class PipelineStage { explanations, counterfactuals, parse, outputs, annotation };

inline constexpr std::array<PipelineStage, 5> kPipelineStages = {
    PipelineStage::explanations, PipelineStage::counterfactuals, PipelineStage::parse,
    PipelineStage::outputs, PipelineStage::annotation};

std::string to_string(PipelineStage s);

struct InputItem {
  std::string id;
  std::string text;
  bool operator==(const InputItem&) const = default;
};

// Newline-delimited {"id": ..., "text": ...}. Ids must be unique and texts
// non-empty.
std::vector<InputItem> load_inputs(const std::filesystem::path& path);
std::vector<InputItem> parse_inputs(std::string_view ndjson);

// Reproducible subset of `n` items (all of them when n >= size), kept in
// their original order.
std::vector<InputItem> sample_inputs(std::span<const InputItem> items, std::size_t n,
                                     std::uint64_t seed);

template <typename T>
struct StageResult {
  std::vector<T> records;
  StageCount count;
  std::vector<std::string> events;
};

struct ParseStageResult {
  StageResult<AtomicUnit> units;
  std::vector<ParseAudit> audits;  // pending placeholders, one per parsed explanation
};

StageResult<ExplanationRecord> run_stage_explanations(std::span<const InputItem> inputs,
                                                      const RunConfig& cfg, Gateway& gw,
                                                      const TemplateCatalog& templates);

// Also embeds every counterfactual text so generality can be computed from
// the run transcript later; embedding failures are events, not failures.
StageResult<Counterfactual> run_stage_counterfactuals(
    std::span<const ExplanationRecord> explanations, const RunConfig& cfg, Gateway& gw,
    const TemplateCatalog& templates);

ParseStageResult run_stage_parse(std::span<const ExplanationRecord> explanations,
                                 const RunConfig& cfg, Gateway& gw,
                                 const TemplateCatalog& templates);

StageResult<CounterfactualOutput> run_stage_outputs(
    std::span<const Counterfactual> counterfactuals,
    std::span<const ExplanationRecord> explanations, const RunConfig& cfg, Gateway& gw,
    const TemplateCatalog& templates);

// One llm_judge verdict per (counterfactual, routed unit, target).
// Simulatability verdicts come first; precision verdicts are requested only
// for counterfactuals whose simulatability verdicts are complete.
StageResult<UnitAnnotation> run_stage_llm_annotation(const RecordGraph& run,
                                                     const RunConfig& cfg, Gateway& gw,
                                                     const TemplateCatalog& templates);

// Builds the gateway for a run; `run_transcript` is the run-local log.
using GatewayFactory = std::function<std::shared_ptr<Gateway>(
    const RunConfig& cfg, const std::filesystem::path& run_transcript)>;

// live/record use HttpBackend with the API key read from
// cfg.gateway.api_key_env; replay reads cfg.gateway.transcript. Every
// answered request is also logged to the run transcript, and record mode
// additionally writes cfg.gateway.transcript.
GatewayFactory default_gateway_factory();

struct PipelineEnv {
  std::filesystem::path store_root;
  std::shared_ptr<const TemplateCatalog> templates;  // loaded from cfg.templates_dir if null
  GatewayFactory gateway_factory;                    // default_gateway_factory() if empty
};

struct RunOptions {
  std::optional<std::string> run_id;  // derived from config and inputs if unset
  // Return right after this stage commits (simulates an interrupted run).
  std::optional<PipelineStage> stop_after;
  // Pre-computed stage-1 records shared across a sweep.
  std::optional<StageResult<ExplanationRecord>> shared_explanations;
};

std::string derive_run_id(const RunConfig& cfg, std::span<const InputItem> inputs,
                          const json& template_versions);

// Runs every stage not yet committed for the run id. An existing run must
// have been created with an identical config (paths aside).
RunManifest run_full(const RunConfig& cfg, std::span<const InputItem> inputs,
                     const PipelineEnv& env, const RunOptions& opts = {});

// cf_id -> embedding, looked up in the run transcript.
EmbeddingTable load_embeddings(const RecordGraph& graph, const Transcript& transcript,
                               const std::string& embed_model_id);

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<std::string> run_ids;
  std::vector<std::string> warnings;
};

// One run per distinct k (duplicates dropped with a warning), all sharing
// the stage-1 explanations of the first.
SweepResult run_sweep(const RunConfig& cfg, std::span<const InputItem> inputs,
                      std::vector<int> ks, const PipelineEnv& env);

}  // namespace cfsim
