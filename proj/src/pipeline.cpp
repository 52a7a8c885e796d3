#include "cfsim/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "cfsim/errors.hpp"
#include "cfsim/hash.hpp"

namespace cfsim {

namespace fs = std::filesystem;

std::string to_string(PipelineStage s) {
  switch (s) {
    case PipelineStage::explanations: return "explanations";
    case PipelineStage::counterfactuals: return "counterfactuals";
    case PipelineStage::parse: return "parse";
    case PipelineStage::outputs: return "outputs";
    case PipelineStage::annotation: return "annotation";
  }
  return "?";
}

// ---- inputs ----

std::vector<InputItem> parse_inputs(std::string_view ndjson) {
  std::vector<InputItem> items;
  std::set<std::string> ids;
  std::istringstream in{std::string(ndjson)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    InputItem item;
    try {
      auto j = json::parse(line);
      const auto& id = j.at("id");
      item.id = id.is_string() ? id.get<std::string>() : id.dump();
      item.text = j.at("text").get<std::string>();
    } catch (const json::exception& e) {
      throw LoadError("inputs", lineno, e.what());
    }
    if (item.id.empty()) throw LoadError("inputs", lineno, "empty id");
    if (item.text.empty()) throw LoadError("inputs", lineno, "empty text for " + item.id);
    if (!ids.insert(item.id).second) throw LoadError("inputs", lineno, "duplicate id " + item.id);
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<InputItem> load_inputs(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot read inputs " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_inputs(ss.str());
  } catch (const LoadError& e) {
    throw LoadError(path.string(), e.line(), e.what());
  }
}

std::vector<InputItem> sample_inputs(std::span<const InputItem> items, std::size_t n,
                                     std::uint64_t seed) {
  if (n >= items.size()) return {items.begin(), items.end()};
  // mt19937_64's output sequence is fixed by the standard; distributions
  // are not, so indices are drawn from raw outputs.
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng() % (idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<InputItem> out;
  out.reserve(n);
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

// ---- helpers ----

namespace {

std::string describe(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

std::string first_line(const std::string& s) {
  auto nl = s.find('\n');
  return nl == std::string::npos ? s : s.substr(0, nl) + " ...";
}

Bindings input_bindings(const std::string& text) {
  return Bindings{{"input", text}, {"document", text}, {"question", text}};
}

// Applies model id, token limit and temperature overrides to a rendered
// request.
ChatRequest finish(ChatRequest req, const RunConfig& cfg, Stage stage, bool judge_model) {
  req.model_id = judge_model ? cfg.judge_model_id : cfg.model_id;
  req.max_tokens = cfg.gateway.max_tokens;
  const bool sampling = default_temperature(stage) > 0.0;
  if (sampling && cfg.gateway.generation_temperature) {
    req.temperature = *cfg.gateway.generation_temperature;
  }
  if (!sampling && cfg.gateway.judge_temperature) {
    req.temperature = *cfg.gateway.judge_temperature;
  }
  return req;
}

}  // namespace

// ---- stage 1 ----

StageResult<ExplanationRecord> run_stage_explanations(std::span<const InputItem> inputs,
                                                      const RunConfig& cfg, Gateway& gw,
                                                      const TemplateCatalog& templates) {
  if (inputs.empty()) throw StageError("explanations stage has no inputs");
  const Stage stage = explain_stage(cfg.method);
  const auto& tmpl = templates.get(stage, cfg.task);
  std::vector<ChatRequest> reqs;
  reqs.reserve(inputs.size());
  for (const auto& in : inputs) {
    reqs.push_back(finish(render(tmpl, input_bindings(in.text)), cfg, stage, false));
  }
  auto answers = gw.complete_batch(reqs);

  StageResult<ExplanationRecord> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& in = inputs[i];
    try {
      if (!answers[i].ok()) std::rethrow_exception(answers[i].error);
      auto parsed = parse_explanation_response(*answers[i].value, cfg.method);
      ExplanationRecord r;
      r.id = "ex-" + in.id;
      r.task = cfg.task;
      r.method = cfg.method;
      r.input_text = in.text;
      r.output_text = std::move(parsed.output_text);
      r.explanation_text = std::move(parsed.explanation_text);
      r.model_id = cfg.model_id;
      r.created_at = utc_now();
      out.records.push_back(std::move(r));
      ++out.count.succeeded;
    } catch (const std::exception& e) {
      ++out.count.failed;
      out.events.push_back("explanations: input " + in.id + " failed: " + first_line(e.what()));
    }
  }
  if (out.records.empty()) {
    throw StageError("explanations stage: all " + std::to_string(inputs.size()) +
                     " inputs failed");
  }
  return out;
}

// ---- stage 2 ----

StageResult<Counterfactual> run_stage_counterfactuals(
    std::span<const ExplanationRecord> explanations, const RunConfig& cfg, Gateway& gw,
    const TemplateCatalog& templates) {
  const int k = cfg.counterfactuals_per_explanation;
  const auto& tmpl = templates.get(Stage::gen_counterfactual, cfg.task);
  auto request_for = [&](const ExplanationRecord& e) {
    Bindings b = input_bindings(e.input_text);
    b["explanation"] = e.explanation_text;
    b["k"] = std::to_string(k);
    return finish(render(tmpl, b), cfg, Stage::gen_counterfactual, false);
  };
  std::vector<ChatRequest> reqs;
  for (const auto& e : explanations) reqs.push_back(request_for(e));
  auto answers = gw.complete_batch(reqs);

  std::vector<std::optional<CounterfactualList>> lists(explanations.size());
  std::vector<std::string> errors(explanations.size());
  for (std::size_t i = 0; i < explanations.size(); ++i) {
    try {
      if (!answers[i].ok()) std::rethrow_exception(answers[i].error);
      lists[i] = parse_counterfactual_list(*answers[i].value, k);
    } catch (const std::exception& e) {
      errors[i] = first_line(e.what());
    }
  }

  if (cfg.shortfall_policy == ShortfallPolicy::retry) {
    std::vector<std::size_t> again;
    std::vector<ChatRequest> retry_reqs;
    for (std::size_t i = 0; i < explanations.size(); ++i) {
      if (!lists[i] || lists[i]->shortfall) {
        auto r = request_for(explanations[i]);
        r.request_tag += ":retry";
        retry_reqs.push_back(std::move(r));
        again.push_back(i);
      }
    }
    auto retried = gw.complete_batch(retry_reqs);
    for (std::size_t n = 0; n < again.size(); ++n) {
      const std::size_t i = again[n];
      try {
        if (!retried[n].ok()) std::rethrow_exception(retried[n].error);
        auto list = parse_counterfactual_list(*retried[n].value, k);
        if (!lists[i] || list.texts.size() > lists[i]->texts.size()) lists[i] = std::move(list);
      } catch (const std::exception& e) {
        if (!lists[i]) errors[i] += "; retry: " + first_line(e.what());
      }
    }
  }

  StageResult<Counterfactual> out;
  for (std::size_t i = 0; i < explanations.size(); ++i) {
    const auto& e = explanations[i];
    if (!lists[i]) {
      ++out.count.failed;
      out.events.push_back("counterfactuals: " + e.id + " failed: " + errors[i]);
      continue;
    }
    if (lists[i]->shortfall) {
      out.events.push_back("counterfactuals: shortfall for " + e.id + ": " +
                           std::to_string(lists[i]->texts.size()) + " of " +
                           std::to_string(k));
    }
    for (std::size_t idx = 0; idx < lists[i]->texts.size(); ++idx) {
      Counterfactual c;
      c.explanation_id = e.id;
      c.index = static_cast<std::int64_t>(idx);
      c.cf_id = make_cf_id(e.id, c.index);
      c.text = lists[i]->texts[idx];
      out.records.push_back(std::move(c));
      ++out.count.succeeded;
    }
  }

  std::vector<std::string> texts;
  for (const auto& c : out.records) texts.push_back(c.text);
  auto vectors = gw.embed_batch(texts, cfg.embed_model_id);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (!vectors[i].ok()) {
      out.events.push_back("counterfactuals: no embedding for " + out.records[i].cf_id + ": " +
                           first_line(describe(vectors[i].error)));
    }
  }
  return out;
}

// ---- stage 3 ----

ParseStageResult run_stage_parse(std::span<const ExplanationRecord> explanations,
                                 const RunConfig& cfg, Gateway& gw,
                                 const TemplateCatalog& templates) {
  const auto& tmpl = templates.get(Stage::parse_explanation, cfg.task);
  std::vector<ChatRequest> reqs;
  for (const auto& e : explanations) {
    reqs.push_back(finish(render(tmpl, {{"explanation", e.explanation_text}}), cfg,
                          Stage::parse_explanation, false));
  }
  auto answers = gw.complete_batch(reqs);
  ParseStageResult out;
  for (std::size_t i = 0; i < explanations.size(); ++i) {
    const auto& e = explanations[i];
    try {
      if (!answers[i].ok()) std::rethrow_exception(answers[i].error);
      auto list = parse_unit_list(*answers[i].value, e.task, e.id);
      for (const auto& why : list.skipped) {
        out.units.events.push_back("parse: " + e.id + " skipped " + why);
      }
      out.units.count.succeeded += list.units.size();
      for (auto& u : list.units) out.units.records.push_back(std::move(u));
      out.audits.push_back(ParseAudit{e.id, std::nullopt, std::nullopt, std::nullopt});
    } catch (const std::exception& ex) {
      ++out.units.count.failed;
      out.units.events.push_back("parse: " + e.id + " failed: " + first_line(ex.what()));
    }
  }
  return out;
}

// ---- stage 4 ----

// Sanity mode prefixes the explanation so the model is asked to follow it.
StageResult<CounterfactualOutput> run_stage_outputs(
    std::span<const Counterfactual> counterfactuals,
    std::span<const ExplanationRecord> explanations, const RunConfig& cfg, Gateway& gw,
    const TemplateCatalog& templates) {
  std::unordered_map<std::string, const ExplanationRecord*> by_id;
  for (const auto& e : explanations) by_id[e.id] = &e;

  const Stage stage = cfg.sanity_conditioned ? Stage::gen_cf_output : explain_stage(cfg.method);
  const auto& tmpl = templates.get(stage, cfg.task);
  StageResult<CounterfactualOutput> out;
  std::vector<ChatRequest> reqs;
  std::vector<const Counterfactual*> targets;
  for (const auto& c : counterfactuals) {
    auto it = by_id.find(c.explanation_id);
    if (it == by_id.end()) {
      ++out.count.failed;
      out.events.push_back("outputs: " + c.cf_id + " has no explanation");
      continue;
    }
    Bindings b = input_bindings(c.text);
    b["explanation"] = it->second->explanation_text;
    auto req = finish(render(tmpl, b), cfg, stage, false);
    req.request_tag = to_string(Stage::gen_cf_output);
    reqs.push_back(std::move(req));
    targets.push_back(&c);
  }
  auto answers = gw.complete_batch(reqs);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    try {
      if (!answers[i].ok()) std::rethrow_exception(answers[i].error);
      auto parsed = parse_explanation_response(*answers[i].value, cfg.method);
      out.records.push_back(
          CounterfactualOutput{targets[i]->cf_id, parsed.output_text, cfg.sanity_conditioned});
      ++out.count.succeeded;
    } catch (const std::exception& e) {
      ++out.count.failed;
      out.events.push_back("outputs: " + targets[i]->cf_id + " failed: " + first_line(e.what()));
    }
  }
  return out;
}

// ---- stage 5 ----

namespace {

struct Judgement {
  const Counterfactual* cf;
  const AtomicUnit* unit;
  Target target;
  ChatRequest request;
};

// Sends every judgement, retrying unparseable verdicts once at
// temperature 0. Returns verdicts aligned with `jobs` (empty = missing).
std::vector<std::optional<bool>> judge_all(std::vector<Judgement>& jobs, Gateway& gw,
                                           std::vector<std::string>& events) {
  std::vector<ChatRequest> reqs;
  for (const auto& j : jobs) reqs.push_back(j.request);
  auto answers = gw.complete_batch(reqs);
  std::vector<std::optional<bool>> verdicts(jobs.size());
  std::vector<std::size_t> retry;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    try {
      if (!answers[i].ok()) std::rethrow_exception(answers[i].error);
      verdicts[i] = parse_judge_verdict(*answers[i].value);
    } catch (const std::exception&) {
      retry.push_back(i);
    }
  }
  if (retry.empty()) return verdicts;
  std::vector<ChatRequest> again;
  for (auto i : retry) {
    auto r = jobs[i].request;
    r.request_tag += ":retry";
    r.temperature = 0.0;
    again.push_back(std::move(r));
  }
  auto second = gw.complete_batch(again);
  for (std::size_t n = 0; n < retry.size(); ++n) {
    const auto i = retry[n];
    try {
      if (!second[n].ok()) std::rethrow_exception(second[n].error);
      verdicts[i] = parse_judge_verdict(*second[n].value);
    } catch (const std::exception& e) {
      events.push_back("annotation: no verdict for (" + jobs[i].cf->cf_id + ", " +
                       jobs[i].unit->unit_id + ", " + to_string(jobs[i].target) +
                       "): " + first_line(e.what()));
    }
  }
  return verdicts;
}

}  // namespace

StageResult<UnitAnnotation> run_stage_llm_annotation(const RecordGraph& run,
                                                     const RunConfig& cfg, Gateway& gw,
                                                     const TemplateCatalog& templates) {
  const AnnotatorId judge{AnnotatorKind::llm_judge, cfg.judge_model_id};
  std::unordered_map<std::string, const ExplanationRecord*> expl;
  for (const auto& e : run.explanations) expl[e.id] = &e;
  std::unordered_map<std::string, std::vector<AtomicUnit>> units_of;
  for (const auto& u : run.units) units_of[u.explanation_id].push_back(u);
  std::unordered_map<std::string, const CounterfactualOutput*> output_of;
  for (const auto& o : run.outputs) output_of[o.cf_id] = &o;

  // Stable order: explanation order, then counterfactual index.
  std::vector<const Counterfactual*> cfs;
  std::unordered_map<std::string, std::size_t> expl_pos;
  for (std::size_t i = 0; i < run.explanations.size(); ++i) expl_pos[run.explanations[i].id] = i;
  for (const auto& c : run.counterfactuals) {
    if (expl.contains(c.explanation_id)) cfs.push_back(&c);
  }
  std::stable_sort(cfs.begin(), cfs.end(), [&](const auto* a, const auto* b) {
    auto pa = expl_pos[a->explanation_id], pb = expl_pos[b->explanation_id];
    return pa != pb ? pa < pb : a->index < b->index;
  });

  std::unordered_map<std::string, std::vector<AtomicUnit>> sim_units, out_units;
  for (const auto& [eid, units] : units_of) {
    const auto task = expl.at(eid)->task;
    sim_units[eid] = relevant_units(task, units, Target::counterfactual);
    out_units[eid] = relevant_units(task, units, Target::counterfactual_output);
  }

  const auto& sim_tmpl = templates.get(Stage::judge_simulatability, cfg.task);
  const auto& prec_tmpl = templates.get(Stage::judge_precision, cfg.task);
  auto make_job = [&](const Counterfactual* c, const AtomicUnit& u, Target t,
                      const std::string& passage) {
    const Stage stage = t == Target::counterfactual ? Stage::judge_simulatability
                                                    : Stage::judge_precision;
    Bindings b{{"unit", u.text},
               {"passage", passage},
               {"explanation", expl.at(c->explanation_id)->explanation_text}};
    auto req = finish(render(t == Target::counterfactual ? sim_tmpl : prec_tmpl, b), cfg, stage,
                      true);
    return Judgement{c, &u, t, std::move(req)};
  };

  StageResult<UnitAnnotation> out;
  std::vector<Judgement> sim_jobs;
  for (const auto* c : cfs) {
    for (const auto& u : sim_units[c->explanation_id]) {
      sim_jobs.push_back(make_job(c, u, Target::counterfactual, c->text));
    }
  }
  auto sim_verdicts = judge_all(sim_jobs, gw, out.events);

  std::map<std::string, std::vector<UnitAnnotation>> per_cf;
  std::set<std::string> sim_incomplete;
  for (std::size_t i = 0; i < sim_jobs.size(); ++i) {
    const auto& job = sim_jobs[i];
    if (!sim_verdicts[i]) {
      ++out.count.failed;
      sim_incomplete.insert(job.cf->cf_id);
      continue;
    }
    per_cf[job.cf->cf_id].push_back(
        UnitAnnotation{judge, job.cf->cf_id, job.unit->unit_id, job.target, *sim_verdicts[i], {}});
  }

  std::vector<Judgement> prec_jobs;
  for (const auto* c : cfs) {
    const auto& units = out_units[c->explanation_id];
    if (units.empty()) continue;
    auto o = output_of.find(c->cf_id);
    if (o == output_of.end()) {
      out.count.failed += units.size();
      out.events.push_back("annotation: " + c->cf_id + " has no output; precision skipped");
      continue;
    }
    if (sim_incomplete.contains(c->cf_id)) {
      out.count.failed += units.size();
      out.events.push_back("annotation: " + c->cf_id +
                           " lacks simulatability verdicts; precision skipped");
      continue;
    }
    for (const auto& u : units) {
      prec_jobs.push_back(make_job(c, u, Target::counterfactual_output, o->second->text));
    }
  }
  auto prec_verdicts = judge_all(prec_jobs, gw, out.events);
  for (std::size_t i = 0; i < prec_jobs.size(); ++i) {
    const auto& job = prec_jobs[i];
    if (!prec_verdicts[i]) {
      ++out.count.failed;
      continue;
    }
    per_cf[job.cf->cf_id].push_back(
        UnitAnnotation{judge, job.cf->cf_id, job.unit->unit_id, job.target, *prec_verdicts[i], {}});
  }

  for (const auto* c : cfs) {
    auto it = per_cf.find(c->cf_id);
    if (it == per_cf.end()) continue;
    for (auto& a : it->second) out.records.push_back(std::move(a));
  }
  out.count.succeeded = out.records.size();
  return out;
}

// ---- orchestration ----

GatewayFactory default_gateway_factory() {
  return [](const RunConfig& cfg, const fs::path& run_transcript) {
    GatewayOptions opts;
    opts.mode = cfg.transport;
    opts.max_in_flight = cfg.gateway.max_in_flight;
    opts.sinks.push_back(std::make_shared<Transcript>(run_transcript));
    if (cfg.transport == TransportMode::replay) {
      opts.replay_source = Transcript::load(cfg.gateway.transcript);
    } else {
      if (cfg.transport == TransportMode::record && !cfg.gateway.transcript.empty() &&
          fs::weakly_canonical(cfg.gateway.transcript) != fs::weakly_canonical(run_transcript)) {
        opts.sinks.push_back(std::make_shared<Transcript>(cfg.gateway.transcript));
      }
      EndpointConfig ep;
      ep.base_url = cfg.gateway.base_url;
      ep.adapter = cfg.gateway.adapter;
      ep.chat_path = cfg.gateway.chat_path;
      ep.embed_path = cfg.gateway.embed_path;
      if (const char* key = std::getenv(cfg.gateway.api_key_env.c_str())) ep.api_key = key;
      if (ep.api_key.empty()) {
        spdlog::warn("environment variable {} is not set; sending requests without a key",
                     cfg.gateway.api_key_env);
      }
      ep.retry.max_retries = cfg.gateway.max_retries;
      ep.retry.initial_backoff = std::chrono::milliseconds(cfg.gateway.backoff_ms);
      ep.retry.backoff_multiplier = cfg.gateway.backoff_multiplier;
      ep.timeout_seconds = cfg.gateway.timeout_seconds;
      opts.backend = std::make_shared<HttpBackend>(std::move(ep));
    }
    return std::make_shared<Gateway>(std::move(opts));
  };
}

std::string derive_run_id(const RunConfig& cfg, std::span<const InputItem> inputs,
                          const json& template_versions) {
  json items = json::array();
  for (const auto& in : inputs) items.push_back(json{{"id", in.id}, {"text", in.text}});
  json identity{{"config", identity_json(cfg)},
                {"templates", template_versions},
                {"inputs", std::move(items)}};
  return "run-" + sha256_hex(identity.dump()).substr(0, 12);
}

namespace {

template <typename T>
void commit_stage(RunStore& store, RunManifest& manifest, PipelineStage stage,
                  const StageResult<T>& result) {
  store.append(std::span<const T>(result.records));
  const auto name = to_string(stage);
  manifest.stage_counts[name] = result.count;
  for (const auto& e : result.events) manifest.events.push_back(e);
  manifest.completed_stages.push_back(name);
  store.write_manifest(manifest);
  spdlog::info("stage {}: {} succeeded, {} failed", name, result.count.succeeded,
               result.count.failed);
}

}  // namespace

RunManifest run_full(const RunConfig& cfg, std::span<const InputItem> inputs,
                     const PipelineEnv& env, const RunOptions& opts) {
  validate(cfg);
  auto templates = env.templates;
  if (!templates) {
    templates = std::make_shared<const TemplateCatalog>(TemplateCatalog::load_dir(cfg.templates_dir));
  }
  const auto sampled =
      sample_inputs(inputs, static_cast<std::size_t>(cfg.num_inputs), cfg.seed);
  const auto run_id = opts.run_id ? *opts.run_id : derive_run_id(cfg, sampled, templates->versions());

  RunStore store(env.store_root, run_id);
  fs::create_directories(store.dir());
  auto lock = store.lock_writer();

  RunManifest manifest;
  if (auto existing = store.read_manifest()) {
    if (identity_json(existing->config) != identity_json(cfg)) {
      throw ConfigError("run " + run_id + " exists with a different configuration");
    }
    manifest = std::move(*existing);
    if (manifest.completed_stages.size() == kPipelineStages.size()) {
      spdlog::info("run {} already complete", run_id);
      return manifest;
    }
  } else {
    manifest.run_id = run_id;
    manifest.config = cfg;
    manifest.template_versions = templates->versions();
    manifest.started_at = utc_now();
    if (sampled.size() < static_cast<std::size_t>(cfg.num_inputs)) {
      manifest.events.push_back("inputs: requested " + std::to_string(cfg.num_inputs) +
                                ", only " + std::to_string(sampled.size()) + " available");
    }
    store.write_manifest(manifest);
  }

  auto factory = env.gateway_factory ? env.gateway_factory : default_gateway_factory();
  auto gw = factory(cfg, store.transcript_path());
  RecordGraph graph = store.load(false).graph;

  for (auto stage : kPipelineStages) {
    const auto name = to_string(stage);
    if (manifest.stage_done(name)) continue;
    try {
      switch (stage) {
        case PipelineStage::explanations: {
          auto r = opts.shared_explanations
                       ? *opts.shared_explanations
                       : run_stage_explanations(sampled, cfg, *gw, *templates);
          commit_stage(store, manifest, stage, r);
          graph.explanations = std::move(r.records);
          break;
        }
        case PipelineStage::counterfactuals: {
          auto r = run_stage_counterfactuals(graph.explanations, cfg, *gw, *templates);
          commit_stage(store, manifest, stage, r);
          graph.counterfactuals = std::move(r.records);
          break;
        }
        case PipelineStage::parse: {
          auto r = run_stage_parse(graph.explanations, cfg, *gw, *templates);
          store.append(std::span<const ParseAudit>(r.audits));
          commit_stage(store, manifest, stage, r.units);
          graph.units = std::move(r.units.records);
          graph.audits = std::move(r.audits);
          break;
        }
        case PipelineStage::outputs: {
          auto r = run_stage_outputs(graph.counterfactuals, graph.explanations, cfg, *gw,
                                     *templates);
          commit_stage(store, manifest, stage, r);
          graph.outputs = std::move(r.records);
          break;
        }
        case PipelineStage::annotation: {
          auto r = run_stage_llm_annotation(graph, cfg, *gw, *templates);
          commit_stage(store, manifest, stage, r);
          for (auto& a : r.records) graph.annotations.push_back(std::move(a));
          break;
        }
      }
    } catch (const std::exception& e) {
      manifest.events.push_back(name + ": aborted: " + first_line(e.what()));
      store.write_manifest(manifest);
      throw;
    }
    if (opts.stop_after && *opts.stop_after == stage) return manifest;
  }
  manifest.finished_at = utc_now();
  store.write_manifest(manifest);
  return manifest;
}

EmbeddingTable load_embeddings(const RecordGraph& graph, const Transcript& transcript,
                               const std::string& embed_model_id) {
  EmbeddingTable table;
  for (const auto& c : graph.counterfactuals) {
    auto e = transcript.find(embedding_key(c.text, embed_model_id));
    if (!e || !e->response.is_array() || e->response.empty()) continue;
    table.emplace(c.cf_id, EmbeddingVector{e->response.get<std::vector<double>>(), embed_model_id});
  }
  return table;
}

SweepResult run_sweep(const RunConfig& cfg, std::span<const InputItem> inputs,
                      std::vector<int> ks, const PipelineEnv& env) {
  SweepResult result;
  std::vector<int> unique;
  for (int k : ks) {
    if (std::find(unique.begin(), unique.end(), k) != unique.end()) {
      result.warnings.push_back("duplicate k=" + std::to_string(k) + " ignored");
      continue;
    }
    unique.push_back(k);
  }
  if (unique.empty()) throw ConfigError("sweep needs at least one k");

  PipelineEnv shared_env = env;
  if (!shared_env.templates) {
    shared_env.templates =
        std::make_shared<const TemplateCatalog>(TemplateCatalog::load_dir(cfg.templates_dir));
  }

  std::optional<StageResult<ExplanationRecord>> stage1;
  for (int k : unique) {
    SweepRow row;
    row.k = k;
    RunConfig run_cfg = cfg;
    run_cfg.counterfactuals_per_explanation = k;
    try {
      validate(run_cfg);
      RunOptions opts;
      opts.shared_explanations = stage1;
      auto manifest = run_full(run_cfg, inputs, shared_env, opts);
      result.run_ids.push_back(manifest.run_id);
      RunStore store(shared_env.store_root, manifest.run_id);
      auto loaded = store.load(false);
      if (!stage1) {
        StageResult<ExplanationRecord> s;
        s.records = loaded.graph.explanations;
        s.count = manifest.stage_counts.at(to_string(PipelineStage::explanations));
        stage1 = std::move(s);
      }
      Transcript transcript(store.transcript_path());
      auto embeddings = load_embeddings(loaded.graph, transcript, run_cfg.embed_model_id);
      ReportOptions ropts;
      ropts.annotator = AnnotatorId{AnnotatorKind::llm_judge, run_cfg.judge_model_id};
      auto report = score_run(loaded.graph, ropts, embeddings);
      row.generality = report.generality;
      row.simulatable = report.n_simulatable;
      row.generated = report.n_generated;
    } catch (const std::exception& e) {
      row.error = first_line(e.what());
    }
    result.rows.push_back(std::move(row));
  }
  return result;
}

}  // namespace cfsim
