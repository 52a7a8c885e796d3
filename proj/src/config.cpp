#include "cfsim/config.hpp"

#include <fstream>
#include <set>

#include "cfsim/errors.hpp"

namespace cfsim {

void validate(const RunConfig& cfg) {
  const int k = cfg.counterfactuals_per_explanation;
  if (k < 1 || k > 10) {
    throw ConfigError("counterfactuals_per_explanation must be in 1..10, got " +
                      std::to_string(k));
  }
  if (cfg.num_inputs < 1) throw ConfigError("num_inputs must be >= 1");
  if (cfg.model_id.empty()) throw ConfigError("model_id is required");
  if (cfg.judge_model_id.empty()) throw ConfigError("judge_model_id is required");
  if (cfg.embed_model_id.empty()) throw ConfigError("embed_model_id is required");
  const auto& g = cfg.gateway;
  if (g.max_retries < 0) throw ConfigError("gateway.max_retries must be >= 0");
  if (g.backoff_ms < 0) throw ConfigError("gateway.backoff_ms must be >= 0");
  if (g.max_in_flight < 1) throw ConfigError("gateway.max_in_flight must be >= 1");
  if (g.max_tokens < 1) throw ConfigError("gateway.max_tokens must be >= 1");
  if (cfg.transport == TransportMode::replay && g.transcript.empty()) {
    throw ConfigError("replay transport needs gateway.transcript");
  }
  if (cfg.transport != TransportMode::replay && g.base_url.empty()) {
    throw ConfigError("live/record transport needs gateway.base_url");
  }
}

namespace {

json gateway_json(const GatewaySettings& g) {
  json j{{"base_url", g.base_url},
         {"adapter", g.adapter},
         {"chat_path", g.chat_path},
         {"embed_path", g.embed_path},
         {"api_key_env", g.api_key_env},
         {"max_retries", g.max_retries},
         {"backoff_ms", g.backoff_ms},
         {"backoff_multiplier", g.backoff_multiplier},
         {"timeout_seconds", g.timeout_seconds},
         {"max_in_flight", g.max_in_flight},
         {"max_tokens", g.max_tokens},
         {"transcript", g.transcript}};
  j["generation_temperature"] =
      g.generation_temperature ? json(*g.generation_temperature) : json(nullptr);
  j["judge_temperature"] = g.judge_temperature ? json(*g.judge_temperature) : json(nullptr);
  return j;
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <typename T>
void read_opt(const json& j, const char* key, std::optional<T>& out) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return;
  T v{};
  read(j, key, v);
  out = v;
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + where + key + "'");
  }
}

std::string resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty() || base.empty()) return p;
  std::filesystem::path path(p);
  if (path.is_absolute()) return p;
  return (base / path).lexically_normal().string();
}

template <typename E, typename Parse>
E read_enum(const json& j, const char* key, E fallback, Parse parse) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  if (!it->is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
  try {
    return parse(it->get<std::string>());
  } catch (const Error& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

json to_json_value(const RunConfig& c) {
  return json{{"task", to_string(c.task)},
              {"method", to_string(c.method)},
              {"model_id", c.model_id},
              {"judge_model_id", c.judge_model_id},
              {"embed_model_id", c.embed_model_id},
              {"counterfactuals_per_explanation", c.counterfactuals_per_explanation},
              {"num_inputs", c.num_inputs},
              {"transport", c.transport},
              {"sanity_conditioned", c.sanity_conditioned},
              {"seed", c.seed},
              {"shortfall_policy", c.shortfall_policy},
              {"templates_dir", c.templates_dir},
              {"gateway", gateway_json(c.gateway)}};
}

json identity_json(const RunConfig& c) {
  return json{{"task", to_string(c.task)},
              {"method", to_string(c.method)},
              {"model_id", c.model_id},
              {"judge_model_id", c.judge_model_id},
              {"embed_model_id", c.embed_model_id},
              {"counterfactuals_per_explanation", c.counterfactuals_per_explanation},
              {"num_inputs", c.num_inputs},
              {"sanity_conditioned", c.sanity_conditioned},
              {"seed", c.seed},
              {"shortfall_policy", c.shortfall_policy}};
}

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  reject_unknown(j,
                 {"task", "method", "model_id", "judge_model_id", "embed_model_id",
                  "counterfactuals_per_explanation", "num_inputs", "transport",
                  "sanity_conditioned", "seed", "shortfall_policy", "templates_dir",
                  "gateway"},
                 "");
  RunConfig c;
  c.task = read_enum(j, "task", c.task, parse_task_kind);
  c.method = read_enum(j, "method", c.method, parse_explanation_method);
  read(j, "model_id", c.model_id);
  read(j, "judge_model_id", c.judge_model_id);
  read(j, "embed_model_id", c.embed_model_id);
  read(j, "counterfactuals_per_explanation", c.counterfactuals_per_explanation);
  read(j, "num_inputs", c.num_inputs);
  c.transport = read_enum(j, "transport", c.transport, [](const std::string& s) {
    if (s == "live") return TransportMode::live;
    if (s == "record") return TransportMode::record;
    if (s == "replay") return TransportMode::replay;
    throw ConfigError("unknown transport '" + s + "'");
  });
  read(j, "sanity_conditioned", c.sanity_conditioned);
  read(j, "seed", c.seed);
  c.shortfall_policy = read_enum(j, "shortfall_policy", c.shortfall_policy, [](const std::string& s) {
    if (s == "accept") return ShortfallPolicy::accept;
    if (s == "retry") return ShortfallPolicy::retry;
    throw ConfigError("unknown shortfall_policy '" + s + "'");
  });
  read(j, "templates_dir", c.templates_dir);
  // Omitted: ./templates under the working directory.
  c.templates_dir = c.templates_dir.empty() ? "templates" : resolve(c.templates_dir, base_dir);
  if (auto it = j.find("gateway"); it != j.end() && !it->is_null()) {
    const json& g = *it;
    if (!g.is_object()) throw ConfigError("config key 'gateway' must be an object");
    reject_unknown(g,
                   {"base_url", "adapter", "chat_path", "embed_path", "api_key_env",
                    "max_retries", "backoff_ms", "backoff_multiplier", "timeout_seconds",
                    "max_in_flight", "max_tokens", "transcript", "generation_temperature",
                    "judge_temperature"},
                   "gateway.");
    auto& s = c.gateway;
    read(g, "base_url", s.base_url);
    read(g, "adapter", s.adapter);
    read(g, "chat_path", s.chat_path);
    read(g, "embed_path", s.embed_path);
    read(g, "api_key_env", s.api_key_env);
    read(g, "max_retries", s.max_retries);
    read(g, "backoff_ms", s.backoff_ms);
    read(g, "backoff_multiplier", s.backoff_multiplier);
    read(g, "timeout_seconds", s.timeout_seconds);
    read(g, "max_in_flight", s.max_in_flight);
    read(g, "max_tokens", s.max_tokens);
    read(g, "transcript", s.transcript);
    s.transcript = resolve(s.transcript, base_dir);
    read_opt(g, "generation_temperature", s.generation_temperature);
    read_opt(g, "judge_temperature", s.judge_temperature);
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

std::string config_schema_help() {
  return R"(Run config (JSON object):
  task                             "news_summarization" | "medical_suggestion"
  method                           "chain_of_thought" | "post_hoc"
  model_id                         model under evaluation
  judge_model_id                   model used for LLM annotation
  embed_model_id                   embedding model for generality
  counterfactuals_per_explanation  integer 1..10 (default 3)
  num_inputs                       integer >= 1, inputs sampled with `seed`
  transport                        "live" | "record" | "replay"
  sanity_conditioned               bool: condition counterfactual outputs on the explanation
  seed                             integer, input sampling seed
  shortfall_policy                 "accept" | "retry" (short counterfactual lists)
  templates_dir                    directory of *.tmpl prompt templates (default ./templates)
  gateway:
    base_url, adapter ("openai" | "ollama"), chat_path, embed_path,
    api_key_env (default OPENAI_API_KEY), max_retries, backoff_ms,
    backoff_multiplier, timeout_seconds, max_in_flight, max_tokens,
    transcript (replay source / record destination),
    generation_temperature, judge_temperature
Relative paths resolve against the config file's directory.)";
}

}  // namespace cfsim
