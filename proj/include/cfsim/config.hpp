#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "cfsim/gateway.hpp"
#include "cfsim/model.hpp"

namespace cfsim {

struct GatewaySettings {
  std::string base_url;
  std::string adapter = "openai";
  std::string chat_path;
  std::string embed_path;
  std::string api_key_env = "OPENAI_API_KEY";
  int max_retries = 2;
  int backoff_ms = 500;
  double backoff_multiplier = 2.0;
  int timeout_seconds = 120;
  int max_in_flight = 4;
  int max_tokens = 1024;
  // Replay source, or extra record destination in record mode.
  std::string transcript;
  // Overrides of the per-stage defaults (0.7 generation, 0.0 parse/judge).
  std::optional<double> generation_temperature;
  std::optional<double> judge_temperature;

  bool operator==(const GatewaySettings&) const = default;
};

enum class ShortfallPolicy { accept, retry };

NLOHMANN_JSON_SERIALIZE_ENUM(ShortfallPolicy, {{ShortfallPolicy::accept, "accept"},
                                               {ShortfallPolicy::retry, "retry"}})

struct RunConfig {
  TaskKind task = TaskKind::news_summarization;
  ExplanationMethod method = ExplanationMethod::chain_of_thought;
  std::string model_id;
  std::string judge_model_id;
  std::string embed_model_id;
  int counterfactuals_per_explanation = 3;
  int num_inputs = 1;
  TransportMode transport = TransportMode::replay;
  bool sanity_conditioned = false;
  std::uint64_t seed = 0;

  ShortfallPolicy shortfall_policy = ShortfallPolicy::accept;
  std::string templates_dir;
  GatewaySettings gateway;

  bool operator==(const RunConfig&) const = default;
};

// Throws ConfigError naming the offending key.
void validate(const RunConfig& cfg);

json to_json_value(const RunConfig& cfg);
// Strict: unknown keys are a ConfigError. Relative paths are resolved
// against `base_dir` when given.
RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// The fields that determine run content (no paths, no transport details).
json identity_json(const RunConfig& cfg);

// Text for `--help`.
std::string config_schema_help();

}  // namespace cfsim
