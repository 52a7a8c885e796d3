#include "fixture.hpp"

#include <atomic>
#include <fstream>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>
#include <unistd.h>

namespace cfsim::testing {

namespace fs = std::filesystem;

namespace {
// Stage summaries are noise in test output.
const bool quiet_logs = [] {
  spdlog::set_level(std::getenv("CFSIM_TEST_LOG") ? spdlog::level::debug : spdlog::level::warn);
  return true;
}();
}  // namespace

fs::path fixture_dir() { return CFSIM_FIXTURE_DIR; }
fs::path templates_dir() { return CFSIM_TEMPLATES_DIR; }

std::shared_ptr<const TemplateCatalog> shipped_templates() {
  static auto catalog = std::make_shared<const TemplateCatalog>(TemplateCatalog::load_dir(templates_dir()));
  return catalog;
}

TempDir::TempDir() {
  static std::atomic<unsigned> counter{0};
  std::random_device rd;
  path_ = fs::temp_directory_path() /
          ("cfsim-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" +
           std::to_string(rd()));
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

GatewayFactory mock_factory(std::shared_ptr<MockBackend> backend, TransportMode mode,
                            std::vector<fs::path> extra_sinks) {
  return [backend, mode, extra_sinks](const RunConfig& cfg, const fs::path& run_transcript) {
    GatewayOptions opts;
    opts.mode = mode;
    opts.backend = backend;
    opts.max_in_flight = cfg.gateway.max_in_flight;
    opts.sinks.push_back(std::make_shared<Transcript>(run_transcript));
    for (const auto& p : extra_sinks) opts.sinks.push_back(std::make_shared<Transcript>(p));
    return std::make_shared<Gateway>(std::move(opts));
  };
}

RunConfig mock_config(TaskKind task, int k, int num_inputs) {
  RunConfig cfg;
  cfg.task = task;
  cfg.method = ExplanationMethod::chain_of_thought;
  cfg.model_id = "mock-gen";
  cfg.judge_model_id = "mock-judge";
  cfg.embed_model_id = "mock-embed";
  cfg.counterfactuals_per_explanation = k;
  cfg.num_inputs = num_inputs;
  cfg.transport = TransportMode::live;
  cfg.seed = 7;
  cfg.templates_dir = templates_dir().string();
  cfg.gateway.base_url = "http://mock.invalid";
  return cfg;
}

std::vector<InputItem> fixture_inputs(TaskKind task) {
  return load_inputs(fixture_dir() / (task == TaskKind::news_summarization ? "news_inputs.jsonl"
                                                                           : "medical_inputs.jsonl"));
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace cfsim::testing
