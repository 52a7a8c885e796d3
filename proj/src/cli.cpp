#include "cfsim/cli.hpp"

#include <httplib.h>
#include <pthread.h>
#include <signal.h>

#include <CLI11.hpp>
#include <atomic>
#include <cstdlib>
#include <ostream>
#include <thread>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cfsim/config.hpp"
#include "cfsim/errors.hpp"
#include "cfsim/metrics.hpp"
#include "cfsim/pipeline.hpp"
#include "cfsim/report.hpp"
#include "cfsim/service.hpp"
#include "cfsim/store.hpp"

namespace cfsim {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(',', start);
    if (comma == std::string::npos) comma = s.size();
    auto item = s.substr(start, comma - start);
    if (!item.empty()) out.push_back(item);
    start = comma + 1;
  }
  return out;
}

void print_manifest(const RunManifest& m, std::ostream& out) {
  out << "run_id: " << m.run_id << "\n";
  for (auto stage : kPipelineStages) {
    const auto name = to_string(stage);
    auto it = m.stage_counts.find(name);
    out << "  " << name << ": ";
    if (it == m.stage_counts.end()) {
      out << "pending\n";
    } else {
      out << it->second.succeeded << " ok, " << it->second.failed << " failed\n";
    }
  }
  if (!m.events.empty()) {
    out << "events:\n";
    for (const auto& e : m.events) out << "  " << e << "\n";
  }
  out << "status: " << (m.finished_at.empty() ? "incomplete" : "complete") << "\n";
}

EmbeddingTable run_embeddings(const RunStore& store, const LoadedRun& run) {
  if (!run.manifest || !fs::exists(store.transcript_path())) return {};
  Transcript transcript(store.transcript_path());
  return load_embeddings(run.graph, transcript, run.manifest->config.embed_model_id);
}

std::pair<std::string, int> parse_bind(const std::string& bind) {
  auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw ConfigError("--bind expects addr:port, got " + bind);
  int port = 0;
  try {
    port = std::stoi(bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("bad port in --bind " + bind);
  }
  if (port < 0 || port > 65535) throw ConfigError("port out of range in --bind " + bind);
  return {bind.substr(0, colon), port};
}

// Blocks SIGINT/SIGTERM in every thread and stops `server` when one arrives.
class SignalStopper {
 public:
  explicit SignalStopper(httplib::Server& server) {
    sigemptyset(&set_);
    sigaddset(&set_, SIGINT);
    sigaddset(&set_, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set_, &old_);
    thread_ = std::thread([this, &server] {
      timespec tick{0, 200'000'000};
      while (!done_) {
        if (sigtimedwait(&set_, nullptr, &tick) > 0) {
          spdlog::info("shutting down");
          server.stop();
          return;
        }
      }
    });
  }
  ~SignalStopper() {
    done_ = true;
    thread_.join();
    pthread_sigmask(SIG_SETMASK, &old_, nullptr);
  }

 private:
  sigset_t set_{};
  sigset_t old_{};
  std::atomic<bool> done_{false};
  std::thread thread_;
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Counterfactual simulatability evaluation of LLM explanations"};
  app.require_subcommand(1);
  app.footer(config_schema_help());
  app.set_help_all_flag("--help-all", "Expand help for all subcommands");

  std::string store_root = "runs";
  bool verbose = false;
  app.add_option("--store", store_root, "Directory holding runs")->capture_default_str();
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  auto* run = app.add_subcommand("run", "Run the pipeline");
  run->footer(config_schema_help());
  std::string config_path, inputs_path, resume;
  run->add_option("--config", config_path, "Run config (JSON)")->required();
  run->add_option("--inputs", inputs_path, "Inputs, one {\"id\",\"text\"} object per line")->required();
  run->add_option("--resume", resume, "Continue an existing run");

  auto* report = app.add_subcommand("report", "Generality and precision of a run");
  std::string run_id;
  double threshold = 1.0;
  std::string format = "table";
  std::string annotator;
  bool kappa_by_target = false;
  report->add_option("run_id", run_id)->required();
  report->add_option("--threshold", threshold, "Presence proportion needed to count as simulatable")
      ->capture_default_str();
  report->add_option("--format", format)->check(CLI::IsMember({"json", "table", "csv"}))
      ->capture_default_str();
  report->add_option("--annotator", annotator, "Whose verdicts to score, e.g. human:alice");
  report->add_flag("--kappa-split", kappa_by_target, "Kappa per target instead of pooled");

  auto* kappa = app.add_subcommand("kappa", "Pairwise Cohen's kappa between annotators");
  kappa->add_option("run_id", run_id)->required();
  kappa->add_option("--format", format)->check(CLI::IsMember({"json", "table"}))
      ->capture_default_str();
  kappa->add_flag("--split", kappa_by_target, "Separate kappa per target");

  auto* audits = app.add_subcommand("audits", "Parsing accuracy from parse audits");
  audits->add_option("run_id", run_id)->required();
  audits->add_option("--format", format)->check(CLI::IsMember({"json", "table"}))
      ->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "Generality and simulatability across k");
  sweep->footer(config_schema_help());
  std::string ks;
  sweep->add_option("--config", config_path, "Run config (JSON)")->required();
  sweep->add_option("--inputs", inputs_path, "Inputs file")->required();
  sweep->add_option("--k", ks, "Comma-separated counterfactual counts, e.g. 3,5,10")->required();
  sweep->add_option("--format", format)->check(CLI::IsMember({"json", "table"}))
      ->capture_default_str();

  auto* serve = app.add_subcommand("serve", "Serve the annotation service for a run");
  std::string bind = "127.0.0.1:8080";
  std::string ui_dir, roster;
  serve->add_option("run_id", run_id)->required();
  serve->add_option("--bind", bind, "addr:port")->capture_default_str();
  serve->add_option("--ui", ui_dir, "Built UI bundle served at /");
  serve->add_option("--roster", roster,
                    "Comma-separated annotator names; enables session tokens keyed by "
                    "$CFSIM_SESSION_SECRET");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  auto logger = spdlog::stderr_color_mt("cfsim-" + std::to_string(reinterpret_cast<std::uintptr_t>(&app)));
  logger->set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  auto previous = spdlog::default_logger();
  spdlog::set_default_logger(logger);
  struct Restore {
    std::shared_ptr<spdlog::logger> prev;
    std::string name;
    ~Restore() {
      spdlog::set_default_logger(prev);
      spdlog::drop(name);
    }
  } restore{previous, logger->name()};

  try {
    if (*run) {
      auto cfg = load_run_config(config_path);
      auto inputs = load_inputs(inputs_path);
      PipelineEnv env{store_root, nullptr, nullptr};
      RunOptions opts;
      if (!resume.empty()) {
        if (!RunStore(store_root, resume).exists()) throw NotFoundError("unknown run " + resume);
        opts.run_id = resume;
      }
      print_manifest(run_full(cfg, inputs, env, opts), out);
      return 0;
    }

    if (*report) {
      RunStore store(store_root, run_id);
      auto loaded = store.load();
      ReportOptions opts;
      opts.threshold = threshold;
      if (!annotator.empty()) opts.annotator = AnnotatorId::parse(annotator);
      opts.kappa_split = kappa_by_target ? KappaSplit::by_target : KappaSplit::pooled;
      if (loaded.manifest) opts.similarity.embed_model_id = loaded.manifest->config.embed_model_id;
      auto r = aggregate_report(loaded.graph, opts, run_embeddings(store, loaded));
      if (format == "json") {
        out << report_json(r).dump(2) << "\n";
      } else if (format == "csv") {
        out << report_csv(r);
      } else {
        out << report_table(r);
      }
      return 0;
    }

    if (*kappa) {
      auto loaded = load_run(store_root, run_id);
      auto cells = kappa_matrix(loaded.graph.annotations,
                                kappa_by_target ? KappaSplit::by_target : KappaSplit::pooled);
      if (cells.empty()) throw EmptyReportError("no two annotators share an annotated item");
      auto avg = kappa_averages(cells);
      if (format == "json") {
        json j{{"pairs", kappa_json(cells)}};
        j["average_human_human"] = avg.human_human ? json(*avg.human_human) : json(nullptr);
        j["average_human_llm"] = avg.human_llm ? json(*avg.human_llm) : json(nullptr);
        out << j.dump(2) << "\n";
      } else {
        out << kappa_table(cells);
        out << "Average human-human: " << fixed2(avg.human_human) << "\n";
        out << "Average human-LLM:   " << fixed2(avg.human_llm) << "\n";
      }
      return 0;
    }

    if (*audits) {
      auto loaded = load_run(store_root, run_id);
      auto summary = summarize_audits(loaded.graph.audits);
      if (summary.n_audited == 0) throw EmptyReportError("run has no completed parse audits");
      const auto task = loaded.graph.explanations.empty() ? TaskKind::news_summarization
                                                          : loaded.graph.explanations.front().task;
      if (format == "json") {
        out << audit_json(summary).dump(2) << "\n";
      } else {
        out << audit_table(summary, task);
      }
      return 0;
    }

    if (*sweep) {
      auto cfg = load_run_config(config_path);
      auto inputs = load_inputs(inputs_path);
      std::vector<int> k_values;
      for (const auto& item : split_list(ks)) {
        try {
          std::size_t used = 0;
          k_values.push_back(std::stoi(item, &used));
          if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
          throw ConfigError("--k expects integers, got '" + item + "'");
        }
      }
      auto result = run_sweep(cfg, inputs, k_values, PipelineEnv{store_root, nullptr, nullptr});
      for (const auto& w : result.warnings) err << "warning: " << w << "\n";
      if (format == "json") {
        auto j = sweep_json(result.rows);
        out << json{{"rows", j}, {"run_ids", result.run_ids}}.dump(2) << "\n";
      } else {
        out << sweep_table(result.rows);
      }
      bool any_error = false;
      for (const auto& row : result.rows) any_error = any_error || row.error.has_value();
      return any_error ? 1 : 0;
    }

    if (*serve) {
      RunStore store(store_root, run_id);
      store.load(false);
      auto [host, port] = parse_bind(bind);
      ServiceOptions opts;
      opts.store_root = store_root;
      if (!ui_dir.empty()) opts.ui_dir = ui_dir;
      opts.roster = split_list(roster);
      if (!opts.roster.empty()) {
        const char* secret = std::getenv("CFSIM_SESSION_SECRET");
        if (!secret || !*secret) throw ConfigError("--roster needs CFSIM_SESSION_SECRET");
        opts.session_secret = secret;
      }
      AnnotationService service(std::move(opts));
      httplib::Server server;
      service.install(server);
      SignalStopper stopper(server);
      if (!server.bind_to_port(host, port)) {
        throw StorageError("cannot bind " + bind);
      }
      out << "serving run " << run_id << " on http://" << host << ":" << port << "/runs/"
          << run_id << "/tasks" << std::endl;
      server.listen_after_bind();
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace cfsim
