#include "cfsim/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "cfsim/errors.hpp"
#include "cfsim/hash.hpp"
#include "cfsim/store.hpp"

namespace cfsim {

std::string to_string(TaskStatus s) { return s == TaskStatus::open ? "open" : "done"; }

TaskStatus parse_task_status(std::string_view s) {
  if (s == "open") return TaskStatus::open;
  if (s == "done") return TaskStatus::done;
  throw ValidationError("unknown task status '" + std::string(s) + "'");
}

json to_json_value(const AnnotationTask& t) {
  json ctx{{"explanation_text", t.context.explanation_text},
           {"unit_text", t.context.unit_text},
           {"counterfactual_text", t.context.counterfactual_text}};
  if (t.context.counterfactual_output_text) {
    ctx["counterfactual_output_text"] = *t.context.counterfactual_output_text;
  }
  json j{{"task_id", t.task_id},
         {"explanation_id", t.explanation_id},
         {"cf_id", t.cf_id},
         {"unit_id", t.unit_id},
         {"target", to_string(t.target)},
         {"context", std::move(ctx)},
         {"status", to_string(t.status)}};
  j["verdict"] = t.verdict ? json(*t.verdict) : json(nullptr);
  return j;
}

std::vector<AnnotationTask> derive_tasks(const RecordGraph& graph,
                                         const std::optional<AnnotatorId>& annotator) {
  std::unordered_map<std::string, std::vector<AtomicUnit>> units_of;
  for (const auto& u : graph.units) units_of[u.explanation_id].push_back(u);
  std::unordered_map<std::string, std::vector<const Counterfactual*>> cfs_of;
  for (const auto& c : graph.counterfactuals) cfs_of[c.explanation_id].push_back(&c);
  std::unordered_map<std::string, const CounterfactualOutput*> output_of;
  for (const auto& o : graph.outputs) output_of[o.cf_id] = &o;
  std::map<std::tuple<std::string, std::string, Target>, bool> verdicts;
  if (annotator) {
    for (const auto& a : graph.annotations) {
      if (a.annotator == *annotator) verdicts[{a.cf_id, a.unit_id, a.target}] = a.verdict;
    }
  }

  std::vector<AnnotationTask> tasks;
  for (const auto& e : graph.explanations) {
    auto cfs = cfs_of[e.id];
    std::stable_sort(cfs.begin(), cfs.end(),
                     [](const auto* a, const auto* b) { return a->index < b->index; });
    const auto& units = units_of[e.id];
    for (const auto* c : cfs) {
      auto out = output_of.find(c->cf_id);
      for (Target t : {Target::counterfactual, Target::counterfactual_output}) {
        if (t == Target::counterfactual_output && out == output_of.end()) continue;
        for (const auto& u : relevant_units(e.task, units, t)) {
          AnnotationTask task;
          task.task_id = c->cf_id + "|" + u.unit_id + "|" + to_string(t);
          task.explanation_id = e.id;
          task.cf_id = c->cf_id;
          task.unit_id = u.unit_id;
          task.target = t;
          task.context.explanation_text = e.explanation_text;
          task.context.unit_text = u.text;
          task.context.counterfactual_text = c->text;
          if (t == Target::counterfactual_output) {
            task.context.counterfactual_output_text = out->second->text;
          }
          auto v = verdicts.find({c->cf_id, u.unit_id, t});
          if (v != verdicts.end()) {
            task.status = TaskStatus::done;
            task.verdict = v->second;
          }
          tasks.push_back(std::move(task));
        }
      }
    }
  }
  return tasks;
}

std::vector<AnnotatorProgress> compute_progress(const RecordGraph& graph,
                                                const std::vector<AnnotatorId>& extra) {
  std::set<AnnotatorId> who(extra.begin(), extra.end());
  for (const auto& a : graph.annotations) who.insert(a.annotator);
  std::vector<AnnotatorProgress> rows;
  for (const auto& a : who) {
    AnnotatorProgress p{a, {}, {}};
    for (const auto& t : derive_tasks(graph, a)) {
      auto& c = t.target == Target::counterfactual ? p.counterfactual : p.counterfactual_output;
      (t.status == TaskStatus::done ? c.done : c.open)++;
    }
    rows.push_back(p);
  }
  return rows;
}

// ---- service ----

namespace {

json count_json(const ProgressCount& c) { return json{{"done", c.done}, {"open", c.open}}; }

template <typename T>
T field(const json& body, const char* key) {
  auto it = body.find(key);
  if (it == body.end() || it->is_null()) {
    throw ValidationError(std::string("missing field '") + key + "'");
  }
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("field '") + key + "' has the wrong type");
  }
}

std::optional<std::string> opt_string(const json& body, const char* key) {
  auto it = body.find(key);
  if (it == body.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw ValidationError(std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

AnnotatorId human_annotator(const std::string& raw, const std::optional<std::string>& session) {
  AnnotatorId who = AnnotatorId::parse(raw);
  if (who.kind != AnnotatorKind::human) {
    throw ValidationError("only human annotators submit through the service");
  }
  if (session && *session != who.name) {
    throw AuthError("session belongs to " + *session + ", not " + who.name);
  }
  return who;
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const json::parse_error& e) {
    send_json(res, 400, json{{"error", std::string("malformed JSON: ") + e.what()}});
  } catch (const ValidationError& e) {
    send_json(res, 422, json{{"error", e.what()}, {"violations", e.violations()}});
  } catch (const NotFoundError& e) {
    send_json(res, 404, json{{"error", e.what()}});
  } catch (const ConflictError& e) {
    send_json(res, 409, json{{"error", e.what()}});
  } catch (const AuthError& e) {
    send_json(res, 403, json{{"error", e.what()}});
  } catch (const StorageError& e) {
    send_json(res, 503, json{{"error", e.what()}});
  } catch (const std::exception& e) {
    spdlog::error("request failed: {}", e.what());
    send_json(res, 500, json{{"error", e.what()}});
  }
}

}  // namespace

AnnotationService::AnnotationService(ServiceOptions opts) : opts_(std::move(opts)) {
  if (!opts_.roster.empty() && opts_.session_secret.empty()) {
    throw ConfigError("a roster needs a session secret");
  }
}

std::string AnnotationService::issue_token(const std::string& annotator) const {
  if (std::find(opts_.roster.begin(), opts_.roster.end(), annotator) == opts_.roster.end()) {
    throw AuthError("annotator '" + annotator + "' is not on the roster");
  }
  return annotator + "." + hmac_sha256_hex(opts_.session_secret, annotator);
}

std::optional<std::string> AnnotationService::verify_token(std::string_view token) const {
  auto dot = token.rfind('.');
  if (dot == std::string_view::npos) return std::nullopt;
  std::string name(token.substr(0, dot));
  if (std::find(opts_.roster.begin(), opts_.roster.end(), name) == opts_.roster.end()) {
    return std::nullopt;
  }
  if (!secure_equal(token.substr(dot + 1), hmac_sha256_hex(opts_.session_secret, name))) {
    return std::nullopt;
  }
  return name;
}

RecordGraph AnnotationService::snapshot(const std::string& run_id) const {
  return RunStore(opts_.store_root, run_id).load(false).graph;
}

UnitAnnotation AnnotationService::submit_annotation(const std::string& run_id, const json& body,
                                                    const std::optional<std::string>& session) {
  if (!body.is_object()) throw ValidationError("annotation must be a JSON object");
  UnitAnnotation a;
  a.annotator = human_annotator(field<std::string>(body, "annotator"), session);
  a.cf_id = field<std::string>(body, "cf_id");
  a.unit_id = field<std::string>(body, "unit_id");
  a.target = parse_target(field<std::string>(body, "target"));
  a.verdict = field<bool>(body, "verdict");
  a.note = opt_string(body, "note");

  std::lock_guard lock(write_mu_);
  RunStore store(opts_.store_root, run_id);
  const auto graph = store.load(false).graph;
  auto cf = std::find_if(graph.counterfactuals.begin(), graph.counterfactuals.end(),
                         [&](const auto& c) { return c.cf_id == a.cf_id; });
  if (cf == graph.counterfactuals.end()) throw NotFoundError("unknown counterfactual " + a.cf_id);
  auto unit = std::find_if(graph.units.begin(), graph.units.end(),
                           [&](const auto& u) { return u.unit_id == a.unit_id; });
  if (unit == graph.units.end()) throw NotFoundError("unknown unit " + a.unit_id);
  if (unit->explanation_id != cf->explanation_id) {
    throw ValidationError("unit " + a.unit_id + " and counterfactual " + a.cf_id +
                          " belong to different explanations");
  }
  auto expl = std::find_if(graph.explanations.begin(), graph.explanations.end(),
                           [&](const auto& e) { return e.id == cf->explanation_id; });
  if (expl == graph.explanations.end()) {
    throw NotFoundError("unknown explanation " + cf->explanation_id);
  }
  if (!routes_to(expl->task, unit->category, a.target)) {
    throw ValidationError(to_string(unit->category) + " unit " + a.unit_id + " is not judged against " +
                          to_string(a.target) + " for " + to_string(expl->task));
  }

  if (a.target == Target::counterfactual_output) {
    bool has_output = std::any_of(graph.outputs.begin(), graph.outputs.end(),
                                  [&](const auto& o) { return o.cf_id == a.cf_id; });
    if (!has_output) throw NotFoundError("counterfactual " + a.cf_id + " has no output");
    std::vector<AtomicUnit> units;
    for (const auto& u : graph.units) {
      if (u.explanation_id == expl->id) units.push_back(u);
    }
    std::vector<std::string> missing;
    for (const auto& u : relevant_units(expl->task, units, Target::counterfactual)) {
      bool seen = std::any_of(graph.annotations.begin(), graph.annotations.end(), [&](const auto& x) {
        return x.annotator == a.annotator && x.cf_id == a.cf_id && x.unit_id == u.unit_id &&
               x.target == Target::counterfactual;
      });
      if (!seen) missing.push_back(u.unit_id);
    }
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      throw ConflictError("simulatability verdicts for " + a.cf_id + " are incomplete (" + list +
                          "); judge the counterfactual before its output");
    }
  }

  auto lock_file = store.lock_writer();
  store.append(std::span<const UnitAnnotation>(&a, 1));
  return a;
}

ParseAudit AnnotationService::submit_audit(const std::string& run_id, const json& body,
                                           const std::optional<std::string>& session) {
  if (!body.is_object()) throw ValidationError("parse audit must be a JSON object");
  if (session) {
    auto who = opt_string(body, "annotator");
    if (who && *who != *session) throw AuthError("session belongs to " + *session);
  }
  ParseAudit audit;
  audit.explanation_id = field<std::string>(body, "explanation_id");
  audit.parsed_ok = field<bool>(body, "parsed_ok");
  if (auto kind = opt_string(body, "error_kind")) audit.error_kind = parse_error_kind(*kind);
  audit.note = opt_string(body, "note");
  if (auto v = check_record(audit); !v.empty()) throw ValidationError(v.front(), v);

  std::lock_guard lock(write_mu_);
  RunStore store(opts_.store_root, run_id);
  const auto graph = store.load(false).graph;
  bool known = std::any_of(graph.explanations.begin(), graph.explanations.end(),
                           [&](const auto& e) { return e.id == audit.explanation_id; });
  if (!known) throw NotFoundError("unknown explanation " + audit.explanation_id);
  auto lock_file = store.lock_writer();
  store.append(std::span<const ParseAudit>(&audit, 1));
  return audit;
}

void AnnotationService::install(httplib::Server& server) {
  const std::string origin = opts_.cors_origin;
  server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Headers", "Content-Type, Authorization"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
  });

  auto session_of = [this](const httplib::Request& req) -> std::optional<std::string> {
    if (opts_.roster.empty()) return std::nullopt;
    const auto header = req.get_header_value("Authorization");
    const std::string prefix = "Bearer ";
    if (header.rfind(prefix, 0) != 0) throw AuthError("missing session token");
    auto name = verify_token(std::string_view(header).substr(prefix.size()));
    if (!name) throw AuthError("invalid session token");
    return name;
  };

  server.Get("/roster", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, json{{"roster", opts_.roster}, {"sessions", !opts_.roster.empty()}});
  });

  server.Post("/session", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      auto body = json::parse(req.body);
      auto name = field<std::string>(body, "annotator");
      send_json(res, 200, json{{"annotator", name}, {"token", issue_token(name)}});
    });
  });

  server.Get(R"(/runs/([^/]+)/tasks)", [this](const httplib::Request& req,
                                               httplib::Response& res) {
    guarded(res, [&] {
      const auto graph = snapshot(req.matches[1]);
      std::optional<AnnotatorId> who;
      if (req.has_param("annotator") && !req.get_param_value("annotator").empty()) {
        who = AnnotatorId::parse(req.get_param_value("annotator"));
      }
      std::optional<TaskStatus> status;
      if (req.has_param("status") && !req.get_param_value("status").empty()) {
        status = parse_task_status(req.get_param_value("status"));
        if (!who) throw ValidationError("filtering by status needs an annotator");
      }
      json tasks = json::array();
      for (const auto& t : derive_tasks(graph, who)) {
        if (!status || t.status == *status) tasks.push_back(to_json_value(t));
      }
      send_json(res, 200, json{{"run_id", req.matches[1]}, {"tasks", std::move(tasks)}});
    });
  });

  server.Get(R"(/runs/([^/]+)/progress)", [this](const httplib::Request& req,
                                                  httplib::Response& res) {
    guarded(res, [&] {
      const auto graph = snapshot(req.matches[1]);
      std::vector<AnnotatorId> extra;
      for (const auto& name : opts_.roster) extra.push_back({AnnotatorKind::human, name});
      json rows = json::array();
      for (const auto& p : compute_progress(graph, extra)) {
        rows.push_back(json{{"annotator", p.annotator.str()},
                            {"counterfactual", count_json(p.counterfactual)},
                            {"counterfactual_output", count_json(p.counterfactual_output)},
                            {"total", count_json(p.total())}});
      }
      send_json(res, 200, json{{"run_id", req.matches[1]},
                               {"tasks_per_annotator", derive_tasks(graph, std::nullopt).size()},
                               {"annotators", std::move(rows)}});
    });
  });

  server.Get(R"(/runs/([^/]+)/explanations)", [this](const httplib::Request& req,
                                                      httplib::Response& res) {
    guarded(res, [&] {
      const auto graph = snapshot(req.matches[1]);
      std::map<std::string, const ParseAudit*> latest;
      for (const auto& a : graph.audits) latest[a.explanation_id] = &a;
      json out = json::array();
      for (const auto& e : graph.explanations) {
        json units = json::array();
        for (const auto& u : graph.units) {
          if (u.explanation_id == e.id) units.push_back(u);
        }
        auto a = latest.find(e.id);
        out.push_back(json{{"explanation", e},
                           {"units", std::move(units)},
                           {"audit", a == latest.end() ? json(nullptr) : json(*a->second)}});
      }
      send_json(res, 200, json{{"run_id", req.matches[1]}, {"explanations", std::move(out)}});
    });
  });

  server.Post(R"(/runs/([^/]+)/annotations)", [this, session_of](const httplib::Request& req,
                                                                 httplib::Response& res) {
    guarded(res, [&] {
      auto session = session_of(req);
      auto body = json::parse(req.body);
      if (session && !body.contains("annotator")) body["annotator"] = *session;
      send_json(res, 201, json(submit_annotation(req.matches[1], body, session)));
    });
  });

  server.Post(R"(/runs/([^/]+)/parse-audits)", [this, session_of](const httplib::Request& req,
                                                                  httplib::Response& res) {
    guarded(res, [&] {
      auto session = session_of(req);
      send_json(res, 201, json(submit_audit(req.matches[1], json::parse(req.body), session)));
    });
  });

  if (opts_.ui_dir) {
    if (!server.set_mount_point("/", opts_.ui_dir->string())) {
      throw ConfigError("UI directory " + opts_.ui_dir->string() + " does not exist");
    }
  }
}

}  // namespace cfsim
