#include "cfsim/gateway.hpp"

#include <fstream>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "cfsim/errors.hpp"
#include "cfsim/hash.hpp"
#include "cfsim/model.hpp"

namespace cfsim {

void validate(const ChatRequest& req) {
  if (req.messages.empty()) throw ValidationError("chat request has no messages");
  if (req.messages.front().role == Role::assistant) {
    throw ValidationError("first chat message must be system or user");
  }
  if (!(req.temperature >= 0.0)) throw ValidationError("temperature must be >= 0");
  if (req.max_tokens <= 0) throw ValidationError("max_tokens must be positive");
  if (req.model_id.empty()) throw ValidationError("chat request has no model_id");
}

json canonical_request(const ChatRequest& req) {
  json messages = json::array();
  for (const auto& m : req.messages) {
    messages.push_back(json{{"role", m.role}, {"content", m.content}});
  }
  return json{{"request_tag", req.request_tag},
              {"model_id", req.model_id},
              {"body",
               {{"messages", std::move(messages)},
                {"temperature", req.temperature},
                {"max_tokens", req.max_tokens}}}};
}

std::string request_key(const ChatRequest& req) {
  return sha256_hex(canonical_request(req).dump());
}

std::string embedding_key(std::string_view text, std::string_view model_id) {
  json j{{"request_tag", "embed"},
         {"model_id", std::string(model_id)},
         {"body", {{"input", std::string(text)}}}};
  return sha256_hex(j.dump());
}

void to_json(json& j, const TranscriptEntry& e) {
  j = json{{"key", e.key}, {"response", e.response}, {"recorded_at", e.recorded_at}};
}

void from_json(const json& j, TranscriptEntry& e) {
  e.key = j.at("key").get<std::string>();
  e.response = j.at("response");
  e.recorded_at = j.value("recorded_at", std::string{});
}

// ---- Transcript ----

Transcript::Transcript(std::filesystem::path path) : path_(std::move(path)) {
  std::ifstream in(path_);
  if (!in) return;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    TranscriptEntry e;
    try {
      e = json::parse(line).get<TranscriptEntry>();
    } catch (const std::exception& ex) {
      throw LoadError(path_.string(), lineno, ex.what());
    }
    if (!entries_.emplace(e.key, e).second) {
      throw LoadError(path_.string(), lineno, "duplicate transcript key " + e.key);
    }
  }
}

std::shared_ptr<const Transcript> Transcript::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw NotFoundError("transcript not found: " + path.string());
  }
  return std::make_shared<const Transcript>(path);
}

std::optional<TranscriptEntry> Transcript::find(const std::string& key) const {
  std::shared_lock lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

bool Transcript::contains(const std::string& key) const {
  std::shared_lock lock(mu_);
  return entries_.contains(key);
}

bool Transcript::append(const TranscriptEntry& entry) {
  std::unique_lock lock(mu_);
  if (entries_.contains(entry.key)) return false;
  if (!path_.empty()) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    out << json(entry).dump() << '\n';
    out.flush();
    if (!out) throw StorageError("cannot append to transcript " + path_.string());
  }
  entries_.emplace(entry.key, entry);
  return true;
}

std::size_t Transcript::size() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

// ---- wire adapters ----

namespace {

json openai_messages(const ChatRequest& req) {
  json messages = json::array();
  for (const auto& m : req.messages) {
    messages.push_back(json{{"role", m.role}, {"content", m.content}});
  }
  return messages;
}

std::vector<WireAdapter> make_adapters() {
  std::vector<WireAdapter> v;
  v.push_back(WireAdapter{
      "openai", "/v1/chat/completions", "/v1/embeddings",
      [](const ChatRequest& r) {
        return json{{"model", r.model_id},
                    {"messages", openai_messages(r)},
                    {"temperature", r.temperature},
                    {"max_tokens", r.max_tokens}};
      },
      [](const json& j) {
        const auto& content = j.at("choices").at(0).at("message").at("content");
        return content.is_null() ? std::string{} : content.get<std::string>();
      },
      [](const std::string& text, const std::string& model) {
        return json{{"model", model}, {"input", text}};
      },
      [](const json& j) {
        return j.at("data").at(0).at("embedding").get<std::vector<double>>();
      }});
  v.push_back(WireAdapter{
      "ollama", "/api/chat", "/api/embeddings",
      [](const ChatRequest& r) {
        return json{{"model", r.model_id},
                    {"messages", openai_messages(r)},
                    {"stream", false},
                    {"options", {{"temperature", r.temperature}, {"num_predict", r.max_tokens}}}};
      },
      [](const json& j) { return j.at("message").at("content").get<std::string>(); },
      [](const std::string& text, const std::string& model) {
        return json{{"model", model}, {"prompt", text}};
      },
      [](const json& j) { return j.at("embedding").get<std::vector<double>>(); }});
  return v;
}

bool blank(const std::string& s) {
  return s.find_first_not_of(" \t\r\n") == std::string::npos;
}

}  // namespace

const WireAdapter& wire_adapter(const std::string& name) {
  static const std::vector<WireAdapter> adapters = make_adapters();
  for (const auto& a : adapters) {
    if (a.name == name) return a;
  }
  throw ConfigError("unknown wire adapter '" + name + "'");
}

// ---- HttpBackend ----

HttpBackend::HttpBackend(EndpointConfig cfg)
    : cfg_(std::move(cfg)), adapter_(&wire_adapter(cfg_.adapter)) {
  if (cfg_.base_url.empty()) throw ConfigError("live transport needs an endpoint base_url");
  if (cfg_.retry.max_retries < 0) throw ConfigError("max_retries must be >= 0");
}

json HttpBackend::post(const std::string& path, const json& body) {
  httplib::Client client(cfg_.base_url);
  client.set_connection_timeout(cfg_.timeout_seconds, 0);
  client.set_read_timeout(cfg_.timeout_seconds, 0);
  client.set_write_timeout(cfg_.timeout_seconds, 0);
  httplib::Headers headers;
  if (!cfg_.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + cfg_.api_key);
  }
  const std::string payload = body.dump();

  auto backoff = cfg_.retry.initial_backoff;
  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.retry.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff = std::chrono::milliseconds(static_cast<long long>(
          static_cast<double>(backoff.count()) * cfg_.retry.backoff_multiplier));
    }
    ++attempts_;
    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = "connection failure: " + httplib::to_string(res.error());
      spdlog::warn("POST {}{} failed ({}), attempt {}", cfg_.base_url, path, last_error,
                   attempt + 1);
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      spdlog::warn("POST {}{} returned {}, attempt {}", cfg_.base_url, path, res->status,
                   attempt + 1);
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      throw TransportError("HTTP " + std::to_string(res->status) + " from " + path + ": " +
                           res->body);
    }
    try {
      return json::parse(res->body);
    } catch (const json::exception& ex) {
      throw TransportError("malformed JSON from " + path + ": " + ex.what());
    }
  }
  throw TransportError("giving up on " + path + " after " +
                       std::to_string(cfg_.retry.max_retries) + " retries: " + last_error);
}

std::string HttpBackend::chat(const ChatRequest& req) {
  const auto& path = cfg_.chat_path.empty() ? adapter_->default_chat_path : cfg_.chat_path;
  json resp = post(path, adapter_->chat_body(req));
  try {
    return adapter_->chat_text(resp);
  } catch (const json::exception& ex) {
    throw TransportError("unexpected chat response shape: " + std::string(ex.what()));
  }
}

std::vector<double> HttpBackend::embed(const std::string& text, const std::string& model_id) {
  const auto& path =
      cfg_.embed_path.empty() ? adapter_->default_embed_path : cfg_.embed_path;
  json resp = post(path, adapter_->embed_body(text, model_id));
  try {
    return adapter_->embed_values(resp);
  } catch (const json::exception& ex) {
    throw TransportError("unexpected embedding response shape: " + std::string(ex.what()));
  }
}

// ---- Gateway ----

Gateway::Gateway(GatewayOptions opts) : opts_(std::move(opts)) {
  if (opts_.max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
  if (opts_.mode == TransportMode::replay && !opts_.replay_source) {
    throw ConfigError("replay transport needs a transcript");
  }
  if (opts_.mode != TransportMode::replay && !opts_.backend) {
    throw ConfigError("live/record transport needs a backend");
  }
}

std::optional<Gateway::Answer> Gateway::from_sinks(const std::string& key) const {
  for (const auto& sink : opts_.sinks) {
    if (auto e = sink->find(key)) return Answer{e->response, e->recorded_at};
  }
  return std::nullopt;
}

Gateway::Answer Gateway::fetch_chat(const ChatRequest& req, const std::string& key) {
  if (opts_.mode == TransportMode::replay) {
    auto e = opts_.replay_source->find(key);
    if (!e) throw ReplayMissError(key);
    return {e->response, e->recorded_at};
  }
  if (opts_.mode == TransportMode::record) {
    if (auto hit = from_sinks(key)) return *hit;
  }
  ++upstream_calls_;
  return {json(opts_.backend->chat(req)), utc_now()};
}

Gateway::Answer Gateway::fetch_embedding(const std::string& text, const std::string& model_id,
                                         const std::string& key) {
  if (opts_.mode == TransportMode::replay) {
    auto e = opts_.replay_source->find(key);
    if (!e) throw ReplayMissError(key);
    return {e->response, e->recorded_at};
  }
  if (opts_.mode == TransportMode::record) {
    if (auto hit = from_sinks(key)) return *hit;
  }
  ++upstream_calls_;
  return {json(opts_.backend->embed(text, model_id)), utc_now()};
}

void Gateway::commit(const std::string& key, const Answer& answer) {
  for (const auto& sink : opts_.sinks) {
    sink->append(TranscriptEntry{key, answer.response, answer.recorded_at});
  }
}

namespace {

std::string chat_text(const json& response, const std::string& key) {
  if (!response.is_string()) {
    throw TransportError("transcript entry " + key + " is not a chat response");
  }
  auto text = response.get<std::string>();
  if (blank(text)) throw EmptyResponseError("empty model response for key " + key);
  return text;
}

}  // namespace

std::string Gateway::complete_chat(const ChatRequest& req) {
  validate(req);
  const auto key = request_key(req);
  auto answer = fetch_chat(req, key);
  auto text = chat_text(answer.response, key);
  commit(key, answer);
  return text;
}

template <typename Fn>
void Gateway::run_bounded(std::size_t n, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(n, static_cast<std::size_t>(opts_.max_in_flight));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::vector<Outcome<std::string>> Gateway::complete_batch(std::span<const ChatRequest> reqs) {
  std::vector<std::string> keys(reqs.size());
  std::unordered_map<std::string, std::size_t> first_of;
  std::vector<std::size_t> unique;
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    keys[i] = request_key(reqs[i]);
    if (first_of.emplace(keys[i], i).second) unique.push_back(i);
  }

  std::vector<Outcome<Answer>> answers(reqs.size());
  run_bounded(unique.size(), [&](std::size_t u) {
    const std::size_t i = unique[u];
    try {
      validate(reqs[i]);
      answers[i].value = fetch_chat(reqs[i], keys[i]);
    } catch (...) {
      answers[i].error = std::current_exception();
    }
  });

  std::vector<Outcome<std::string>> out(reqs.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    const auto& a = answers[first_of.at(keys[i])];
    if (!a.ok()) {
      out[i].error = a.error;
      continue;
    }
    try {
      out[i].value = chat_text(a.value->response, keys[i]);
      commit(keys[i], *a.value);
    } catch (...) {
      out[i].error = std::current_exception();
    }
  }
  return out;
}

EmbeddingVector Gateway::check_embedding(const json& values, const std::string& model_id) {
  if (!values.is_array() || values.empty()) {
    throw TransportError("embedding response is not a non-empty array");
  }
  EmbeddingVector v{values.get<std::vector<double>>(), model_id};
  std::lock_guard lock(dim_mu_);
  if (!embed_dim_) {
    embed_dim_ = v.values.size();
    embed_model_ = model_id;
  } else if (*embed_dim_ != v.values.size()) {
    throw DimensionError("embedding has dimension " + std::to_string(v.values.size()) +
                         " but earlier vectors in this run have " +
                         std::to_string(*embed_dim_));
  } else if (embed_model_ != model_id) {
    throw DimensionError("embedding model " + model_id + " differs from run model " +
                         embed_model_);
  }
  return v;
}

EmbeddingVector Gateway::embed_text(const std::string& text, const std::string& model_id) {
  if (text.empty()) throw ValidationError("cannot embed empty text");
  const auto key = embedding_key(text, model_id);
  auto answer = fetch_embedding(text, model_id, key);
  auto v = check_embedding(answer.response, model_id);
  commit(key, answer);
  return v;
}

std::vector<Outcome<EmbeddingVector>> Gateway::embed_batch(std::span<const std::string> texts,
                                                           const std::string& model_id) {
  std::vector<std::string> keys(texts.size());
  std::unordered_map<std::string, std::size_t> first_of;
  std::vector<std::size_t> unique;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    keys[i] = embedding_key(texts[i], model_id);
    if (first_of.emplace(keys[i], i).second) unique.push_back(i);
  }
  std::vector<Outcome<Answer>> answers(texts.size());
  run_bounded(unique.size(), [&](std::size_t u) {
    const std::size_t i = unique[u];
    try {
      if (texts[i].empty()) throw ValidationError("cannot embed empty text");
      answers[i].value = fetch_embedding(texts[i], model_id, keys[i]);
    } catch (...) {
      answers[i].error = std::current_exception();
    }
  });
  std::vector<Outcome<EmbeddingVector>> out(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto& a = answers[first_of.at(keys[i])];
    if (!a.ok()) {
      out[i].error = a.error;
      continue;
    }
    try {
      out[i].value = check_embedding(a.value->response, model_id);
      commit(keys[i], *a.value);
    } catch (...) {
      out[i].error = std::current_exception();
    }
  }
  return out;
}

}  // namespace cfsim
