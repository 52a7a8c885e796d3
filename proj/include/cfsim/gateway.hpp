#pragma once

// Chat-completion and embedding client with live, record and replay
// transports. Every request is keyed by a content hash of its canonical
// JSON, so a recorded transcript answers an identical pipeline run offline.

#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace cfsim {

using json = nlohmann::json;

enum class Role { system, user, assistant };

NLOHMANN_JSON_SERIALIZE_ENUM(Role, {{Role::system, "system"},
                                    {Role::user, "user"},
                                    {Role::assistant, "assistant"}})

struct ChatMessage {
  Role role = Role::user;
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::string model_id;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 1024;
  std::string request_tag;  // pipeline stage name
  bool operator==(const ChatRequest&) const = default;
};

// Throws ValidationError when the request breaks its invariants.
void validate(const ChatRequest& req);

// Canonical request JSON: the fields that identify a request, with sorted
// keys. Timestamps never enter it.
json canonical_request(const ChatRequest& req);
std::string request_key(const ChatRequest& req);
std::string embedding_key(std::string_view text, std::string_view model_id);

struct EmbeddingVector {
  std::vector<double> values;
  std::string model_id;
  bool operator==(const EmbeddingVector&) const = default;
};

struct TranscriptEntry {
  std::string key;
  json response;  // string for chat, array of numbers for embeddings
  std::string recorded_at;
};

void to_json(json& j, const TranscriptEntry& e);
void from_json(const json& j, TranscriptEntry& e);

// JSON-lines transcript. Loading is the only mutation of a replay source;
// an appendable transcript serializes its writes.
class Transcript {
 public:
  Transcript() = default;
  // Loads `path` if it exists. Later appends go to the same file.
  explicit Transcript(std::filesystem::path path);

  static std::shared_ptr<const Transcript> load(const std::filesystem::path& path);

  std::optional<TranscriptEntry> find(const std::string& key) const;
  bool contains(const std::string& key) const;

  // Appends unless the key is already present. Returns whether it wrote.
  bool append(const TranscriptEntry& entry);

  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, TranscriptEntry> entries_;
};

// Upstream model access. Implementations throw TransportError.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string chat(const ChatRequest& req) = 0;
  virtual std::vector<double> embed(const std::string& text, const std::string& model_id) = 0;
};

struct RetryPolicy {
  int max_retries = 2;
  std::chrono::milliseconds initial_backoff{500};
  double backoff_multiplier = 2.0;
};

struct EndpointConfig {
  std::string base_url;          // e.g. "https://api.openai.com"
  std::string adapter = "openai";  // "openai" or "ollama"
  std::string chat_path;         // adapter default when empty
  std::string embed_path;        // adapter default when empty
  std::string api_key;           // resolved from the environment by the caller
  RetryPolicy retry;
  int timeout_seconds = 120;
};

// Request/response shapes of one upstream API dialect.
struct WireAdapter {
  std::string name;
  std::string default_chat_path;
  std::string default_embed_path;
  std::function<json(const ChatRequest&)> chat_body;
  std::function<std::string(const json&)> chat_text;
  std::function<json(const std::string&, const std::string&)> embed_body;
  std::function<std::vector<double>(const json&)> embed_values;
};

// Throws ConfigError for unknown names.
const WireAdapter& wire_adapter(const std::string& name);

// HTTP transport. Retries connection failures, 429 and 5xx responses up to
// retry.max_retries times with exponential backoff.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(EndpointConfig cfg);
  std::string chat(const ChatRequest& req) override;
  std::vector<double> embed(const std::string& text, const std::string& model_id) override;

  std::size_t attempts() const { return attempts_.load(); }

 private:
  json post(const std::string& path, const json& body);

  EndpointConfig cfg_;
  const WireAdapter* adapter_;
  std::atomic<std::size_t> attempts_{0};
};

enum class TransportMode { live, record, replay };

NLOHMANN_JSON_SERIALIZE_ENUM(TransportMode, {{TransportMode::live, "live"},
                                             {TransportMode::record, "record"},
                                             {TransportMode::replay, "replay"}})

template <typename T>
struct Outcome {
  std::optional<T> value;
  std::exception_ptr error;
  bool ok() const { return value.has_value(); }
};

struct GatewayOptions {
  TransportMode mode = TransportMode::replay;
  std::shared_ptr<Backend> backend;                 // live/record
  std::shared_ptr<const Transcript> replay_source;  // replay
  // Every answered request is logged here (first answer per key wins).
  std::vector<std::shared_ptr<Transcript>> sinks;
  int max_in_flight = 4;
};

class Gateway {
 public:
  explicit Gateway(GatewayOptions opts);

  // live: upstream call. record: a key already present in a sink is served
  // from it, otherwise upstream. replay: transcript lookup only.
  std::string complete_chat(const ChatRequest& req);

  // Runs up to max_in_flight requests concurrently. Results and transcript
  // writes follow request order; identical requests are sent once.
  std::vector<Outcome<std::string>> complete_batch(std::span<const ChatRequest> reqs);

  EmbeddingVector embed_text(const std::string& text, const std::string& model_id);
  std::vector<Outcome<EmbeddingVector>> embed_batch(std::span<const std::string> texts,
                                                    const std::string& model_id);

  TransportMode mode() const { return opts_.mode; }
  std::size_t upstream_calls() const { return upstream_calls_.load(); }

 private:
  struct Answer {
    json response;
    std::string recorded_at;
  };

  Answer fetch_chat(const ChatRequest& req, const std::string& key);
  Answer fetch_embedding(const std::string& text, const std::string& model_id,
                         const std::string& key);
  std::optional<Answer> from_sinks(const std::string& key) const;
  void commit(const std::string& key, const Answer& answer);
  EmbeddingVector check_embedding(const json& values, const std::string& model_id);

  template <typename Fn>
  void run_bounded(std::size_t n, Fn&& fn);

  GatewayOptions opts_;
  std::atomic<std::size_t> upstream_calls_{0};
  std::mutex dim_mu_;
  std::optional<std::size_t> embed_dim_;
  std::string embed_model_;
};

}  // namespace cfsim
