#pragma once

// Chat-completion client for OpenAI-compatible endpoints with an on-disk
// response cache, bounded-concurrency batching and a replay backend that
// serves cached responses without touching the network.

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ster/error.hpp"
#include "ster/io.hpp"
#include "ster/prompt_forge.hpp"

namespace ster {

struct ChatMessage {
  std::string role;
  std::string text;
  std::vector<std::string> images;  // image references, resolved against GatewayConfig::image_root
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 512;

  // Field order in the source document is irrelevant: json objects are
  // key-sorted before hashing.
  json canonical() const {
    json msgs = json::array();
    for (const auto& m : messages)
      msgs.push_back({{"role", m.role}, {"text", m.text}, {"images", m.images}});
    return {{"model", model}, {"messages", msgs}, {"temperature", temperature},
            {"max_tokens", max_tokens}};
  }

  std::string request_key() const { return sha256_hex(canonical_dump(canonical())); }
};

inline ChatRequest request_from_json(const json& j) {
  ChatRequest r;
  r.model = j.at("model").get<std::string>();
  r.temperature = j.at("temperature").get<double>();
  r.max_tokens = j.at("max_tokens").get<int>();
  for (const auto& m : j.at("messages"))
    r.messages.push_back({m.at("role").get<std::string>(), m.at("text").get<std::string>(),
                          m.value("images", std::vector<std::string>{})});
  return r;
}

inline ChatRequest to_chat_request(const PromptBundle& bundle, const std::string& model,
                                   double temperature = 0.0, int max_tokens = 512) {
  ChatRequest r;
  r.model = model;
  r.temperature = temperature;
  r.max_tokens = max_tokens;
  if (!bundle.system.empty()) r.messages.push_back({"system", bundle.system, {}});
  r.messages.push_back({"user", bundle.user, bundle.images});
  return r;
}

struct Usage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  std::int64_t total_tokens = 0;

  bool operator==(const Usage&) const = default;
};

struct ChatResult {
  std::string text;
  Usage usage;
  bool from_cache = false;
};

enum class Backend { kHttp, kReplay };

inline std::optional<Backend> parse_backend(std::string_view s) {
  if (s == "http") return Backend::kHttp;
  if (s == "replay") return Backend::kReplay;
  return std::nullopt;
}

inline std::string_view to_string(Backend b) { return b == Backend::kHttp ? "http" : "replay"; }

struct RetryPolicy {
  int max_attempts = 3;
  double base_backoff = 1.0;  // seconds; the wait before attempt k >= 2 is base * 2^(k-2)
};

struct GatewayConfig {
  std::string endpoint_url = "http://localhost:8000/v1";
  std::string api_key_env = "STER_API_KEY";
  int max_parallel = 4;
  RetryPolicy retry;
  fs::path cache_dir = "cache";
  Backend backend = Backend::kReplay;
  fs::path image_root;  // base for relative image references
  double timeout_seconds = 120.0;
};

inline constexpr const char* kBackendEnvVar = "STER_GATEWAY_BACKEND";

// --- transport ------------------------------------------------------------------

struct HttpRequest {
  std::string url;
  std::map<std::string, std::string> headers;
  std::string body;
};

struct HttpResponse {
  int status = 0;  // 0: no response (connection failure, timeout)
  std::string body;
  std::string error;
};

using Transport = std::function<HttpResponse(const HttpRequest&)>;

inline Transport http_transport(double timeout_seconds = 120.0) {
  return [timeout_seconds](const HttpRequest& req) {
    const auto scheme_end = req.url.find("://");
    const auto path_start = req.url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    const std::string origin = req.url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : req.url.substr(path_start);
    httplib::Client client(origin);
    const auto secs = static_cast<time_t>(timeout_seconds);
    client.set_connection_timeout(secs, 0);
    client.set_read_timeout(secs, 0);
    client.set_write_timeout(secs, 0);
    httplib::Headers headers;
    for (const auto& [k, v] : req.headers) headers.emplace(k, v);
    HttpResponse out;
    auto res = client.Post(path, headers, req.body, "application/json");
    if (!res) {
      out.error = httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    out.body = res->body;
    return out;
  };
}

inline bool is_transient_status(int status) {
  return status == 0 || status == 408 || status == 425 || status == 429 || status >= 500;
}

// --- gateway ----------------------------------------------------------------------

struct BatchResult {
  std::optional<ChatResult> result;
  std::exception_ptr error;
  std::string error_message;

  bool ok() const { return result.has_value(); }
};

class Gateway {
 public:
  explicit Gateway(GatewayConfig config, Transport transport = {})
      : config_(std::move(config)), transport_(std::move(transport)) {
    if (config_.max_parallel < 1) throw ValidationError("gateway max_parallel must be >= 1");
    if (config_.retry.max_attempts < 1) throw ValidationError("gateway max_attempts must be >= 1");
    if (const char* env = std::getenv(kBackendEnvVar); env && *env) {
      const auto b = parse_backend(env);
      if (!b) throw ValidationError(std::string(kBackendEnvVar) + " must be 'http' or 'replay'");
      config_.backend = *b;
    }
    if (!transport_) transport_ = http_transport(config_.timeout_seconds);
  }

  const GatewayConfig& config() const { return config_; }
  Backend backend() const { return config_.backend; }

  // Requests handed to the transport (each retry counts).
  std::size_t network_calls() const { return network_calls_.load(); }

  fs::path cache_path(const std::string& key) const { return config_.cache_dir / (key + ".json"); }

  std::optional<ChatResult> lookup(const ChatRequest& req) const {
    const fs::path p = cache_path(req.request_key());
    if (!fs::exists(p)) return std::nullopt;
    const json doc = read_json_file(p);
    ChatResult r;
    const json& resp = doc.at("response");
    r.text = resp.at("text").get<std::string>();
    const json& u = resp.value("usage", json::object());
    r.usage = {u.value("prompt_tokens", std::int64_t{0}), u.value("completion_tokens", std::int64_t{0}),
               u.value("total_tokens", std::int64_t{0})};
    r.from_cache = true;
    return r;
  }

  void store(const ChatRequest& req, const ChatResult& result) const {
    const json doc = {{"request", req.canonical()},
                      {"response",
                       {{"text", result.text},
                        {"usage",
                         {{"prompt_tokens", result.usage.prompt_tokens},
                          {"completion_tokens", result.usage.completion_tokens},
                          {"total_tokens", result.usage.total_tokens}}}}}};
    write_file_atomic(cache_path(req.request_key()), pretty_dump(doc));
  }

  ChatResult complete(const ChatRequest& req) {
    if (auto cached = lookup(req)) return *cached;
    if (config_.backend == Backend::kReplay)
      throw CacheMiss("no cached response for request_key " + req.request_key() + " in " +
                      config_.cache_dir.string());
    ChatResult result = post_with_retry(req);
    store(req, result);
    return result;
  }

  // At most max_parallel requests in flight; results are positional and a
  // failing item never aborts the rest.
  std::vector<BatchResult> complete_batch(const std::vector<ChatRequest>& reqs) {
    std::vector<BatchResult> out(reqs.size());
    if (reqs.empty()) return out;
    std::atomic<std::size_t> next{0};
    const auto work = [&] {
      for (std::size_t i = next++; i < reqs.size(); i = next++) {
        try {
          out[i].result = complete(reqs[i]);
        } catch (const std::exception& e) {
          out[i].error = std::current_exception();
          out[i].error_message = e.what();
        }
      }
    };
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(config_.max_parallel), reqs.size());
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
      work();
    }
    return out;
  }

  json wire_body(const ChatRequest& req) const {
    json messages = json::array();
    for (const auto& m : req.messages) {
      if (m.images.empty()) {
        messages.push_back({{"role", m.role}, {"content", m.text}});
        continue;
      }
      json parts = json::array();
      for (const auto& img : m.images)
        parts.push_back({{"type", "image_url"}, {"image_url", {{"url", data_url(img)}}}});
      parts.push_back({{"type", "text"}, {"text", m.text}});
      messages.push_back({{"role", m.role}, {"content", parts}});
    }
    return {{"model", req.model}, {"messages", messages}, {"temperature", req.temperature},
            {"max_tokens", req.max_tokens}};
  }

 private:
  std::string data_url(const std::string& ref) const {
    fs::path p(ref);
    if (p.is_relative() && !config_.image_root.empty()) p = config_.image_root / p;
    std::string ext = p.extension().string();
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    const std::string mime = (ext == ".jpg" || ext == ".jpeg") ? "image/jpeg" : "image/png";
    std::string bytes;
    try {
      bytes = read_text_file(p);
    } catch (const Error&) {
      throw EndpointError("image reference " + ref + " not readable at " + p.string());
    }
    return "data:" + mime + ";base64," + httplib::detail::base64_encode(bytes);
  }

  ChatResult post_with_retry(const ChatRequest& req) {
    HttpRequest http;
    http.url = config_.endpoint_url;
    while (!http.url.empty() && http.url.back() == '/') http.url.pop_back();
    http.url += "/chat/completions";
    http.headers["Content-Type"] = "application/json";
    if (!config_.api_key_env.empty()) {
      const char* key = std::getenv(config_.api_key_env.c_str());
      if (!key) throw AuthError("environment variable " + config_.api_key_env + " is not set");
      http.headers["Authorization"] = std::string("Bearer ") + key;
    }
    http.body = wire_body(req).dump();

    std::string last;
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
      if (attempt > 1 && config_.retry.base_backoff > 0) {
        const double wait = config_.retry.base_backoff * std::pow(2.0, attempt - 2);
        std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      }
      ++network_calls_;
      const HttpResponse resp = transport_(http);
      if (resp.status >= 200 && resp.status < 300) return parse_response(resp.body);
      last = resp.status == 0 ? "connection failed: " + resp.error
                              : "HTTP " + std::to_string(resp.status) + ": " + resp.body.substr(0, 200);
      if (!is_transient_status(resp.status)) break;
    }
    throw EndpointError(config_.endpoint_url + " failed after retries (" + last + ")");
  }

  static ChatResult parse_response(const std::string& body) {
    try {
      const json doc = json::parse(body);
      ChatResult r;
      const json& content = doc.at("choices").at(0).at("message").at("content");
      if (content.is_string()) {
        r.text = content.get<std::string>();
      } else {
        for (const auto& part : content)
          if (part.value("type", "") == "text") r.text += part.value("text", "");
      }
      if (doc.contains("usage") && doc["usage"].is_object()) {
        const json& u = doc["usage"];
        r.usage = {u.value("prompt_tokens", std::int64_t{0}), u.value("completion_tokens", std::int64_t{0}),
                   u.value("total_tokens", std::int64_t{0})};
      }
      return r;
    } catch (const json::exception& e) {
      throw EndpointError(std::string("malformed chat completion response: ") + e.what());
    }
  }

  GatewayConfig config_;
  Transport transport_;
  std::atomic<std::size_t> network_calls_{0};
};

inline json to_json(const GatewayConfig& c) {
  return {{"endpoint_url", c.endpoint_url},
          {"api_key_env", c.api_key_env},
          {"max_parallel", c.max_parallel},
          {"retry", {{"max_attempts", c.retry.max_attempts}, {"base_backoff", c.retry.base_backoff}}},
          {"cache_dir", c.cache_dir.string()},
          {"backend", to_string(c.backend)},
          {"timeout_seconds", c.timeout_seconds}};
}

// Missing keys keep their defaults.
inline GatewayConfig gateway_config_from_json(const json& j) {
  GatewayConfig c;
  if (!j.is_object()) throw ParseError("gateway: expected an object");
  try {
    c.endpoint_url = j.value("endpoint_url", c.endpoint_url);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.max_parallel = j.value("max_parallel", c.max_parallel);
    if (j.contains("retry")) {
      c.retry.max_attempts = j["retry"].value("max_attempts", c.retry.max_attempts);
      c.retry.base_backoff = j["retry"].value("base_backoff", c.retry.base_backoff);
    }
    c.cache_dir = j.value("cache_dir", c.cache_dir.string());
    c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
    if (j.contains("backend")) {
      const auto b = parse_backend(j["backend"].get<std::string>());
      if (!b) throw ParseError("gateway.backend must be 'http' or 'replay'");
      c.backend = *b;
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("gateway: ") + e.what());
  }
  if (c.max_parallel < 1) throw ValidationError("gateway.max_parallel must be >= 1");
  if (c.retry.max_attempts < 1) throw ValidationError("gateway.retry.max_attempts must be >= 1");
  return c;
}

}  // namespace ster
