#pragma once

// Semantic variations fetched from a chat/completions-style endpoint.

#include <chrono>
#include <cstdlib>
#include <functional>
#include <memory>
#include <ostream>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cwmerge/embedded_data.hpp"
#include "cwmerge/error.hpp"
#include "cwmerge/eval_metrics.hpp"
#include "cwmerge/parallel.hpp"
#include "cwmerge/records.hpp"

namespace cwmerge {

/// Endpoint failure. Transient failures (connection errors, 429, 5xx) are
/// retried; others are not.
class CompletionError : public IoError {
 public:
  CompletionError(const std::string& what, bool transient) : IoError(what), transient_(transient) {}
  bool transient() const { return transient_; }

 private:
  bool transient_;
};

class CompletionClient {
 public:
  virtual ~CompletionClient() = default;
  /// Returns the text of each of the `n` completions for `prompt`.
  virtual std::vector<std::string> complete(const std::string& prompt, int n) = 0;
};

struct EndpointConfig {
  std::string url;  // e.g. http://localhost:8000/v1/chat/completions
  std::string model = "Llama-3.1-70B-Instruct";
  std::string token_env = "CWMERGE_API_TOKEN";
  double temperature = 0.7;
  std::chrono::seconds timeout{60};
  std::ostream* log = nullptr;
};

class HttpCompletionClient : public CompletionClient {
 public:
  explicit HttpCompletionClient(EndpointConfig cfg) : cfg_(std::move(cfg)) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(cfg_.url, m, url_re)) throw ValidationError("endpoint URL '" + cfg_.url + "' is not http(s)://host[:port]/path");
    origin_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "/v1/chat/completions";
    if (const char* tok = std::getenv(cfg_.token_env.c_str())) token_ = tok;
  }

  std::vector<std::string> complete(const std::string& prompt, int n) override {
    const nlohmann::json body{{"model", cfg_.model},
                              {"messages", {{{"role", "user"}, {"content", prompt}}}},
                              {"n", n},
                              {"temperature", cfg_.temperature}};
    const std::string payload = body.dump();
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    log("POST " + origin_ + path_ + (token_.empty() ? "" : " [Authorization: Bearer ***]") + " " + payload);

    httplib::Client client(origin_);
    client.set_connection_timeout(cfg_.timeout);
    client.set_read_timeout(cfg_.timeout);
    auto res = client.Post(path_, headers, payload, "application/json");
    if (!res) throw CompletionError("endpoint unreachable: " + httplib::to_string(res.error()), true);
    log("<- " + std::to_string(res->status) + " " + res->body);
    if (res->status == 429 || res->status >= 500)
      throw CompletionError("endpoint returned HTTP " + std::to_string(res->status), true);
    if (res->status < 200 || res->status >= 300)
      throw CompletionError("endpoint returned HTTP " + std::to_string(res->status), false);

    std::vector<std::string> out;
    try {
      const auto j = nlohmann::json::parse(res->body);
      for (const auto& choice : j.at("choices")) {
        if (choice.contains("message")) out.push_back(choice.at("message").at("content").get<std::string>());
        else out.push_back(choice.at("text").get<std::string>());
      }
    } catch (const nlohmann::json::exception&) {
      throw CompletionError("non-parseable completion response", false);
    }
    return out;
  }

 private:
  void log(const std::string& line) const {
    if (cfg_.log) *cfg_.log << line << '\n';
  }

  EndpointConfig cfg_;
  std::string origin_;
  std::string path_;
  std::string token_;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds base_delay{500};
  /// Overridable so tests do not sleep.
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
};

inline std::string render_paraphrase_prompt(const std::string& query,
                                            std::string_view tmpl = embedded::kParaphrasePrompt) {
  std::string out(tmpl);
  const std::string key = "{query}";
  auto at = out.find(key);
  if (at == std::string::npos) throw ValidationError("paraphrase prompt template lacks a {query} placeholder");
  out.replace(at, key.size(), query);
  return out;
}

/// First non-empty line with list markers and surrounding quotes removed;
/// empty when nothing usable is present.
inline std::string parse_paraphrase(std::string_view completion) {
  std::size_t pos = 0;
  while (pos <= completion.size()) {
    auto nl = completion.find('\n', pos);
    std::string_view line = trim(completion.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    static const std::regex marker(R"(^(\d+[.)]|[-*])\s+)");
    std::string s(line);
    s = std::regex_replace(s, marker, "", std::regex_constants::format_first_only);
    std::string_view v = trim(s);
    while (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') || (v.front() == '\'' && v.back() == '\'')))
      v = trim(v.substr(1, v.size() - 2));
    if (!v.empty()) return std::string(v);
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return {};
}

inline std::vector<VariationRecord> gen_paraphrases(const QueryRecord& q, CompletionClient& client, int n = 1,
                                                    const RetryPolicy& retry = {},
                                                    std::string_view prompt_template = embedded::kParaphrasePrompt) {
  if (n < 1) throw ValidationError("paraphrase count must be at least 1");
  const std::string prompt = render_paraphrase_prompt(q.query, prompt_template);
  std::vector<std::string> completions;
  for (int attempt = 1;; ++attempt) {
    try {
      completions = client.complete(prompt, n);
      break;
    } catch (const CompletionError& e) {
      if (!e.transient()) throw CompletionError("query " + q.id + ": " + e.what(), false);
      if (attempt >= retry.max_attempts)
        throw CompletionError("query " + q.id + ": exhausted retries after " + std::to_string(attempt) +
                                  " attempts (last error: " + e.what() + ")",
                              true);
      retry.sleep(retry.base_delay * (1 << (attempt - 1)));
    }
  }

  std::vector<VariationRecord> out;
  std::vector<std::vector<std::string>> seen{tokenize(q.query)};
  for (const auto& c : completions) {
    std::string text = parse_paraphrase(c);
    if (text.empty()) throw CompletionError("query " + q.id + ": non-parseable completion", false);
    auto toks = tokenize(text);
    if (std::find(seen.begin(), seen.end(), toks) != seen.end()) continue;
    seen.push_back(std::move(toks));
    out.push_back({q.id + ".para." + std::to_string(out.size()), q.id, VariationType::Semantic, std::move(text),
                   std::nullopt});
  }
  return out;
}

/// Paraphrases for many queries with at most `in_flight` concurrent
/// requests. Result i belongs to queries[i].
inline std::vector<std::vector<VariationRecord>> gen_paraphrases_batch(const std::vector<QueryRecord>& queries,
                                                                       CompletionClient& client, int n,
                                                                       const RetryPolicy& retry, unsigned in_flight) {
  std::vector<std::vector<VariationRecord>> out(queries.size());
  parallel_for(queries.size(), in_flight, [&](std::size_t i) { out[i] = gen_paraphrases(queries[i], client, n, retry); });
  return out;
}

}  // namespace cwmerge
