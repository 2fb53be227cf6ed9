#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pplkd {

struct RetryPolicy {
  double base_delay_s = 1.0;
  double factor = 2.0;
  double jitter = 0.25;  // delay is scaled by 1 + jitter * U[0, 1)
};

// An OpenAI-style completion endpoint. Only the *name* of the environment
// variable holding the key is stored, so the struct is safe to serialize.
struct RemoteEndpoint {
  std::string base_url;  // e.g. "http://127.0.0.1:8000/v1"; "/completions" is appended
  std::string api_key_env;
  std::string model;
  double timeout_s = 30.0;
  int max_retries = 3;
  bool supports_echo = true;
  RetryPolicy retry;
};

nlohmann::ordered_json endpoint_to_json(const RemoteEndpoint& ep);
RemoteEndpoint endpoint_from_json(const nlohmann::json& j);

struct ScoredCompletion {
  std::string text;
  std::vector<std::string> tokens;
  std::vector<double> token_logprobs;  // NaN where the endpoint sent null
  std::vector<std::size_t> text_offsets;  // empty when not reported

  bool has_logprobs() const { return !tokens.empty(); }
};

struct CompletionRequest {
  std::string prompt;
  int max_tokens = 256;
  double temperature = 1.0;
  int logprobs = 1;
  bool echo = false;

  nlohmann::ordered_json to_json(const std::string& model) const;
};

// Parses a completion response body; throws Error(kProtocolError) with an
// excerpt of the body on any schema violation.
ScoredCompletion parse_completion(const std::string& body);

struct ClientOptions {
  std::optional<std::filesystem::path> cache_dir;
  int max_in_flight = 4;
  // Replaces the real sleep between retries; tests pass a recorder.
  std::function<void(double seconds)> sleep;
};

struct ClientStats {
  std::uint64_t requests = 0;  // HTTP attempts actually sent
  std::uint64_t cache_hits = 0;
  std::uint64_t retries = 0;
};

class RemoteClient {
 public:
  explicit RemoteClient(RemoteEndpoint endpoint, ClientOptions options = {});

  const RemoteEndpoint& endpoint() const { return endpoint_; }

  ScoredCompletion complete(const CompletionRequest& request);
  ScoredCompletion generate(const std::string& prompt, int max_tokens,
                            double temperature);
  // Echo-mode scoring of `response` as a continuation of `prompt`.
  double perplexity(const std::string& prompt, const std::string& response);

  ClientStats stats() const;

 private:
  std::string send_with_retries(const std::string& body);
  std::optional<std::string> cache_read(const std::string& key) const;
  void cache_write(const std::string& key, const std::string& request,
                   const std::string& response);
  std::string redact(std::string text) const;

  RemoteEndpoint endpoint_;
  ClientOptions options_;
  std::string scheme_host_port_;
  std::string path_;
  std::string api_key_;
  std::counting_semaphore<> in_flight_;
  std::mutex cache_mu_;
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> cache_hits_{0};
  std::atomic<std::uint64_t> retries_{0};
};

// Mean-logprob perplexity over the completion tokens that start at or after
// `response_start`. Shared by RemoteClient::perplexity and its tests.
double echo_perplexity(const ScoredCompletion& completion,
                       std::size_t response_start);

ScoredCompletion remote_generate(const RemoteEndpoint& ep,
                                 const std::string& prompt, int max_tokens,
                                 double temperature);
double remote_perplexity(const RemoteEndpoint& ep, const std::string& prompt,
                         const std::string& response);

}  // namespace pplkd
