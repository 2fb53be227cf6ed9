#include "pplkd/remote.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "pplkd/error.hpp"
#include "pplkd/hash.hpp"
#include "pplkd/lm.hpp"

namespace pplkd {

namespace {

constexpr std::size_t kExcerpt = 200;

std::string excerpt(const std::string& body) {
  if (body.size() <= kExcerpt) return body;
  return body.substr(0, kExcerpt) + "...";
}

[[noreturn]] void protocol_error(const std::string& what, const std::string& body) {
  throw Error(ErrorCode::kProtocolError, what + " (body: " + excerpt(body) + ")");
}

}  // namespace

nlohmann::ordered_json endpoint_to_json(const RemoteEndpoint& ep) {
  return {{"base_url", ep.base_url},
          {"api_key_env", ep.api_key_env},
          {"model", ep.model},
          {"timeout_s", ep.timeout_s},
          {"max_retries", ep.max_retries},
          {"supports_echo", ep.supports_echo},
          {"retry",
           {{"base_delay_s", ep.retry.base_delay_s},
            {"factor", ep.retry.factor},
            {"jitter", ep.retry.jitter}}}};
}

RemoteEndpoint endpoint_from_json(const nlohmann::json& j) {
  RemoteEndpoint ep;
  ep.base_url = j.value("base_url", ep.base_url);
  ep.api_key_env = j.value("api_key_env", ep.api_key_env);
  ep.model = j.value("model", ep.model);
  ep.timeout_s = j.value("timeout_s", ep.timeout_s);
  ep.max_retries = j.value("max_retries", ep.max_retries);
  ep.supports_echo = j.value("supports_echo", ep.supports_echo);
  if (j.contains("retry")) {
    const auto& r = j.at("retry");
    ep.retry.base_delay_s = r.value("base_delay_s", ep.retry.base_delay_s);
    ep.retry.factor = r.value("factor", ep.retry.factor);
    ep.retry.jitter = r.value("jitter", ep.retry.jitter);
  }
  return ep;
}

nlohmann::ordered_json CompletionRequest::to_json(const std::string& model) const {
  return {{"model", model},           {"prompt", prompt},
          {"max_tokens", max_tokens}, {"temperature", temperature},
          {"logprobs", logprobs},     {"echo", echo}};
}

ScoredCompletion parse_completion(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    protocol_error("response is not JSON", body);
  }
  if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() ||
      j["choices"].empty()) {
    protocol_error("response has no choices", body);
  }
  const auto& choice = j["choices"][0];
  if (!choice.is_object() || !choice.contains("text") || !choice["text"].is_string()) {
    protocol_error("choice has no text", body);
  }
  ScoredCompletion out;
  out.text = choice["text"].get<std::string>();
  if (!choice.contains("logprobs") || choice["logprobs"].is_null()) return out;

  const auto& lp = choice["logprobs"];
  if (!lp.is_object() || !lp.contains("tokens") || !lp.contains("token_logprobs") ||
      !lp["tokens"].is_array() || !lp["token_logprobs"].is_array()) {
    protocol_error("malformed logprobs object", body);
  }
  const auto& toks = lp["tokens"];
  const auto& vals = lp["token_logprobs"];
  if (toks.size() != vals.size()) {
    protocol_error("tokens/token_logprobs length mismatch (" +
                       std::to_string(toks.size()) + " vs " +
                       std::to_string(vals.size()) + ")",
                   body);
  }
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (!toks[i].is_string()) protocol_error("non-string token", body);
    out.tokens.push_back(toks[i].get<std::string>());
    if (vals[i].is_null()) {
      out.token_logprobs.push_back(std::numeric_limits<double>::quiet_NaN());
    } else if (vals[i].is_number()) {
      const double v = vals[i].get<double>();
      if (!(v <= 0.0)) protocol_error("log-probability above zero", body);
      out.token_logprobs.push_back(v);
    } else {
      protocol_error("non-numeric log-probability", body);
    }
  }
  if (lp.contains("text_offset") && !lp["text_offset"].is_null()) {
    const auto& offs = lp["text_offset"];
    if (!offs.is_array() || offs.size() != toks.size()) {
      protocol_error("text_offset length mismatch", body);
    }
    for (const auto& o : offs) {
      if (!o.is_number_unsigned() && !(o.is_number_integer() && o.get<long long>() >= 0)) {
        protocol_error("bad text_offset entry", body);
      }
      out.text_offsets.push_back(o.get<std::size_t>());
    }
  }
  return out;
}

double echo_perplexity(const ScoredCompletion& completion,
                       std::size_t response_start) {
  if (!completion.has_logprobs() ||
      completion.text_offsets.size() != completion.tokens.size()) {
    throw Error(ErrorCode::kUnsupportedEndpoint,
                "endpoint did not return token offsets with log-probabilities");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < completion.tokens.size(); ++i) {
    if (completion.text_offsets[i] < response_start) continue;
    const double v = completion.token_logprobs[i];
    if (std::isnan(v)) {
      throw Error(ErrorCode::kProtocolError, "null log-probability on a response token");
    }
    sum += v;
    ++n;
  }
  if (n == 0) {
    throw Error(ErrorCode::kUnsupportedEndpoint,
                "no response tokens were echoed back for scoring");
  }
  return std::exp(-sum / static_cast<double>(n));
}

RemoteClient::RemoteClient(RemoteEndpoint endpoint, ClientOptions options)
    : endpoint_(std::move(endpoint)),
      options_(std::move(options)),
      in_flight_(std::max(1, options_.max_in_flight)) {
  const auto& url = endpoint_.base_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::kConfigError, "endpoint base_url needs a scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  std::string path = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  const std::string suffix = "/completions";
  if (path.size() < suffix.size() ||
      path.compare(path.size() - suffix.size(), suffix.size(), suffix) != 0) {
    path += suffix;
  }
  path_ = path;

  if (!endpoint_.api_key_env.empty()) {
    if (const char* key = std::getenv(endpoint_.api_key_env.c_str())) api_key_ = key;
  }
  if (!options_.sleep) {
    options_.sleep = [](double s) {
      std::this_thread::sleep_for(std::chrono::duration<double>(s));
    };
  }
}

std::string RemoteClient::redact(std::string text) const {
  if (api_key_.empty()) return text;
  for (auto pos = text.find(api_key_); pos != std::string::npos;
       pos = text.find(api_key_, pos)) {
    text.replace(pos, api_key_.size(), "***");
  }
  return text;
}

std::optional<std::string> RemoteClient::cache_read(const std::string& key) const {
  if (!options_.cache_dir) return std::nullopt;
  std::ifstream in(*options_.cache_dir / (key + ".json"), std::ios::binary);
  if (!in) return std::nullopt;
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    auto j = nlohmann::json::parse(ss.str());
    return j.at("response").dump();
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;  // torn or foreign file: refetch and overwrite
  }
}

void RemoteClient::cache_write(const std::string& key, const std::string& request,
                               const std::string& response) {
  if (!options_.cache_dir) return;
  nlohmann::ordered_json rec;
  rec["request"] = nlohmann::ordered_json::parse(request);
  rec["response"] = nlohmann::ordered_json::parse(response);
  std::lock_guard lock(cache_mu_);
  std::filesystem::create_directories(*options_.cache_dir);
  const auto final_path = *options_.cache_dir / (key + ".json");
  const auto tmp_path = *options_.cache_dir / (key + ".json.tmp");
  {
    std::ofstream out(tmp_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write cache " + tmp_path.string());
    out << rec.dump() << '\n';
  }
  std::filesystem::rename(tmp_path, final_path);
}

std::string RemoteClient::send_with_retries(const std::string& body) {
  httplib::Client cli(scheme_host_port_);
  const auto secs = static_cast<time_t>(endpoint_.timeout_s);
  const auto usecs = static_cast<time_t>((endpoint_.timeout_s - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);

  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  std::mt19937_64 jitter_rng(fingerprint64(body));
  const int attempts = 1 + std::max(0, endpoint_.max_retries);
  for (int attempt = 1;; ++attempt) {
    ErrorCode code;
    std::string message;
    {
      in_flight_.acquire();
      auto res = cli.Post(path_, headers, body, "application/json");
      in_flight_.release();
      ++requests_;
      if (!res) {
        code = ErrorCode::kTimeout;
        message = "request to " + scheme_host_port_ + " failed: " + httplib::to_string(res.error());
      } else if (res->status == 200) {
        return res->body;
      } else if (res->status == 401 || res->status == 403) {
        throw Error(ErrorCode::kAuthFailure,
                    "HTTP " + std::to_string(res->status) + ": " + redact(excerpt(res->body)));
      } else if (res->status == 429) {
        code = ErrorCode::kRateLimited;
        message = "HTTP 429: " + redact(excerpt(res->body));
      } else if (res->status == 408 || res->status >= 500) {
        code = ErrorCode::kProtocolError;
        message = "HTTP " + std::to_string(res->status) + ": " + redact(excerpt(res->body));
      } else {
        throw Error(ErrorCode::kProtocolError,
                    "HTTP " + std::to_string(res->status) + ": " + redact(excerpt(res->body)));
      }
    }
    if (attempt >= attempts) {
      throw Error(code, message + " (after " + std::to_string(attempt) + " attempts)");
    }
    ++retries_;
    const double delay = endpoint_.retry.base_delay_s *
                         std::pow(endpoint_.retry.factor, attempt - 1) *
                         (1.0 + endpoint_.retry.jitter * uniform01(jitter_rng));
    options_.sleep(delay);
  }
}

ScoredCompletion RemoteClient::complete(const CompletionRequest& request) {
  const std::string body = request.to_json(endpoint_.model).dump();
  const std::string key = sha256_hex(endpoint_.base_url + "\n" + body);
  if (auto cached = cache_read(key)) {
    ++cache_hits_;
    return parse_completion(*cached);
  }
  const std::string response = send_with_retries(body);
  auto parsed = parse_completion(response);
  cache_write(key, body, response);
  return parsed;
}

ScoredCompletion RemoteClient::generate(const std::string& prompt, int max_tokens,
                                        double temperature) {
  if (max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
  CompletionRequest req;
  req.prompt = prompt;
  req.max_tokens = max_tokens;
  req.temperature = temperature;
  return complete(req);
}

double RemoteClient::perplexity(const std::string& prompt, const std::string& response) {
  if (!endpoint_.supports_echo) {
    throw Error(ErrorCode::kUnsupportedEndpoint,
                "endpoint " + endpoint_.base_url + " cannot score continuations");
  }
  if (response.empty()) throw Error(ErrorCode::kEmptyResponse, "empty response");
  const bool need_space = !prompt.empty() && prompt.back() != ' ' && response.front() != ' ';
  CompletionRequest req;
  req.prompt = prompt + (need_space ? " " : "") + response;
  req.max_tokens = 0;
  req.temperature = 0.0;
  req.echo = true;
  return echo_perplexity(complete(req), prompt.size());
}

ClientStats RemoteClient::stats() const {
  return {requests_.load(), cache_hits_.load(), retries_.load()};
}

ScoredCompletion remote_generate(const RemoteEndpoint& ep, const std::string& prompt,
                                 int max_tokens, double temperature) {
  RemoteClient client(ep);
  return client.generate(prompt, max_tokens, temperature);
}

double remote_perplexity(const RemoteEndpoint& ep, const std::string& prompt,
                         const std::string& response) {
  RemoteClient client(ep);
  return client.perplexity(prompt, response);
}

}  // namespace pplkd
