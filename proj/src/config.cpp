#include "pplkd/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "pplkd/error.hpp"
#include "pplkd/hash.hpp"

namespace pplkd {

namespace {

[[noreturn]] void config_error(const std::string& field, const std::string& msg) {
  throw Error(ErrorCode::kConfigError, field + ": " + msg);
}

// Typed field access with the dotted field name in every message.
class Reader {
 public:
  Reader(const nlohmann::json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) config_error(prefix_.empty() ? "config" : prefix_, "expected an object");
  }

  std::string field(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

  bool has(const std::string& key) const { return obj_.contains(key) && !obj_[key].is_null(); }
  const nlohmann::json& at(const std::string& key) const { return obj_.at(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = obj_[key];
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) config_error(field(key), "expected a boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) config_error(field(key), "expected a string");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) config_error(field(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.get<long long>() < 0) config_error(field(key), "must be non-negative");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) config_error(field(key), "expected a number");
      }
      out = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      config_error(field(key), e.what());
    }
  }

  void mark(const std::string& key) { seen_.insert(key); }

  void reject_unknown() const {
    for (const auto& [k, _] : obj_.items()) {
      if (!seen_.count(k)) config_error(field(k), "unknown field");
    }
  }

 private:
  const nlohmann::json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

std::optional<RemoteEndpoint> read_endpoint(Reader& parent, const std::string& key) {
  parent.mark(key);
  if (!parent.has(key)) return std::nullopt;
  Reader r(parent.at(key), parent.field(key));
  RemoteEndpoint ep;
  r.get("base_url", ep.base_url);
  r.get("api_key_env", ep.api_key_env);
  r.get("model", ep.model);
  r.get("timeout_s", ep.timeout_s);
  r.get("max_retries", ep.max_retries);
  r.get("supports_echo", ep.supports_echo);
  r.mark("retry");
  if (r.has("retry")) {
    Reader rr(r.at("retry"), r.field("retry"));
    rr.get("base_delay_s", ep.retry.base_delay_s);
    rr.get("factor", ep.retry.factor);
    rr.get("jitter", ep.retry.jitter);
    rr.reject_unknown();
  }
  r.reject_unknown();
  if (ep.base_url.empty()) config_error(r.field("base_url"), "is required");
  if (ep.max_retries < 0) config_error(r.field("max_retries"), "must be >= 0");
  if (!(ep.timeout_s > 0)) config_error(r.field("timeout_s"), "must be > 0");
  return ep;
}

std::string now_utc() {
  const auto t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::filesystem::path RunConfig::cache_dir() const {
  if (!paths.cache_dir.empty()) return paths.cache_dir;
  return std::filesystem::path(paths.out_dir) / "cache";
}

nlohmann::ordered_json RunConfig::to_json(bool for_hash) const {
  nlohmann::ordered_json j;
  nlohmann::ordered_json p;
  p["seeds"] = paths.seeds;
  p["base_corpus"] = paths.base_corpus;
  p["ft_corpus"] = paths.ft_corpus;
  p["target_corpus"] = paths.target_corpus;
  p["prompt_corpus"] = paths.prompt_corpus;
  p["heldout_in"] = paths.heldout_in;
  p["heldout_out"] = paths.heldout_out;
  p["probes_in"] = paths.probes_in;
  p["probes_out"] = paths.probes_out;
  if (!for_hash) {
    p["out_dir"] = paths.out_dir;
    p["cache_dir"] = paths.cache_dir;
  }
  j["paths"] = p;
  j["model"] = {{"order", model.order},
                {"alpha", model.alpha},
                {"lambda", model.lambda},
                {"max_vocab", model.max_vocab}};
  j["target"] = {{"method", target.method},
                 {"order", target.order},
                 {"alpha", target.alpha},
                 {"lambda", target.lambda},
                 {"epochs", target.epochs},
                 {"learning_rate", target.learning_rate},
                 {"report_every", target.report_every}};
  j["filter"] = filter;
  const auto& g = generation;
  j["generation"] = {{"strategy", g.strategy},
                     {"batch_size", g.batch_size},
                     {"demonstrations", g.demonstrations},
                     {"include_responses", g.include_responses},
                     {"max_len", g.max_len},
                     {"temperature", g.temperature},
                     {"greedy", g.greedy},
                     {"best_of", g.best_of},
                     {"prompt_alpha", g.prompt_alpha},
                     {"pool_weight", g.pool_weight},
                     {"prompt_max_len", g.prompt_max_len},
                     {"template_max_tokens", g.template_max_tokens},
                     {"template_temperature", g.template_temperature}};
  if (endpoint) j["endpoint"] = endpoint_to_json(*endpoint);
  if (source_f) j["source_f"] = endpoint_to_json(*source_f);
  if (source_b) j["source_b"] = endpoint_to_json(*source_b);
  j["target_size"] = target_size;
  j["max_iterations"] = max_iterations;
  j["seed"] = seed;
  if (!for_hash) j["workers"] = workers;
  if (!for_hash) j["created_at"] = created_at;
  j["analysis"] = {{"length", analysis.length},
                   {"budget", analysis.budget},
                   {"edges", analysis.edges}};
  return j;
}

std::string RunConfig::hash() const { return sha256_hex(to_json(true).dump()); }

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  Reader root(j, "");
  root.mark("paths");
  if (root.has("paths")) {
    Reader r(root.at("paths"), "paths");
    r.get("seeds", c.paths.seeds);
    r.get("base_corpus", c.paths.base_corpus);
    r.get("ft_corpus", c.paths.ft_corpus);
    r.get("target_corpus", c.paths.target_corpus);
    r.get("prompt_corpus", c.paths.prompt_corpus);
    r.get("heldout_in", c.paths.heldout_in);
    r.get("heldout_out", c.paths.heldout_out);
    r.get("probes_in", c.paths.probes_in);
    r.get("probes_out", c.paths.probes_out);
    r.get("out_dir", c.paths.out_dir);
    r.get("cache_dir", c.paths.cache_dir);
    r.reject_unknown();
  }
  root.mark("model");
  if (root.has("model")) {
    Reader r(root.at("model"), "model");
    r.get("order", c.model.order);
    r.get("alpha", c.model.alpha);
    r.get("lambda", c.model.lambda);
    r.get("max_vocab", c.model.max_vocab);
    r.reject_unknown();
  }
  root.mark("target");
  if (root.has("target")) {
    Reader r(root.at("target"), "target");
    r.get("method", c.target.method);
    r.get("order", c.target.order);
    r.get("alpha", c.target.alpha);
    r.get("lambda", c.target.lambda);
    r.get("epochs", c.target.epochs);
    r.get("learning_rate", c.target.learning_rate);
    r.get("report_every", c.target.report_every);
    r.reject_unknown();
  }
  root.get("filter", c.filter);
  root.mark("generation");
  if (root.has("generation")) {
    Reader r(root.at("generation"), "generation");
    auto& g = c.generation;
    r.get("strategy", g.strategy);
    r.get("batch_size", g.batch_size);
    r.get("demonstrations", g.demonstrations);
    r.get("include_responses", g.include_responses);
    r.get("max_len", g.max_len);
    r.get("temperature", g.temperature);
    r.get("greedy", g.greedy);
    r.get("best_of", g.best_of);
    r.get("prompt_alpha", g.prompt_alpha);
    r.get("pool_weight", g.pool_weight);
    r.get("prompt_max_len", g.prompt_max_len);
    r.get("template_max_tokens", g.template_max_tokens);
    r.get("template_temperature", g.template_temperature);
    r.reject_unknown();
  }
  c.endpoint = read_endpoint(root, "endpoint");
  c.source_f = read_endpoint(root, "source_f");
  c.source_b = read_endpoint(root, "source_b");
  root.get("target_size", c.target_size);
  root.get("max_iterations", c.max_iterations);
  root.get("seed", c.seed);
  root.get("workers", c.workers);
  root.get("created_at", c.created_at);
  root.mark("analysis");
  if (root.has("analysis")) {
    Reader r(root.at("analysis"), "analysis");
    r.get("length", c.analysis.length);
    r.get("budget", c.analysis.budget);
    r.mark("edges");
    if (r.has("edges")) {
      try {
        c.analysis.edges = r.at("edges").get<std::vector<double>>();
      } catch (const nlohmann::json::exception&) {
        config_error("analysis.edges", "expected an array of numbers");
      }
    }
    r.reject_unknown();
  }
  root.reject_unknown();

  if (c.model.order < 1) config_error("model.order", "must be >= 1");
  if (!(c.model.alpha > 0)) config_error("model.alpha", "must be > 0");
  if (!(c.model.lambda >= 0)) config_error("model.lambda", "must be >= 0");
  if (c.model.max_vocab < 4) config_error("model.max_vocab", "must be >= 4");
  if (c.target.method != "auto" && c.target.method != "onto" && c.target.method != "tabular" &&
      c.target.method != "gradient") {
    config_error("target.method", "must be one of auto, onto, tabular, gradient");
  }
  if (c.target.method == "onto" && c.paths.target_corpus.empty()) {
    config_error("paths.target_corpus", "is required by target.method onto");
  }
  if (c.target.order < 1) config_error("target.order", "must be >= 1");
  if (!(c.target.alpha > 0)) config_error("target.alpha", "must be > 0");
  if (!(c.target.lambda >= 0)) config_error("target.lambda", "must be >= 0");
  if (c.target.epochs < 0) config_error("target.epochs", "must be >= 0");
  if (!(c.target.learning_rate > 0)) config_error("target.learning_rate", "must be > 0");
  if (c.generation.strategy != "prefix_resample" &&
      c.generation.strategy != "instruction_template") {
    config_error("generation.strategy", "must be prefix_resample or instruction_template");
  }
  if (c.generation.strategy == "instruction_template" && !c.endpoint) {
    config_error("endpoint", "is required by the instruction_template strategy");
  }
  if (c.generation.batch_size < 1) config_error("generation.batch_size", "must be >= 1");
  if (c.generation.demonstrations < 1) config_error("generation.demonstrations", "must be >= 1");
  if (c.generation.max_len < 1) config_error("generation.max_len", "must be >= 1");
  if (!c.generation.greedy && !(c.generation.temperature > 0)) {
    config_error("generation.temperature", "must be > 0 (use greedy for argmax decoding)");
  }
  if (c.generation.best_of < 1) config_error("generation.best_of", "must be >= 1");
  if (c.source_f.has_value() != c.source_b.has_value()) {
    config_error(c.source_f ? "source_b" : "source_f", "remote sources must be given in pairs");
  }
  if (c.target_size < 1) config_error("target_size", "must be >= 1");
  if (c.max_iterations < 1) config_error("max_iterations", "must be >= 1");
  if (c.workers < 1) config_error("workers", "must be >= 1");
  if (c.analysis.length < 1) config_error("analysis.length", "must be >= 1");
  if (c.created_at.empty()) c.created_at = now_utc();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfigError, "cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigError, path.string() + ": " + e.what());
  }
  auto cfg = config_from_json(j);
  // Relative paths in a config file are relative to the file itself.
  const auto base = path.parent_path();
  for (auto* s : {&cfg.paths.seeds, &cfg.paths.base_corpus, &cfg.paths.ft_corpus,
                  &cfg.paths.target_corpus, &cfg.paths.prompt_corpus, &cfg.paths.heldout_in,
                  &cfg.paths.heldout_out, &cfg.paths.probes_in, &cfg.paths.probes_out,
                  &cfg.paths.out_dir, &cfg.paths.cache_dir}) {
    if (!s->empty() && std::filesystem::path(*s).is_relative()) {
      *s = (base / *s).lexically_normal().string();
    }
  }
  return cfg;
}

void require_path(const std::string& value, const std::string& field) {
  if (value.empty()) throw Error(ErrorCode::kConfigError, field + ": is required");
  if (!std::filesystem::exists(value)) {
    throw Error(ErrorCode::kConfigError, field + ": file not found: " + value);
  }
}

}  // namespace pplkd
