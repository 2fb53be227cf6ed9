#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pplkd/remote.hpp"

namespace pplkd {

struct PathsConfig {
  std::string seeds;
  std::string base_corpus;
  std::string ft_corpus;
  std::string target_corpus;  // optional: prior for the distilled target
  std::string prompt_corpus;  // optional: background for prefix resampling
  std::string heldout_in;     // optional evaluation sets (dataset files)
  std::string heldout_out;
  std::string probes_in;      // optional prompt lists for analysis
  std::string probes_out;
  std::string out_dir = "out";
  std::string cache_dir;      // default: <out_dir>/cache
};

struct ModelConfig {
  int order = 3;
  double alpha = 0.1;
  double lambda = 5.0;
  std::size_t max_vocab = 50000;
};

struct TargetConfig {
  // auto: onto when a target corpus is configured, else tabular.
  std::string method = "auto";  // auto | onto | tabular | gradient
  int order = 3;
  double alpha = 0.1;
  double lambda = 5.0;
  int epochs = 2000;
  double learning_rate = 1.0;
  int report_every = 10;
};

struct GenerationSettings {
  std::string strategy = "prefix_resample";  // or instruction_template
  int batch_size = 20;
  int demonstrations = 5;
  bool include_responses = true;
  int max_len = 32;
  double temperature = 1.0;
  bool greedy = false;
  int best_of = 1;
  double prompt_alpha = 0.01;
  double pool_weight = 5.0;
  int prompt_max_len = 24;
  int template_max_tokens = 2048;
  double template_temperature = 1.0;
};

struct AnalysisConfig {
  int length = 3;
  std::size_t budget = 1'000'000;
  std::vector<double> edges{1.0, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0};
};

// Every user-facing knob of a run. Loading validates and fills defaults;
// unknown keys are rejected so typos surface as config errors.
struct RunConfig {
  PathsConfig paths;
  ModelConfig model;
  TargetConfig target;
  std::string filter = "low_high(1.5)";
  GenerationSettings generation;
  std::optional<RemoteEndpoint> endpoint;  // generator endpoint
  std::optional<RemoteEndpoint> source_f;  // remote source models, both or neither
  std::optional<RemoteEndpoint> source_b;
  std::size_t target_size = 250;
  int max_iterations = 100;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string created_at;  // pinned manifest timestamp; empty means "now"
  AnalysisConfig analysis;

  std::filesystem::path out_dir() const { return paths.out_dir; }
  std::filesystem::path cache_dir() const;

  // Canonical form; `for_hash` drops fields that cannot change results.
  nlohmann::ordered_json to_json(bool for_hash = false) const;
  std::string hash() const;
};

// Throws Error(kConfigError) naming the offending field.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

// Checks that required paths are set and exist for a given stage.
void require_path(const std::string& value, const std::string& field);

}  // namespace pplkd
