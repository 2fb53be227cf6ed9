#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "pplkd/corpus.hpp"
#include "pplkd/lm.hpp"
#include "pplkd/scoring.hpp"

namespace pplkd {

class RemoteClient;

// Seeds plus every kept pair so far. Only grows.
class GenerationPool {
 public:
  // Every seed must have provenance kSeed. Throws Error(kEmptyDataset) if empty.
  explicit GenerationPool(std::vector<Example> seeds);

  // Generated examples only, with a kept verdict and iteration >= 1.
  void add(Example example);

  bool contains_prompt(const std::string& prompt) const;  // exact, normalized
  const std::vector<Example>& examples() const { return examples_; }
  std::size_t size() const { return examples_.size(); }
  std::size_t seed_count() const { return seed_count_; }

  int iteration() const { return iteration_; }
  int advance() { return ++iteration_; }

 private:
  std::vector<Example> examples_;
  std::unordered_set<std::string> prompts_;
  std::size_t seed_count_ = 0;
  int iteration_ = 0;
};

struct StrategyConfig {
  int batch_size = 20;
  int demonstrations = 5;
  bool include_responses = true;  // show demonstrations as prompt + response
};

class PromptGenerator {
 public:
  explicit PromptGenerator(StrategyConfig config);
  virtual ~PromptGenerator() = default;
  virtual std::string name() const = 0;
  // Raw candidates; may repeat pool prompts or each other.
  virtual std::vector<std::string> propose(const GenerationPool& pool,
                                           std::uint64_t seed) = 0;
  const StrategyConfig& config() const { return config_; }

 protected:
  StrategyConfig config_;
};

// Distinct pool indices, min(k, pool_size) of them, in draw order.
std::vector<std::size_t> sample_demonstrations(std::size_t pool_size, int k,
                                               std::uint64_t seed);

std::string format_template(const std::vector<const Example*>& demos, int batch_size,
                            bool include_responses);

// Numbered-list items ("3. ...", "3) ...", "3: ..."), falling back to
// blank-line separated blocks. Any answer part of an item is cut off.
// Throws Error(kParseFailure) when nothing usable is found.
std::vector<std::string> parse_generated_prompts(const std::string& text);

// The instruction-following route: one completion call per batch.
class TemplateGenerator final : public PromptGenerator {
 public:
  TemplateGenerator(std::shared_ptr<RemoteClient> client, StrategyConfig config,
                    int max_tokens = 2048, double temperature = 1.0);
  std::string name() const override { return "instruction_template"; }
  std::vector<std::string> propose(const GenerationPool& pool, std::uint64_t seed) override;

 private:
  std::shared_ptr<RemoteClient> client_;
  int max_tokens_;
  double temperature_;
};

struct PrefixResampleOptions {
  int order = 3;
  double alpha = 0.01;
  // Optional prior over prompt text; pool prompt counts are blended on top
  // with weight pool_weight. Without it the prompt model is fit on the pool
  // prompts alone.
  std::shared_ptr<const TabularModel> background;
  double pool_weight = 5.0;
  int max_len = 24;
};

// In-process stand-in for an instruction model: keep a random prefix of a
// pool prompt and let a prompt model continue it.
class PrefixResampleGenerator final : public PromptGenerator {
 public:
  PrefixResampleGenerator(std::shared_ptr<const Vocabulary> vocab, StrategyConfig config,
                          PrefixResampleOptions options = {});
  std::string name() const override { return "prefix_resample"; }
  std::vector<std::string> propose(const GenerationPool& pool, std::uint64_t seed) override;

  // The model propose() samples from for the given pool.
  std::shared_ptr<const LanguageModel> prompt_model(const GenerationPool& pool) const;

 private:
  std::shared_ptr<const Vocabulary> vocab_;
  PrefixResampleOptions options_;
};

struct PromptBatch {
  std::vector<std::string> prompts;
  std::size_t proposed = 0;
  std::size_t duplicates = 0;
};

// Normalizes and drops empty candidates and exact duplicates of pool prompts
// or of earlier candidates.
PromptBatch dedup_prompts(const std::vector<std::string>& candidates,
                          const GenerationPool& pool);

std::vector<std::string> generate_prompts(PromptGenerator& generator,
                                          const GenerationPool& pool, std::uint64_t seed);

struct IterationStats {
  int iteration = 0;
  std::size_t proposed = 0;
  std::size_t duplicates = 0;
  std::size_t generated = 0;  // unique prompts scored
  std::size_t kept = 0;
  std::size_t discarded = 0;
  std::map<std::string, std::size_t> discard_reasons;
  std::size_t implication_violations = 0;

  nlohmann::ordered_json to_json() const;
};

struct IterationResult {
  std::vector<Example> kept;
  std::vector<Example> discarded;
  IterationStats stats;
};

// One generate/score/filter round. Kept pairs are appended to the pool.
IterationResult run_iteration(GenerationPool& pool, PromptGenerator& generator,
                              const SourceModel& model_f, const SourceModel& model_b,
                              const FilterRule& rule, const GenerationConfig& gen,
                              std::uint64_t seed, int workers = 1);

struct BuildConfig {
  std::size_t target_size = 250;
  int max_iterations = 100;
  GenerationConfig gen;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct BuildResult {
  Dataset dataset;   // seeds, then exactly target_size generated examples
  Dataset discards;  // every pair the rule rejected
  std::vector<IterationStats> iterations;
  std::size_t kept_total = 0;  // before truncation
  bool budget_exhausted = false;
};

// Loops run_iteration until target_size pairs are kept or max_iterations
// rounds have run. Never throws for a short run: budget_exhausted is set and
// the partial dataset is returned.
BuildResult build_dataset(GenerationPool& pool, PromptGenerator& generator,
                          const SourceModel& model_f, const SourceModel& model_b,
                          const FilterRule& rule, const BuildConfig& config);

// Generated examples of a dataset; the distillation training set.
Dataset synthetic_only(const Dataset& ds);

}  // namespace pplkd
