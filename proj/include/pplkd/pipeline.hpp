#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pplkd/config.hpp"
#include "pplkd/corpus.hpp"
#include "pplkd/distill.hpp"
#include "pplkd/lm.hpp"
#include "pplkd/scoring.hpp"
#include "pplkd/synthgen.hpp"

namespace pplkd {

struct Models {
  std::shared_ptr<const Vocabulary> vocab;
  std::shared_ptr<const TabularModel> base;
  std::shared_ptr<const FineTunedModel> fine_tuned;
  std::shared_ptr<const TabularModel> target_prior;       // null without a target corpus
  std::shared_ptr<const TabularModel> prompt_background;  // null without a prompt corpus
};

// Fits every model the config describes from its corpora.
Models fit_models(const RunConfig& config);

// models/ layout: vocab.txt, base.model, finetune.delta, and when present
// target_prior.model and prompt.model, plus manifest.json with the hash.
void save_models(const Models& models, const std::string& config_hash,
                 const std::filesystem::path& dir);
Models load_models(const std::filesystem::path& dir, std::string* config_hash = nullptr);

std::vector<Example> load_examples(const std::filesystem::path& path);

std::unique_ptr<PromptGenerator> make_generator(const RunConfig& config, const Models& models);
std::pair<std::unique_ptr<SourceModel>, std::unique_ptr<SourceModel>> make_sources(
    const RunConfig& config, const Models& models);

FilterRule config_rule(const RunConfig& config);
GenerationConfig config_generation(const RunConfig& config);

// exp(total NLL / total tokens) over EOS-framed responses.
double corpus_perplexity(const LanguageModel& model, const std::vector<Example>& examples);

struct DistilledTarget {
  std::string kind;  // onto | tabular | gradient
  std::shared_ptr<const LanguageModel> model;
  std::vector<LossPoint> trajectory;  // gradient only
};

DistilledTarget distill_target(const RunConfig& config, const Models& models,
                               const Dataset& synthetic);
// models/target.* and, for gradient training, loss.csv.
void save_target(const DistilledTarget& target, const Vocabulary& vocab,
                 const std::filesystem::path& out_dir);

struct TransferOutcome {
  BuildResult build;
  DistilledTarget target;
  nlohmann::ordered_json report;
};

// Loads the seeds and runs build_dataset with the configured generator,
// sources and rule. Both datasets carry the config hash.
BuildResult build_synthetic(const RunConfig& config, const Models& models);

// Keep rate, margin means and implication counts of one build.
nlohmann::ordered_json build_report(const RunConfig& config, const BuildResult& build);
// Held-out perplexities of the prior and of the distilled target.
nlohmann::ordered_json target_report(const RunConfig& config, const Models& models,
                                     const DistilledTarget& target);

// build_synthetic followed by distillation; nothing is written.
TransferOutcome run_transfer(const RunConfig& config, const Models& models);

// dataset.jsonl, discards.jsonl, report.json and the target under out_dir.
void write_transfer_outputs(const RunConfig& config, const Models& models,
                            const TransferOutcome& outcome);

// Margin decompositions per probe prompt, perplexity histograms and distinct-n.
nlohmann::ordered_json analyze(const RunConfig& config, const Models& models,
                               const Dataset& dataset);

void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path);

// Returns a warning line when the dataset's manifest hash differs from `expected`.
std::string hash_warning(const Manifest& manifest, const std::string& expected,
                         const std::string& what);

}  // namespace pplkd
