#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "pplkd/corpus.hpp"
#include "pplkd/lm.hpp"

namespace pplkd {

class RemoteClient;

// exp(-log_likelihood). Throws Error(kEmptyResponse) for an empty response.
double perplexity(const LanguageModel& scorer, std::span<const TokenId> prompt,
                  std::span<const TokenId> response);

// log(ppl_b) - log(ppl_f).
double margin(double ppl_f, double ppl_b);

enum class RuleKind { kLowHigh, kSymmetric, kAsymmetric, kRatio, kLowLow, kHighHigh, kNone };

class FilterRule {
 public:
  static constexpr double kDefaultTau = 1.5;

  static FilterRule low_high(double tau = kDefaultTau);
  static FilterRule symmetric(double tau = 1.3);
  static FilterRule asymmetric(double tau_f = 1.2, double tau_b = 1.6);
  static FilterRule ratio(double rho = 1.5);
  static FilterRule low_low(double tau = kDefaultTau);
  static FilterRule high_high(double tau = kDefaultTau);
  static FilterRule none();

  // Accepts a bare name ("low_high", defaults apply) or an id as produced by
  // id(), e.g. "asymmetric(1.2,1.6)". Throws Error(kInvalidRuleParameters).
  static FilterRule parse(std::string_view text);

  RuleKind kind() const { return kind_; }
  double p1() const { return p1_; }
  double p2() const { return p2_; }
  std::string id() const;

  bool keeps(double ppl_f, double ppl_b) const;
  // Short label for discarded pairs, for iteration statistics.
  std::string discard_reason(double ppl_f, double ppl_b) const;

  bool operator==(const FilterRule&) const = default;

 private:
  FilterRule(RuleKind kind, double p1, double p2);

  RuleKind kind_;
  double p1_;
  double p2_;
};

struct ScoredPair {
  std::string prompt;
  std::string response_f;
  std::string response_b;
  double ppl_f = 0.0;
  double ppl_b = 0.0;
  double margin = 0.0;
  std::optional<bool> kept;  // unset until a rule is applied
  std::string rule;
};

bool apply_filter(const FilterRule& rule, const ScoredPair& pair);
// Sets pair.kept and pair.rule.
void judge(const FilterRule& rule, ScoredPair& pair);

PairScore to_pair_score(const ScoredPair& pair);
Example to_example(const ScoredPair& pair, int iteration);

// A model that can answer prompts and score responses, in text space.
class SourceModel {
 public:
  virtual ~SourceModel() = default;
  virtual std::string id() const = 0;
  virtual std::string respond(const std::string& prompt, const SamplingConfig& config,
                              std::uint64_t seed) const = 0;
  virtual double perplexity(const std::string& prompt,
                            const std::string& response) const = 0;
};

// In-process model. Responses are framed with EOS for scoring, so an empty
// response still has one scored token.
class LocalSource final : public SourceModel {
 public:
  explicit LocalSource(std::shared_ptr<const LanguageModel> model);

  std::string id() const override { return model_->id(); }
  std::string respond(const std::string& prompt, const SamplingConfig& config,
                      std::uint64_t seed) const override;
  double perplexity(const std::string& prompt,
                    const std::string& response) const override;
  const LanguageModel& model() const { return *model_; }

 private:
  std::shared_ptr<const LanguageModel> model_;
};

class RemoteSource final : public SourceModel {
 public:
  RemoteSource(std::shared_ptr<RemoteClient> client, int max_tokens);

  std::string id() const override;
  std::string respond(const std::string& prompt, const SamplingConfig& config,
                      std::uint64_t seed) const override;
  double perplexity(const std::string& prompt,
                    const std::string& response) const override;

 private:
  std::shared_ptr<RemoteClient> client_;
  int max_tokens_;
};

struct GenerationConfig {
  SamplingConfig sampling;
  int best_of = 1;  // >1: keep the sample with the lowest scorer perplexity
};

// Samples y_f from `model_f` and y_b from `model_b`, scores both under
// `model_f`. The verdict is left unset.
ScoredPair score_pair(const SourceModel& model_f, const SourceModel& model_b,
                      const std::string& prompt, const GenerationConfig& gen,
                      std::uint64_t seed);

// Process-wide check that every pair a threshold rule keeps satisfies
// m > 0 and m > log(tau / ppl_f).
class ImplicationAudit {
 public:
  static ImplicationAudit& global();

  // True when the pair is consistent (or the rule is not a threshold rule).
  bool record(const FilterRule& rule, const ScoredPair& pair);

  std::uint64_t checked() const { return checked_.load(); }
  std::uint64_t violations() const { return violations_.load(); }

 private:
  std::atomic<std::uint64_t> checked_{0};
  std::atomic<std::uint64_t> violations_{0};
};

}  // namespace pplkd
