#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pplkd/corpus.hpp"

namespace pplkd {

// Autoregressive next-token distribution p(. | history).
//
// `history` is everything after the implicit BOS framing: the prompt tokens
// followed by the response generated so far. Models that look at a bounded
// window left-pad short histories with BOS.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual const Vocabulary& vocabulary() const = 0;
  virtual std::string id() const = 0;

  // Writes |V| probabilities into `out`; they are non-negative and sum to 1.
  virtual void distribution(std::span<const TokenId> history,
                            std::span<double> out) const = 0;

  virtual double probability(std::span<const TokenId> history,
                             TokenId next) const;

  std::vector<double> next_token_distribution(
      std::span<const TokenId> history) const;
};

struct CountRow {
  std::vector<std::pair<TokenId, std::int64_t>> entries;  // sorted by token
  std::int64_t total = 0;

  std::int64_t count(TokenId token) const;
  bool operator==(const CountRow&) const = default;
};

// Exact n-gram counts keyed by the (order - 1)-token context window.
class CountTable {
 public:
  using Key = std::uint64_t;

  CountTable(std::size_t vocab_size, int order);

  int order() const { return order_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t window() const { return static_cast<std::size_t>(order_ - 1); }

  // Key of the last order-1 tokens of `history`, BOS-padded on the left.
  Key context_key(std::span<const TokenId> history) const;
  // Window tokens oldest first; inverse of context_key.
  std::vector<TokenId> decode_key(Key key) const;

  // Throws std::invalid_argument if a count would become negative.
  void add(Key key, TokenId token, std::int64_t delta = 1);

  // Every position of `tokens` plus the terminating EOS.
  void add_sequence(std::span<const TokenId> tokens);
  // Only the positions of `response`, conditioned on prompt + response prefix.
  void add_continuation(std::span<const TokenId> prompt,
                        std::span<const TokenId> response);

  const CountRow* row(Key key) const;
  std::size_t row_count() const { return rows_.size(); }
  std::vector<Key> sorted_keys() const;
  std::int64_t total() const;

  bool operator==(const CountTable& other) const;

 private:
  std::size_t vocab_size_;
  int order_;
  std::vector<Key> place_;  // vocab_size^i
  std::unordered_map<Key, CountRow> rows_;
};

// Additively smoothed count model:
//   p(t | c) = (count(c, t) + alpha) / (total(c) + alpha * |V|).
class TabularModel final : public LanguageModel {
 public:
  TabularModel(std::shared_ptr<const Vocabulary> vocab, CountTable counts,
               double alpha);

  const Vocabulary& vocabulary() const override { return *vocab_; }
  std::shared_ptr<const Vocabulary> shared_vocabulary() const { return vocab_; }
  std::string id() const override;
  void distribution(std::span<const TokenId> history,
                    std::span<double> out) const override;
  double probability(std::span<const TokenId> history,
                     TokenId next) const override;

  int order() const { return counts_.order(); }
  double alpha() const { return alpha_; }
  const CountTable& counts() const { return counts_; }

 private:
  std::shared_ptr<const Vocabulary> vocab_;
  CountTable counts_;
  double alpha_;
};

// Separable adapter: extra counts blended into a base model with weight lambda.
struct FineTuneDelta {
  CountTable counts;
  double lambda = 5.0;
};

// p_F(t | c) = (base(c, t) + lambda * delta(c, t) + alpha)
//            / (base_total(c) + lambda * delta_total(c) + alpha * |V|)
class FineTunedModel final : public LanguageModel {
 public:
  FineTunedModel(std::shared_ptr<const TabularModel> base, FineTuneDelta delta);

  const Vocabulary& vocabulary() const override { return base_->vocabulary(); }
  std::string id() const override;
  void distribution(std::span<const TokenId> history,
                    std::span<double> out) const override;
  double probability(std::span<const TokenId> history,
                     TokenId next) const override;

  const TabularModel& base() const { return *base_; }
  std::shared_ptr<const TabularModel> shared_base() const { return base_; }
  const FineTuneDelta& delta() const { return delta_; }

 private:
  std::shared_ptr<const TabularModel> base_;
  FineTuneDelta delta_;
};

// Throws Error(kEmptyCorpus) for an empty corpus and Error(kVocabularyMismatch)
// for sequences tokenized against another vocabulary.
TabularModel fit_tabular(std::span<const TokenSequence> corpus,
                         std::shared_ptr<const Vocabulary> vocab, int order,
                         double alpha);
// Each example contributes the sequence prompt + response + EOS.
TabularModel fit_tabular(const Dataset& corpus,
                         std::shared_ptr<const Vocabulary> vocab, int order,
                         double alpha);

// Counts for the adapter, framed the same way fit_tabular frames a corpus.
CountTable count_sequences(std::span<const TokenSequence> corpus,
                           const Vocabulary& vocab, int order);
CountTable count_examples(const Dataset& corpus, const Vocabulary& vocab,
                          int order);

FineTunedModel apply_fine_tune(std::shared_ptr<const TabularModel> base,
                               std::span<const TokenSequence> ft_corpus,
                               double lambda);
FineTunedModel apply_fine_tune(std::shared_ptr<const TabularModel> base,
                               const Dataset& ft_corpus, double lambda);

struct SamplingConfig {
  int max_len = 32;
  double temperature = 1.0;
  bool greedy = false;  // per-step argmax, lowest id on ties
};

// Draws tokens until EOS (included in the result) or max_len tokens.
TokenSequence sample(const LanguageModel& model, std::span<const TokenId> prompt,
                     const SamplingConfig& config, std::uint64_t rng_seed);

// Natural-log sum over response tokens of log p(y_i | x, y_<i).
double total_log_likelihood(const LanguageModel& model,
                            std::span<const TokenId> prompt,
                            std::span<const TokenId> response);

// Per-token average; throws Error(kEmptyResponse) for an empty response.
double log_likelihood(const LanguageModel& model,
                      std::span<const TokenId> prompt,
                      std::span<const TokenId> response);

// Text formats with exact integer counts and hex-float reals, so a reload
// reproduces every probability bit for bit.
void save_tabular(const TabularModel& model, const std::filesystem::path& path);
TabularModel load_tabular(const std::filesystem::path& path,
                          std::shared_ptr<const Vocabulary> vocab);
void save_delta(const FineTuneDelta& delta, const Vocabulary& vocab,
                const std::filesystem::path& path);
FineTuneDelta load_delta(const std::filesystem::path& path,
                         const Vocabulary& vocab);

// Uniform draw in [0, 1) from the top 53 bits.
template <typename Rng>
double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace pplkd
