#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pplkd/corpus.hpp"
#include "pplkd/lm.hpp"
#include "pplkd/scoring.hpp"

namespace pplkd {

inline constexpr std::size_t kDefaultEnumerationBudget = 1'000'000;

// Neumaier compensated summation.
class CompensatedSum {
 public:
  void add(double x);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Every length-L continuation of a prompt in lexicographic id order. EOS is
// an ordinary token here; nothing terminates early.
struct SequenceDistribution {
  std::size_t length = 0;
  std::vector<TokenId> tokens;  // size() * length ids, row-major
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  std::span<const TokenId> sequence(std::size_t i) const {
    return {tokens.data() + i * length, length};
  }
  double total() const;
};

// Throws Error(kBudgetExceeded) when |V|^L exceeds `budget`.
SequenceDistribution enumerate_sequence_distribution(
    const LanguageModel& model, std::span<const TokenId> prompt, int length,
    std::size_t budget = kDefaultEnumerationBudget, int workers = 1);

struct MarginDecomposition {
  int length = 0;
  double expected_margin = 0.0;  // E_F[l_F] - E_B[l_F], total log-likelihoods
  double entropy_b = 0.0;
  double entropy_f = 0.0;
  double kl = 0.0;  // KL(p_B || p_F)
  double residual = 0.0;

  double entropy_drop() const { return entropy_b - entropy_f; }
  nlohmann::ordered_json to_json() const;
};

MarginDecomposition decompose_margin(const LanguageModel& model_f,
                                     const LanguageModel& model_b,
                                     std::span<const TokenId> prompt, int length,
                                     std::size_t budget = kDefaultEnumerationBudget,
                                     int workers = 1);

// Exactly `length` tokens, EOS included as an ordinary token; the Monte Carlo
// counterpart of the enumeration.
std::vector<TokenId> sample_fixed_length(const LanguageModel& model,
                                         std::span<const TokenId> prompt, int length,
                                         std::uint64_t seed);

// l_F(y_f) - l_F(y_b) for one fixed-length draw from each model.
double sampled_margin(const LanguageModel& model_f, const LanguageModel& model_b,
                      std::span<const TokenId> prompt, int length, std::uint64_t seed);

// Half-open bins [e_i, e_{i+1}); values outside the edges are counted in
// underflow / overflow rather than dropped.
struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
  std::size_t underflow = 0;
  std::size_t overflow = 0;

  explicit Histogram(std::vector<double> edges);
  void add(double x);
  std::size_t total() const;
  nlohmann::ordered_json to_json() const;
};

enum class Which { kF, kB };

Histogram perplexity_histogram(const std::vector<ScoredPair>& pairs, Which which,
                               std::vector<double> edges);
// Scored examples of a dataset; unscored examples are skipped.
Histogram perplexity_histogram(const Dataset& ds, Which which, std::vector<double> edges);

// Distinct n-grams over total n-grams, n-grams taken within each prompt.
// Returns 0 when no prompt is n tokens long.
double distinct_n(const std::vector<std::string>& prompts, int n);

}  // namespace pplkd
