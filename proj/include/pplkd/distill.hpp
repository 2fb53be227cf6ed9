#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pplkd/corpus.hpp"
#include "pplkd/lm.hpp"

namespace pplkd {

// Total (not averaged) negative log-likelihood of the response under the
// target. Throws Error(kEmptyResponse).
double kd_loss(const LanguageModel& target, std::span<const TokenId> prompt,
               std::span<const TokenId> response);
// The response text is framed with EOS, as everywhere else.
double kd_loss(const LanguageModel& target, const Example& example);

// Sum over the dataset, reduced in fixed chunks so the result does not depend
// on the worker count.
double total_kd_loss(const LanguageModel& target, const Dataset& ds, int workers = 1);

// Continuation counts of every (prompt, response) pair, response positions only.
CountTable kd_counts(const Dataset& ds, const Vocabulary& vocab, int order);

// Closed-form tabular student. As alpha -> 0 it is the minimizer of the total
// kd_loss over the tabular family. Throws Error(kEmptyDataset).
TabularModel distill_tabular(const Dataset& ds, std::shared_ptr<const Vocabulary> vocab,
                             int order, double alpha);

// Student that starts from a pretrained prior: the KD counts become an
// adapter on top of it, weighted by lambda.
FineTunedModel distill_onto(std::shared_ptr<const TabularModel> prior, const Dataset& ds,
                            double lambda);

// Free logits per observed context; unobserved contexts fall back to a zero
// row, i.e. the uniform distribution.
class LogitTableModel final : public LanguageModel {
 public:
  LogitTableModel(std::shared_ptr<const Vocabulary> vocab, int order,
                  std::vector<CountTable::Key> contexts);

  const Vocabulary& vocabulary() const override { return *vocab_; }
  std::string id() const override;
  void distribution(std::span<const TokenId> history, std::span<double> out) const override;

  int order() const { return keyer_.order(); }
  const std::vector<CountTable::Key>& contexts() const { return contexts_; }
  // Row-major [context][token].
  std::vector<double>& logits() { return logits_; }
  const std::vector<double>& logits() const { return logits_; }
  // Row of `key`, or -1 when the context has no parameters.
  std::ptrdiff_t row_of(CountTable::Key key) const;

 private:
  std::shared_ptr<const Vocabulary> vocab_;
  CountTable keyer_;  // empty; only used for context keys
  std::vector<CountTable::Key> contexts_;
  std::unordered_map<CountTable::Key, std::size_t> rows_;
  std::vector<double> logits_;
};

void save_logit_table(const LogitTableModel& model, const std::filesystem::path& path);
LogitTableModel load_logit_table(const std::filesystem::path& path,
                                 std::shared_ptr<const Vocabulary> vocab);

// Mean kd_loss of a dataset as a function of LogitTableModel parameters.
class KdObjective {
 public:
  KdObjective(const Dataset& ds, const Vocabulary& vocab, int order);

  const std::vector<CountTable::Key>& contexts() const { return contexts_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t dimension() const { return contexts_.size() * vocab_size_; }
  std::size_t examples() const { return examples_; }

  double value(std::span<const double> logits, int workers = 1) const;
  void gradient(std::span<const double> logits, std::span<double> grad,
                int workers = 1) const;

 private:
  std::size_t vocab_size_;
  std::size_t examples_;
  std::vector<CountTable::Key> contexts_;
  std::vector<std::vector<std::pair<TokenId, double>>> counts_;  // per context
  std::vector<double> totals_;
};

struct TrainConfig {
  int epochs = 2000;
  double learning_rate = 1.0;
  std::uint64_t seed = 0;
  double init_scale = 0.0;  // > 0: N(0, init_scale) logits instead of zeros
  int report_every = 1;
  int workers = 1;
};

struct LossPoint {
  int epoch;
  double loss;  // mean kd_loss
};

struct TrainResult {
  LogitTableModel model;
  std::vector<LossPoint> trajectory;  // epoch 0 is the initialization

  double final_loss() const { return trajectory.back().loss; }
};

// Full-batch gradient descent on the mean kd_loss. Throws
// Error(kEmptyDataset) or Error(kDivergenceDetected).
TrainResult distill_gradient(const Dataset& ds, std::shared_ptr<const Vocabulary> vocab,
                             int order, const TrainConfig& config);

void write_loss_csv(const std::vector<LossPoint>& trajectory,
                    const std::filesystem::path& path);

}  // namespace pplkd
