#include "pplkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "pplkd/error.hpp"
#include "pplkd/parallel.hpp"

namespace pplkd {

namespace {

constexpr std::size_t kChunk = 64;

// Sums f(i) for i in [0, n) with a chunking that does not depend on workers.
template <typename Fn>
double chunked_sum(std::size_t n, int workers, Fn&& f) {
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(chunks, 0.0);
  parallel_for(chunks, workers, [&](std::size_t c) {
    double s = 0.0;
    const std::size_t end = std::min(n, (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) s += f(i);
    partial[c] = s;
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

double kd_loss(const LanguageModel& target, std::span<const TokenId> prompt,
               std::span<const TokenId> response) {
  if (response.empty()) throw Error(ErrorCode::kEmptyResponse, "kd_loss of an empty response");
  return -total_log_likelihood(target, prompt, response);
}

double kd_loss(const LanguageModel& target, const Example& example) {
  const auto& vocab = target.vocabulary();
  const auto x = tokenize(example.prompt, vocab);
  const auto y = frame_response(example.response, vocab);
  return kd_loss(target, x.ids, y.ids);
}

double total_kd_loss(const LanguageModel& target, const Dataset& ds, int workers) {
  const auto& ex = ds.examples();
  return chunked_sum(ex.size(), workers, [&](std::size_t i) { return kd_loss(target, ex[i]); });
}

CountTable kd_counts(const Dataset& ds, const Vocabulary& vocab, int order) {
  CountTable counts(vocab.size(), order);
  for (const auto& ex : ds.examples()) {
    const auto x = tokenize(ex.prompt, vocab);
    const auto y = frame_response(ex.response, vocab);
    counts.add_continuation(x.ids, y.ids);
  }
  return counts;
}

TabularModel distill_tabular(const Dataset& ds, std::shared_ptr<const Vocabulary> vocab,
                             int order, double alpha) {
  if (!vocab) throw std::invalid_argument("null vocabulary");
  if (ds.empty()) throw Error(ErrorCode::kEmptyDataset, "nothing to distill");
  auto counts = kd_counts(ds, *vocab, order);
  return TabularModel(std::move(vocab), std::move(counts), alpha);
}

FineTunedModel distill_onto(std::shared_ptr<const TabularModel> prior, const Dataset& ds,
                            double lambda) {
  if (!prior) throw std::invalid_argument("null prior");
  if (ds.empty()) throw Error(ErrorCode::kEmptyDataset, "nothing to distill");
  auto counts = kd_counts(ds, prior->vocabulary(), prior->order());
  return FineTunedModel(std::move(prior), FineTuneDelta{std::move(counts), lambda});
}

LogitTableModel::LogitTableModel(std::shared_ptr<const Vocabulary> vocab, int order,
                                 std::vector<CountTable::Key> contexts)
    : vocab_(std::move(vocab)),
      keyer_(vocab_ ? vocab_->size() : 1, order),
      contexts_(std::move(contexts)) {
  if (!vocab_) throw std::invalid_argument("null vocabulary");
  for (std::size_t i = 0; i < contexts_.size(); ++i) {
    if (!rows_.emplace(contexts_[i], i).second) {
      throw std::invalid_argument("duplicate context in logit table");
    }
  }
  logits_.assign(contexts_.size() * vocab_->size(), 0.0);
}

std::string LogitTableModel::id() const {
  return "logits(order=" + std::to_string(order()) + ",contexts=" +
         std::to_string(contexts_.size()) + ")";
}

std::ptrdiff_t LogitTableModel::row_of(CountTable::Key key) const {
  auto it = rows_.find(key);
  return it == rows_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
}

void LogitTableModel::distribution(std::span<const TokenId> history,
                                   std::span<double> out) const {
  const std::size_t v = vocab_->size();
  const auto row = row_of(keyer_.context_key(history));
  if (row < 0) {
    std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(v), 1.0 / static_cast<double>(v));
    return;
  }
  std::span<const double> z(logits_.data() + static_cast<std::size_t>(row) * v, v);
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t t = 0; t < v; ++t) {
    out[t] = std::exp(z[t] - m);
    s += out[t];
  }
  for (std::size_t t = 0; t < v; ++t) out[t] /= s;
}

void save_logit_table(const LogitTableModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  const auto& vocab = model.vocabulary();
  const std::size_t v = vocab.size();
  CountTable keyer(v, model.order());
  out << "pplkd-logits 1\norder " << model.order() << "\nvocab " << vocab.fingerprint_hex()
      << ' ' << v << "\nrows " << model.contexts().size() << '\n';
  char buf[64];
  for (std::size_t r = 0; r < model.contexts().size(); ++r) {
    out << "ctx";
    for (TokenId t : keyer.decode_key(model.contexts()[r])) out << ' ' << t;
    out << " |";
    for (std::size_t t = 0; t < v; ++t) {
      std::snprintf(buf, sizeof(buf), " %a", model.logits()[r * v + t]);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

LogitTableModel load_logit_table(const std::filesystem::path& path,
                                 std::shared_ptr<const Vocabulary> vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  std::string line, word;
  std::size_t lineno = 0;
  auto next = [&]() -> std::istringstream {
    if (!std::getline(in, line)) throw MalformedRecord(lineno + 1, "truncated logit table");
    ++lineno;
    return std::istringstream(line);
  };
  int version = 0, order = 0;
  std::string hex;
  std::size_t v = 0, rows = 0;
  {
    auto ls = next();
    ls >> word >> version;
    if (word != "pplkd-logits" || version != 1) throw MalformedRecord(lineno, "not a logit table");
  }
  {
    auto ls = next();
    ls >> word >> order;
    if (word != "order" || order < 1) throw MalformedRecord(lineno, "bad order line");
  }
  {
    auto ls = next();
    ls >> word >> hex >> v;
    if (word != "vocab") throw MalformedRecord(lineno, "bad vocab line");
  }
  if (hex != vocab->fingerprint_hex() || v != vocab->size()) {
    throw Error(ErrorCode::kVocabularyMismatch, "logit table written for vocabulary " + hex);
  }
  {
    auto ls = next();
    ls >> word >> rows;
    if (word != "rows") throw MalformedRecord(lineno, "bad rows line");
  }
  CountTable keyer(v, order);
  std::vector<CountTable::Key> contexts;
  std::vector<double> values;
  for (std::size_t r = 0; r < rows; ++r) {
    auto ls = next();
    ls >> word;
    std::vector<TokenId> ctx;
    while (ls >> word && word != "|") ctx.push_back(static_cast<TokenId>(std::stol(word)));
    if (ctx.size() != keyer.window()) throw MalformedRecord(lineno, "context width mismatch");
    contexts.push_back(keyer.context_key(ctx));
    std::size_t n = 0;
    while (ls >> word) {
      values.push_back(std::strtod(word.c_str(), nullptr));
      ++n;
    }
    if (n != v) throw MalformedRecord(lineno, "logit row has wrong width");
  }
  LogitTableModel model(std::move(vocab), order, std::move(contexts));
  model.logits() = std::move(values);
  return model;
}

KdObjective::KdObjective(const Dataset& ds, const Vocabulary& vocab, int order)
    : vocab_size_(vocab.size()), examples_(ds.size()) {
  if (ds.empty()) throw Error(ErrorCode::kEmptyDataset, "objective over an empty dataset");
  const auto table = kd_counts(ds, vocab, order);
  contexts_ = table.sorted_keys();
  for (auto key : contexts_) {
    const auto* row = table.row(key);
    std::vector<std::pair<TokenId, double>> entries;
    for (const auto& [t, c] : row->entries) entries.emplace_back(t, static_cast<double>(c));
    counts_.push_back(std::move(entries));
    totals_.push_back(static_cast<double>(row->total));
  }
}

double KdObjective::value(std::span<const double> logits, int workers) const {
  if (logits.size() != dimension()) throw std::invalid_argument("logit vector has wrong size");
  const std::size_t v = vocab_size_;
  const double sum = chunked_sum(contexts_.size(), workers, [&](std::size_t c) {
    auto z = logits.subspan(c * v, v);
    double s = totals_[c] * log_sum_exp(z);
    for (const auto& [t, n] : counts_[c]) s -= n * z[static_cast<std::size_t>(t)];
    return s;
  });
  return sum / static_cast<double>(examples_);
}

void KdObjective::gradient(std::span<const double> logits, std::span<double> grad,
                           int workers) const {
  if (logits.size() != dimension() || grad.size() != dimension()) {
    throw std::invalid_argument("logit/gradient vector has wrong size");
  }
  const std::size_t v = vocab_size_;
  const double inv_e = 1.0 / static_cast<double>(examples_);
  parallel_for(contexts_.size(), workers, [&](std::size_t c) {
    auto z = logits.subspan(c * v, v);
    auto g = grad.subspan(c * v, v);
    const double lse = log_sum_exp(z);
    for (std::size_t t = 0; t < v; ++t) g[t] = totals_[c] * std::exp(z[t] - lse) * inv_e;
    for (const auto& [t, n] : counts_[c]) g[static_cast<std::size_t>(t)] -= n * inv_e;
  });
}

TrainResult distill_gradient(const Dataset& ds, std::shared_ptr<const Vocabulary> vocab,
                             int order, const TrainConfig& config) {
  if (!vocab) throw std::invalid_argument("null vocabulary");
  if (config.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(config.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  const KdObjective objective(ds, *vocab, order);
  LogitTableModel model(vocab, order, objective.contexts());
  auto& theta = model.logits();
  if (config.init_scale > 0.0) {
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, config.init_scale);
    for (auto& x : theta) x = normal(rng);
  }

  std::vector<LossPoint> trajectory{{0, objective.value(theta, config.workers)}};
  std::vector<double> grad(theta.size());
  const int every = std::max(1, config.report_every);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    objective.gradient(theta, grad, config.workers);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= config.learning_rate * grad[i];
    const double loss = objective.value(theta, config.workers);
    if (!std::isfinite(loss)) {
      throw Error(ErrorCode::kDivergenceDetected,
                  "loss became non-finite at epoch " + std::to_string(epoch));
    }
    if (epoch % every == 0 || epoch == config.epochs) trajectory.push_back({epoch, loss});
  }
  return TrainResult{std::move(model), std::move(trajectory)};
}

void write_loss_csv(const std::vector<LossPoint>& trajectory,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << "epoch,loss\n";
  char buf[64];
  for (const auto& p : trajectory) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", p.epoch, p.loss);
    out << buf;
  }
}

}  // namespace pplkd
