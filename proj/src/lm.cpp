#include "pplkd/lm.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "pplkd/error.hpp"

namespace pplkd {

double LanguageModel::probability(std::span<const TokenId> history,
                                  TokenId next) const {
  std::vector<double> p(vocabulary().size());
  distribution(history, p);
  return p.at(static_cast<std::size_t>(next));
}

std::vector<double> LanguageModel::next_token_distribution(
    std::span<const TokenId> history) const {
  std::vector<double> p(vocabulary().size());
  distribution(history, p);
  return p;
}

std::int64_t CountRow::count(TokenId token) const {
  auto it = std::lower_bound(
      entries.begin(), entries.end(), token,
      [](const auto& e, TokenId t) { return e.first < t; });
  return (it != entries.end() && it->first == token) ? it->second : 0;
}

CountTable::CountTable(std::size_t vocab_size, int order)
    : vocab_size_(vocab_size), order_(order) {
  if (order < 1) throw std::invalid_argument("model order must be >= 1");
  if (vocab_size < 1) throw std::invalid_argument("empty vocabulary");
  Key p = 1;
  for (int i = 0; i + 1 < order; ++i) {
    place_.push_back(p);
    if (p > std::numeric_limits<Key>::max() / 2 / vocab_size) {
      throw std::invalid_argument("vocabulary^(order-1) exceeds the key space");
    }
    p *= vocab_size;
  }
}

CountTable::Key CountTable::context_key(std::span<const TokenId> history) const {
  const std::size_t w = window();
  Key key = 0;
  for (std::size_t j = 0; j < w; ++j) {
    // position of the j-th (oldest first) window token in history
    const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(history.size()) -
                               static_cast<std::ptrdiff_t>(w) +
                               static_cast<std::ptrdiff_t>(j);
    const TokenId tok = pos >= 0 ? history[static_cast<std::size_t>(pos)]
                                 : Vocabulary::kBos;
    key += static_cast<Key>(tok) * place_[j];
  }
  return key;
}

std::vector<TokenId> CountTable::decode_key(Key key) const {
  std::vector<TokenId> out(window());
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] = static_cast<TokenId>((key / place_[j]) % vocab_size_);
  }
  return out;
}

void CountTable::add(Key key, TokenId token, std::int64_t delta) {
  if (token < 0 || static_cast<std::size_t>(token) >= vocab_size_) {
    throw std::out_of_range("token id outside count table vocabulary");
  }
  if (delta == 0) return;
  auto& row = rows_[key];
  auto it = std::lower_bound(
      row.entries.begin(), row.entries.end(), token,
      [](const auto& e, TokenId t) { return e.first < t; });
  const bool present = it != row.entries.end() && it->first == token;
  const std::int64_t current = present ? it->second : 0;
  if (current + delta < 0) {
    if (row.entries.empty()) rows_.erase(key);
    throw std::invalid_argument("count would become negative");
  }
  if (present) {
    it->second += delta;
    if (it->second == 0) row.entries.erase(it);
  } else {
    row.entries.insert(it, {token, delta});
  }
  row.total += delta;
  if (row.entries.empty()) rows_.erase(key);
}

void CountTable::add_sequence(std::span<const TokenId> tokens) {
  for (std::size_t i = 0; i <= tokens.size(); ++i) {
    const TokenId next = i < tokens.size() ? tokens[i] : Vocabulary::kEos;
    add(context_key(tokens.first(i)), next);
  }
}

void CountTable::add_continuation(std::span<const TokenId> prompt,
                                  std::span<const TokenId> response) {
  std::vector<TokenId> history(prompt.begin(), prompt.end());
  history.reserve(prompt.size() + response.size());
  for (TokenId t : response) {
    add(context_key(history), t);
    history.push_back(t);
  }
}

const CountRow* CountTable::row(Key key) const {
  auto it = rows_.find(key);
  return it == rows_.end() ? nullptr : &it->second;
}

std::vector<CountTable::Key> CountTable::sorted_keys() const {
  std::vector<Key> keys;
  keys.reserve(rows_.size());
  for (const auto& [k, _] : rows_) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  return keys;
}

std::int64_t CountTable::total() const {
  std::int64_t t = 0;
  for (const auto& [_, r] : rows_) t += r.total;
  return t;
}

bool CountTable::operator==(const CountTable& other) const {
  return vocab_size_ == other.vocab_size_ && order_ == other.order_ &&
         rows_ == other.rows_;
}

TabularModel::TabularModel(std::shared_ptr<const Vocabulary> vocab,
                           CountTable counts, double alpha)
    : vocab_(std::move(vocab)), counts_(std::move(counts)), alpha_(alpha) {
  if (!vocab_) throw std::invalid_argument("null vocabulary");
  if (!(alpha_ > 0.0) || !std::isfinite(alpha_)) {
    throw std::invalid_argument("smoothing alpha must be positive");
  }
  if (counts_.vocab_size() != vocab_->size()) {
    throw Error(ErrorCode::kVocabularyMismatch,
                "count table built for a different vocabulary size");
  }
}

std::string TabularModel::id() const {
  return "tabular(order=" + std::to_string(order()) + ")";
}

void TabularModel::distribution(std::span<const TokenId> history,
                                std::span<double> out) const {
  const std::size_t v = vocab_->size();
  const CountRow* row = counts_.row(counts_.context_key(history));
  const double total = row ? static_cast<double>(row->total) : 0.0;
  const double denom = total + alpha_ * static_cast<double>(v);
  std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(v),
            alpha_ / denom);
  if (!row) return;
  for (const auto& [t, c] : row->entries) {
    out[static_cast<std::size_t>(t)] = (static_cast<double>(c) + alpha_) / denom;
  }
}

double TabularModel::probability(std::span<const TokenId> history,
                                 TokenId next) const {
  const CountRow* row = counts_.row(counts_.context_key(history));
  const double total = row ? static_cast<double>(row->total) : 0.0;
  const double c = row ? static_cast<double>(row->count(next)) : 0.0;
  return (c + alpha_) / (total + alpha_ * static_cast<double>(vocab_->size()));
}

FineTunedModel::FineTunedModel(std::shared_ptr<const TabularModel> base,
                               FineTuneDelta delta)
    : base_(std::move(base)), delta_(std::move(delta)) {
  if (!base_) throw std::invalid_argument("null base model");
  if (!(delta_.lambda >= 0.0) || !std::isfinite(delta_.lambda)) {
    throw std::invalid_argument("fine-tune lambda must be finite and >= 0");
  }
  if (delta_.counts.order() != base_->order() ||
      delta_.counts.vocab_size() != base_->vocabulary().size()) {
    throw Error(ErrorCode::kVocabularyMismatch,
                "delta counts do not match the base model shape");
  }
}

std::string FineTunedModel::id() const {
  std::ostringstream os;
  os << base_->id() << "+delta(lambda=" << delta_.lambda << ")";
  return os.str();
}

void FineTunedModel::distribution(std::span<const TokenId> history,
                                  std::span<double> out) const {
  const std::size_t v = base_->vocabulary().size();
  const auto key = base_->counts().context_key(history);
  const CountRow* b = base_->counts().row(key);
  const CountRow* d = delta_.counts.row(key);
  const double lambda = delta_.lambda;
  const double alpha = base_->alpha();
  const double denom = (b ? static_cast<double>(b->total) : 0.0) +
                       lambda * (d ? static_cast<double>(d->total) : 0.0) +
                       alpha * static_cast<double>(v);
  std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(v), alpha);
  if (b) {
    for (const auto& [t, c] : b->entries) out[static_cast<std::size_t>(t)] += static_cast<double>(c);
  }
  if (d) {
    for (const auto& [t, c] : d->entries) {
      out[static_cast<std::size_t>(t)] += lambda * static_cast<double>(c);
    }
  }
  for (std::size_t i = 0; i < v; ++i) out[i] /= denom;
}

double FineTunedModel::probability(std::span<const TokenId> history,
                                   TokenId next) const {
  const std::size_t v = base_->vocabulary().size();
  const auto key = base_->counts().context_key(history);
  const CountRow* b = base_->counts().row(key);
  const CountRow* d = delta_.counts.row(key);
  const double lambda = delta_.lambda;
  const double alpha = base_->alpha();
  const double denom = (b ? static_cast<double>(b->total) : 0.0) +
                       lambda * (d ? static_cast<double>(d->total) : 0.0) +
                       alpha * static_cast<double>(v);
  const double num = (b ? static_cast<double>(b->count(next)) : 0.0) +
                     lambda * (d ? static_cast<double>(d->count(next)) : 0.0) +
                     alpha;
  return num / denom;
}

namespace {

void check_vocab(const TokenSequence& seq, const Vocabulary& vocab) {
  if (seq.vocab != vocab.fingerprint()) {
    throw Error(ErrorCode::kVocabularyMismatch,
                "sequence was tokenized against vocabulary " +
                    std::to_string(seq.vocab) + ", model uses " +
                    vocab.fingerprint_hex());
  }
  for (TokenId t : seq.ids) {
    if (!vocab.contains(t)) {
      throw Error(ErrorCode::kVocabularyMismatch, "token id out of range");
    }
  }
}

std::vector<TokenId> example_sequence(const Example& ex, const Vocabulary& vocab) {
  auto seq = tokenize(ex.prompt, vocab).ids;
  auto resp = tokenize(ex.response, vocab).ids;
  seq.insert(seq.end(), resp.begin(), resp.end());
  return seq;
}

}  // namespace

CountTable count_sequences(std::span<const TokenSequence> corpus,
                           const Vocabulary& vocab, int order) {
  CountTable counts(vocab.size(), order);
  for (const auto& seq : corpus) {
    check_vocab(seq, vocab);
    counts.add_sequence(seq.ids);
  }
  return counts;
}

CountTable count_examples(const Dataset& corpus, const Vocabulary& vocab,
                          int order) {
  CountTable counts(vocab.size(), order);
  for (const auto& ex : corpus.examples()) {
    counts.add_sequence(example_sequence(ex, vocab));
  }
  return counts;
}

TabularModel fit_tabular(std::span<const TokenSequence> corpus,
                         std::shared_ptr<const Vocabulary> vocab, int order,
                         double alpha) {
  if (!vocab) throw std::invalid_argument("null vocabulary");
  if (corpus.empty()) throw Error(ErrorCode::kEmptyCorpus, "no sequences to fit");
  auto counts = count_sequences(corpus, *vocab, order);
  return TabularModel(std::move(vocab), std::move(counts), alpha);
}

TabularModel fit_tabular(const Dataset& corpus,
                         std::shared_ptr<const Vocabulary> vocab, int order,
                         double alpha) {
  if (!vocab) throw std::invalid_argument("null vocabulary");
  if (corpus.empty()) throw Error(ErrorCode::kEmptyCorpus, "no examples to fit");
  auto counts = count_examples(corpus, *vocab, order);
  return TabularModel(std::move(vocab), std::move(counts), alpha);
}

FineTunedModel apply_fine_tune(std::shared_ptr<const TabularModel> base,
                               std::span<const TokenSequence> ft_corpus,
                               double lambda) {
  if (!base) throw std::invalid_argument("null base model");
  if (ft_corpus.empty()) {
    throw Error(ErrorCode::kEmptyCorpus, "empty fine-tuning corpus");
  }
  auto counts = count_sequences(ft_corpus, base->vocabulary(), base->order());
  return FineTunedModel(std::move(base), FineTuneDelta{std::move(counts), lambda});
}

FineTunedModel apply_fine_tune(std::shared_ptr<const TabularModel> base,
                               const Dataset& ft_corpus, double lambda) {
  if (!base) throw std::invalid_argument("null base model");
  if (ft_corpus.empty()) {
    throw Error(ErrorCode::kEmptyCorpus, "empty fine-tuning corpus");
  }
  auto counts = count_examples(ft_corpus, base->vocabulary(), base->order());
  return FineTunedModel(std::move(base), FineTuneDelta{std::move(counts), lambda});
}

TokenSequence sample(const LanguageModel& model, std::span<const TokenId> prompt,
                     const SamplingConfig& config, std::uint64_t rng_seed) {
  if (config.max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  if (!config.greedy && !(config.temperature > 0.0)) {
    throw std::invalid_argument("temperature must be positive");
  }
  const std::size_t v = model.vocabulary().size();
  std::mt19937_64 rng(rng_seed);
  std::vector<TokenId> history(prompt.begin(), prompt.end());
  std::vector<double> p(v);
  TokenSequence out;
  out.vocab = model.vocabulary().fingerprint();
  for (int step = 0; step < config.max_len; ++step) {
    model.distribution(history, p);
    TokenId next = 0;
    if (config.greedy) {
      next = static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
    } else {
      if (config.temperature != 1.0) {
        const double top = *std::max_element(p.begin(), p.end());
        const double log_top = std::log(top);
        for (auto& x : p) {
          x = x > 0.0 ? std::exp((std::log(x) - log_top) / config.temperature) : 0.0;
        }
      }
      double sum = 0.0;
      for (double x : p) sum += x;
      const double u = uniform01(rng) * sum;
      double acc = 0.0;
      next = -1;
      for (std::size_t i = 0; i < v; ++i) {
        acc += p[i];
        if (u < acc) {
          next = static_cast<TokenId>(i);
          break;
        }
      }
      if (next < 0) {
        // u landed in the rounding slack past the last partial sum
        for (std::size_t i = v; i-- > 0;) {
          if (p[i] > 0.0) {
            next = static_cast<TokenId>(i);
            break;
          }
        }
      }
    }
    out.ids.push_back(next);
    history.push_back(next);
    if (next == Vocabulary::kEos) break;
  }
  return out;
}

double total_log_likelihood(const LanguageModel& model,
                            std::span<const TokenId> prompt,
                            std::span<const TokenId> response) {
  std::vector<TokenId> history(prompt.begin(), prompt.end());
  history.reserve(prompt.size() + response.size());
  double sum = 0.0;
  for (TokenId t : response) {
    sum += std::log(model.probability(history, t));
    history.push_back(t);
  }
  return sum;
}

double log_likelihood(const LanguageModel& model,
                      std::span<const TokenId> prompt,
                      std::span<const TokenId> response) {
  if (response.empty()) {
    throw Error(ErrorCode::kEmptyResponse, "cannot score an empty response");
  }
  return total_log_likelihood(model, prompt, response) /
         static_cast<double>(response.size());
}

namespace {

constexpr const char* kTabularMagic = "pplkd-tabular";
constexpr const char* kDeltaMagic = "pplkd-delta";

std::string hex_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", x);
  return buf;
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') {
    throw MalformedRecord(0, "bad real '" + s + "' in " + path.string());
  }
  return v;
}

void write_counts(std::ostream& out, const CountTable& counts) {
  out << "rows " << counts.row_count() << '\n';
  for (auto key : counts.sorted_keys()) {
    const auto ctx = counts.decode_key(key);
    out << "ctx";
    for (TokenId t : ctx) out << ' ' << t;
    out << " |";
    for (const auto& [t, c] : counts.row(key)->entries) out << ' ' << t << ':' << c;
    out << '\n';
  }
}

struct Header {
  int order = 0;
  double real = 0.0;
  std::string vocab_hex;
  std::size_t vocab_size = 0;
};

// Reads the four header lines shared by both formats.
Header read_header(std::istream& in, const char* magic, const char* real_name,
                   const std::filesystem::path& path, std::size_t& lineno) {
  auto next = [&](const char* what) {
    std::string line;
    if (!std::getline(in, line)) {
      throw MalformedRecord(lineno + 1, std::string("missing ") + what + " in " +
                                            path.string());
    }
    ++lineno;
    return line;
  };
  Header h;
  {
    std::istringstream ls(next("magic"));
    std::string m;
    int version = 0;
    ls >> m >> version;
    if (m != magic || version != 1) {
      throw MalformedRecord(lineno, "not a " + std::string(magic) + " v1 file");
    }
  }
  {
    std::istringstream ls(next("order"));
    std::string k;
    ls >> k >> h.order;
    if (k != "order" || h.order < 1) throw MalformedRecord(lineno, "bad order line");
  }
  {
    std::istringstream ls(next(real_name));
    std::string k, v;
    ls >> k >> v;
    if (k != real_name) throw MalformedRecord(lineno, "bad " + std::string(real_name) + " line");
    h.real = parse_double(v, path);
  }
  {
    std::istringstream ls(next("vocab"));
    std::string k;
    ls >> k >> h.vocab_hex >> h.vocab_size;
    if (k != "vocab") throw MalformedRecord(lineno, "bad vocab line");
  }
  return h;
}

CountTable read_counts(std::istream& in, const Header& h,
                       const std::filesystem::path& path, std::size_t& lineno) {
  CountTable counts(h.vocab_size, h.order);
  std::string line;
  if (!std::getline(in, line)) throw MalformedRecord(lineno + 1, "missing rows line");
  ++lineno;
  std::size_t rows = 0;
  {
    std::istringstream ls(line);
    std::string k;
    ls >> k >> rows;
    if (k != "rows") throw MalformedRecord(lineno, "bad rows line");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (!std::getline(in, line)) {
      throw MalformedRecord(lineno + 1, "truncated count table in " + path.string());
    }
    ++lineno;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word != "ctx") throw MalformedRecord(lineno, "expected ctx row");
    std::vector<TokenId> ctx;
    while (ls >> word && word != "|") ctx.push_back(static_cast<TokenId>(std::stol(word)));
    if (ctx.size() != counts.window()) throw MalformedRecord(lineno, "context width mismatch");
    const auto key = counts.context_key(ctx);
    while (ls >> word) {
      const auto colon = word.find(':');
      if (colon == std::string::npos) throw MalformedRecord(lineno, "bad count entry");
      const auto tok = static_cast<TokenId>(std::stol(word.substr(0, colon)));
      const auto c = std::stoll(word.substr(colon + 1));
      if (c <= 0) throw MalformedRecord(lineno, "non-positive count");
      counts.add(key, tok, c);
    }
  }
  return counts;
}

void check_header_vocab(const Header& h, const Vocabulary& vocab) {
  if (h.vocab_hex != vocab.fingerprint_hex() || h.vocab_size != vocab.size()) {
    throw Error(ErrorCode::kVocabularyMismatch,
                "model file was written for vocabulary " + h.vocab_hex);
  }
}

}  // namespace

void save_tabular(const TabularModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << kTabularMagic << " 1\n"
      << "order " << model.order() << '\n'
      << "alpha " << hex_double(model.alpha()) << '\n'
      << "vocab " << model.vocabulary().fingerprint_hex() << ' '
      << model.vocabulary().size() << '\n';
  write_counts(out, model.counts());
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

TabularModel load_tabular(const std::filesystem::path& path,
                          std::shared_ptr<const Vocabulary> vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  std::size_t lineno = 0;
  const Header h = read_header(in, kTabularMagic, "alpha", path, lineno);
  check_header_vocab(h, *vocab);
  auto counts = read_counts(in, h, path, lineno);
  return TabularModel(std::move(vocab), std::move(counts), h.real);
}

void save_delta(const FineTuneDelta& delta, const Vocabulary& vocab,
                const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << kDeltaMagic << " 1\n"
      << "order " << delta.counts.order() << '\n'
      << "lambda " << hex_double(delta.lambda) << '\n'
      << "vocab " << vocab.fingerprint_hex() << ' ' << vocab.size() << '\n';
  write_counts(out, delta.counts);
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

FineTuneDelta load_delta(const std::filesystem::path& path,
                         const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  std::size_t lineno = 0;
  const Header h = read_header(in, kDeltaMagic, "lambda", path, lineno);
  check_header_vocab(h, vocab);
  return FineTuneDelta{read_counts(in, h, path, lineno), h.real};
}

}  // namespace pplkd
