#include "pplkd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "pplkd/error.hpp"
#include "pplkd/hash.hpp"
#include "pplkd/parallel.hpp"

namespace pplkd {

void CompensatedSum::add(double x) {
  const double t = sum_ + x;
  if (std::abs(sum_) >= std::abs(x)) {
    comp_ += (sum_ - t) + x;
  } else {
    comp_ += (x - t) + sum_;
  }
  sum_ = t;
}

double SequenceDistribution::total() const {
  CompensatedSum s;
  for (double p : probs) s.add(p);
  return s.value();
}

namespace {

std::size_t checked_space(std::size_t v, int length, std::size_t budget) {
  if (length < 1) throw std::invalid_argument("enumeration length must be >= 1");
  std::size_t n = 1;
  for (int i = 0; i < length; ++i) {
    if (n > budget / v) {
      throw Error(ErrorCode::kBudgetExceeded,
                  std::to_string(v) + "^" + std::to_string(length) +
                      " sequences exceed the enumeration budget of " + std::to_string(budget));
    }
    n *= v;
  }
  return n;
}

struct Enumerator {
  const LanguageModel& model;
  std::size_t v;
  std::size_t length;
  SequenceDistribution& out;

  // Fills the block of sequences below `history`, whose first index is `index`.
  void run(std::vector<TokenId>& history, std::size_t depth, double prob, std::size_t& index,
           std::vector<TokenId>& path) const {
    std::vector<double> p(v);
    model.distribution(history, p);
    for (std::size_t t = 0; t < v; ++t) {
      path[depth] = static_cast<TokenId>(t);
      const double q = prob * p[t];
      if (depth + 1 == length) {
        std::copy(path.begin(), path.end(), out.tokens.begin() + static_cast<std::ptrdiff_t>(index * length));
        out.probs[index++] = q;
      } else {
        history.push_back(static_cast<TokenId>(t));
        run(history, depth + 1, q, index, path);
        history.pop_back();
      }
    }
  }
};

struct Accum {
  CompensatedSum f_lf;   // sum p_F * l_F
  CompensatedSum b_lf;   // sum p_B * l_F
  CompensatedSum h_f;    // -sum p_F log p_F
  CompensatedSum h_b;    // -sum p_B log p_B
  CompensatedSum kl;     // sum p_B log(p_B / p_F)
};

struct JointWalker {
  const LanguageModel& f;
  const LanguageModel& b;
  std::size_t v;
  std::size_t length;

  void run(std::vector<TokenId>& history, std::size_t depth, double pf, double pb, double lf,
           Accum& acc) const {
    std::vector<double> qf(v), qb(v);
    f.distribution(history, qf);
    b.distribution(history, qb);
    for (std::size_t t = 0; t < v; ++t) {
      const double npf = pf * qf[t];
      const double npb = pb * qb[t];
      const double nlf = lf + std::log(qf[t]);
      if (depth + 1 == length) {
        leaf(npf, npb, nlf, acc);
      } else {
        history.push_back(static_cast<TokenId>(t));
        run(history, depth + 1, npf, npb, nlf, acc);
        history.pop_back();
      }
    }
  }

  static void leaf(double pf, double pb, double lf, Accum& acc) {
    // Expectations use the summed log-likelihood; the information terms use
    // the logarithm of the sequence probability itself.
    acc.f_lf.add(pf * lf);
    acc.b_lf.add(pb * lf);
    if (pf > 0.0) acc.h_f.add(-pf * std::log(pf));
    if (pb > 0.0) {
      acc.h_b.add(-pb * std::log(pb));
      acc.kl.add(pb * (std::log(pb) - std::log(pf)));
    }
  }
};

}  // namespace

SequenceDistribution enumerate_sequence_distribution(const LanguageModel& model,
                                                     std::span<const TokenId> prompt,
                                                     int length, std::size_t budget,
                                                     int workers) {
  const std::size_t v = model.vocabulary().size();
  const std::size_t n = checked_space(v, length, budget);
  SequenceDistribution out;
  out.length = static_cast<std::size_t>(length);
  out.tokens.resize(n * out.length);
  out.probs.resize(n);

  std::vector<double> first(v);
  model.distribution(prompt, first);
  const std::size_t block = n / v;
  const Enumerator en{model, v, out.length, out};
  parallel_for(v, workers, [&](std::size_t t0) {
    std::size_t index = t0 * block;
    std::vector<TokenId> path(out.length);
    path[0] = static_cast<TokenId>(t0);
    if (out.length == 1) {
      out.tokens[index] = static_cast<TokenId>(t0);
      out.probs[index] = first[t0];
      return;
    }
    std::vector<TokenId> history(prompt.begin(), prompt.end());
    history.push_back(static_cast<TokenId>(t0));
    en.run(history, 1, first[t0], index, path);
  });
  return out;
}

MarginDecomposition decompose_margin(const LanguageModel& model_f, const LanguageModel& model_b,
                                     std::span<const TokenId> prompt, int length,
                                     std::size_t budget, int workers) {
  if (!(model_f.vocabulary() == model_b.vocabulary())) {
    throw Error(ErrorCode::kVocabularyMismatch, "decomposition needs a shared vocabulary");
  }
  const std::size_t v = model_f.vocabulary().size();
  checked_space(v, length, budget);

  std::vector<double> qf(v), qb(v);
  model_f.distribution(prompt, qf);
  model_b.distribution(prompt, qb);
  std::vector<Accum> blocks(v);
  const JointWalker walker{model_f, model_b, v, static_cast<std::size_t>(length)};
  parallel_for(v, workers, [&](std::size_t t0) {
    const double lf = std::log(qf[t0]);
    if (length == 1) {
      JointWalker::leaf(qf[t0], qb[t0], lf, blocks[t0]);
      return;
    }
    std::vector<TokenId> history(prompt.begin(), prompt.end());
    history.push_back(static_cast<TokenId>(t0));
    walker.run(history, 1, qf[t0], qb[t0], lf, blocks[t0]);
  });

  CompensatedSum f_lf, b_lf, h_f, h_b, kl;
  for (const auto& a : blocks) {
    f_lf.add(a.f_lf.value());
    b_lf.add(a.b_lf.value());
    h_f.add(a.h_f.value());
    h_b.add(a.h_b.value());
    kl.add(a.kl.value());
  }
  MarginDecomposition d;
  d.length = length;
  d.expected_margin = f_lf.value() - b_lf.value();
  d.entropy_f = h_f.value();
  d.entropy_b = h_b.value();
  d.kl = kl.value();
  d.residual = d.expected_margin - (d.entropy_b - d.entropy_f) - d.kl;
  return d;
}

nlohmann::ordered_json MarginDecomposition::to_json() const {
  return {{"length", length},         {"expected_margin", expected_margin},
          {"entropy_b", entropy_b},   {"entropy_f", entropy_f},
          {"entropy_drop", entropy_drop()}, {"kl", kl},
          {"residual", residual}};
}

std::vector<TokenId> sample_fixed_length(const LanguageModel& model,
                                         std::span<const TokenId> prompt, int length,
                                         std::uint64_t seed) {
  if (length < 1) throw std::invalid_argument("length must be >= 1");
  const std::size_t v = model.vocabulary().size();
  std::mt19937_64 rng(seed);
  std::vector<TokenId> history(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  std::vector<double> p(v);
  for (int i = 0; i < length; ++i) {
    model.distribution(history, p);
    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t pick = v - 1;
    for (std::size_t t = 0; t < v; ++t) {
      acc += p[t];
      if (u < acc) {
        pick = t;
        break;
      }
    }
    out.push_back(static_cast<TokenId>(pick));
    history.push_back(static_cast<TokenId>(pick));
  }
  return out;
}

double sampled_margin(const LanguageModel& model_f, const LanguageModel& model_b,
                      std::span<const TokenId> prompt, int length, std::uint64_t seed) {
  const auto yf = sample_fixed_length(model_f, prompt, length, derive_seed(seed, 1));
  const auto yb = sample_fixed_length(model_b, prompt, length, derive_seed(seed, 2));
  return total_log_likelihood(model_f, prompt, yf) - total_log_likelihood(model_f, prompt, yb);
}

Histogram::Histogram(std::vector<double> e) : edges(std::move(e)) {
  if (edges.size() < 2) throw std::invalid_argument("histogram needs at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("edges must increase strictly");
  }
  counts.assign(edges.size() - 1, 0);
}

void Histogram::add(double x) {
  if (x < edges.front()) {
    ++underflow;
  } else if (x >= edges.back() || std::isnan(x)) {
    ++overflow;
  } else {
    const auto it = std::upper_bound(edges.begin(), edges.end(), x);
    ++counts[static_cast<std::size_t>(it - edges.begin()) - 1];
  }
}

std::size_t Histogram::total() const {
  std::size_t n = underflow + overflow;
  for (auto c : counts) n += c;
  return n;
}

nlohmann::ordered_json Histogram::to_json() const {
  return {{"edges", edges}, {"counts", counts}, {"underflow", underflow},
          {"overflow", overflow}, {"total", total()}};
}

Histogram perplexity_histogram(const std::vector<ScoredPair>& pairs, Which which,
                               std::vector<double> edges) {
  Histogram h(std::move(edges));
  for (const auto& p : pairs) h.add(which == Which::kF ? p.ppl_f : p.ppl_b);
  return h;
}

Histogram perplexity_histogram(const Dataset& ds, Which which, std::vector<double> edges) {
  Histogram h(std::move(edges));
  for (const auto& ex : ds.examples()) {
    if (ex.score) h.add(which == Which::kF ? ex.score->ppl_f : ex.score->ppl_b);
  }
  return h;
}

double distinct_n(const std::vector<std::string>& prompts, int n) {
  if (n < 1) throw std::invalid_argument("n must be >= 1");
  if (prompts.empty()) throw std::invalid_argument("distinct_n of no prompts");
  std::set<std::vector<std::string_view>> seen;
  std::size_t total = 0;
  for (const auto& p : prompts) {
    const auto toks = split_whitespace(p);
    const auto un = static_cast<std::size_t>(n);
    if (toks.size() < un) continue;
    for (std::size_t i = 0; i + un <= toks.size(); ++i) {
      seen.emplace(toks.begin() + static_cast<std::ptrdiff_t>(i),
                   toks.begin() + static_cast<std::ptrdiff_t>(i + un));
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(seen.size()) / static_cast<double>(total);
}

}  // namespace pplkd
