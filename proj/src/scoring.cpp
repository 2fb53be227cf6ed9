#include "pplkd/scoring.hpp"

#include <charconv>
#include <cmath>
#include <limits>

#include "pplkd/error.hpp"
#include "pplkd/hash.hpp"
#include "pplkd/remote.hpp"

namespace pplkd {

double perplexity(const LanguageModel& scorer, std::span<const TokenId> prompt,
                  std::span<const TokenId> response) {
  return std::exp(-log_likelihood(scorer, prompt, response));
}

double margin(double ppl_f, double ppl_b) { return std::log(ppl_b) - std::log(ppl_f); }

namespace {

std::string fmt(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

[[noreturn]] void bad_rule(const std::string& msg) {
  throw Error(ErrorCode::kInvalidRuleParameters, msg);
}

}  // namespace

FilterRule::FilterRule(RuleKind kind, double p1, double p2)
    : kind_(kind), p1_(p1), p2_(p2) {
  auto need_tau = [](double t) {
    if (!(t > 1.0) || !std::isfinite(t)) {
      bad_rule("threshold must be a finite value > 1, got " + fmt(t));
    }
  };
  switch (kind_) {
    case RuleKind::kLowHigh:
    case RuleKind::kSymmetric:
    case RuleKind::kLowLow:
    case RuleKind::kHighHigh:
      need_tau(p1_);
      break;
    case RuleKind::kAsymmetric:
      need_tau(p1_);
      need_tau(p2_);
      if (p1_ > p2_) bad_rule("asymmetric rule needs tau_f <= tau_b");
      break;
    case RuleKind::kRatio:
      if (!(p1_ > 0.0) || !std::isfinite(p1_)) bad_rule("ratio must be positive");
      break;
    case RuleKind::kNone:
      break;
  }
}

FilterRule FilterRule::low_high(double tau) { return {RuleKind::kLowHigh, tau, 0.0}; }
FilterRule FilterRule::symmetric(double tau) { return {RuleKind::kSymmetric, tau, 0.0}; }
FilterRule FilterRule::asymmetric(double tau_f, double tau_b) {
  return {RuleKind::kAsymmetric, tau_f, tau_b};
}
FilterRule FilterRule::ratio(double rho) { return {RuleKind::kRatio, rho, 0.0}; }
FilterRule FilterRule::low_low(double tau) { return {RuleKind::kLowLow, tau, 0.0}; }
FilterRule FilterRule::high_high(double tau) { return {RuleKind::kHighHigh, tau, 0.0}; }
FilterRule FilterRule::none() { return {RuleKind::kNone, 0.0, 0.0}; }

std::string FilterRule::id() const {
  switch (kind_) {
    case RuleKind::kLowHigh: return "low_high(" + fmt(p1_) + ")";
    case RuleKind::kSymmetric: return "symmetric(" + fmt(p1_) + ")";
    case RuleKind::kAsymmetric: return "asymmetric(" + fmt(p1_) + "," + fmt(p2_) + ")";
    case RuleKind::kRatio: return "ratio(" + fmt(p1_) + ")";
    case RuleKind::kLowLow: return "low_low(" + fmt(p1_) + ")";
    case RuleKind::kHighHigh: return "high_high(" + fmt(p1_) + ")";
    case RuleKind::kNone: return "none";
  }
  return "none";
}

FilterRule FilterRule::parse(std::string_view text) {
  const std::string s = normalize_text(text);
  const auto open = s.find('(');
  const std::string name = s.substr(0, open);
  std::vector<double> args;
  if (open != std::string::npos) {
    if (s.back() != ')') bad_rule("unterminated rule arguments: " + s);
    std::string_view inner(s.data() + open + 1, s.size() - open - 2);
    while (!inner.empty()) {
      while (!inner.empty() && inner.front() == ' ') inner.remove_prefix(1);
      const auto comma = inner.find(',');
      auto part = inner.substr(0, comma);
      while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
      double v = 0.0;
      auto res = std::from_chars(part.data(), part.data() + part.size(), v);
      if (res.ec != std::errc() || res.ptr != part.data() + part.size()) {
        bad_rule("bad rule argument '" + std::string(part) + "'");
      }
      args.push_back(v);
      if (comma == std::string_view::npos) break;
      inner.remove_prefix(comma + 1);
    }
  }
  auto one = [&](double def) {
    if (args.size() > 1) bad_rule(name + " takes one parameter");
    return args.empty() ? def : args[0];
  };
  if (name == "low_high") return low_high(one(kDefaultTau));
  if (name == "symmetric") return symmetric(one(1.3));
  if (name == "ratio") return ratio(one(1.5));
  if (name == "low_low") return low_low(one(kDefaultTau));
  if (name == "high_high") return high_high(one(kDefaultTau));
  if (name == "asymmetric") {
    if (args.empty()) return asymmetric();
    if (args.size() != 2) bad_rule("asymmetric takes two parameters");
    return asymmetric(args[0], args[1]);
  }
  if (name == "none") {
    if (!args.empty()) bad_rule("none takes no parameters");
    return none();
  }
  bad_rule("unknown filter rule '" + name + "'");
}

bool FilterRule::keeps(double ppl_f, double ppl_b) const {
  switch (kind_) {
    case RuleKind::kLowHigh:
    case RuleKind::kSymmetric:
      return ppl_f < p1_ && p1_ <= ppl_b;
    case RuleKind::kAsymmetric:
      return ppl_f < p1_ && ppl_b > p2_;
    case RuleKind::kRatio:
      return p1_ * ppl_f <= ppl_b;
    case RuleKind::kLowLow:
      return ppl_f < p1_ && ppl_b < p1_;
    case RuleKind::kHighHigh:
      return ppl_f >= p1_ && ppl_b >= p1_;
    case RuleKind::kNone:
      return true;
  }
  return false;
}

std::string FilterRule::discard_reason(double ppl_f, double ppl_b) const {
  if (keeps(ppl_f, ppl_b)) return "";
  auto two = [](bool f_bad, bool b_bad, const char* f, const char* b) -> std::string {
    if (f_bad && b_bad) return std::string(f) + "+" + b;
    return f_bad ? f : b;
  };
  switch (kind_) {
    case RuleKind::kLowHigh:
    case RuleKind::kSymmetric:
      return two(ppl_f >= p1_, ppl_b < p1_, "f_high", "b_low");
    case RuleKind::kAsymmetric:
      return two(ppl_f >= p1_, ppl_b <= p2_, "f_high", "b_low");
    case RuleKind::kRatio:
      return "ratio_low";
    case RuleKind::kLowLow:
      return two(ppl_f >= p1_, ppl_b >= p1_, "f_high", "b_high");
    case RuleKind::kHighHigh:
      return two(ppl_f < p1_, ppl_b < p1_, "f_low", "b_low");
    case RuleKind::kNone:
      break;
  }
  return "";
}

bool apply_filter(const FilterRule& rule, const ScoredPair& pair) {
  return rule.keeps(pair.ppl_f, pair.ppl_b);
}

void judge(const FilterRule& rule, ScoredPair& pair) {
  pair.kept = apply_filter(rule, pair);
  pair.rule = rule.id();
}

PairScore to_pair_score(const ScoredPair& pair) {
  PairScore s;
  s.ppl_f = pair.ppl_f;
  s.ppl_b = pair.ppl_b;
  s.margin = pair.margin;
  s.kept = pair.kept.value_or(false);
  s.rule = pair.rule;
  s.response_b = pair.response_b;
  return s;
}

Example to_example(const ScoredPair& pair, int iteration) {
  Example ex;
  ex.prompt = pair.prompt;
  ex.response = pair.response_f;
  ex.provenance = Provenance::kGenerated;
  ex.iteration = iteration;
  ex.score = to_pair_score(pair);
  return ex;
}

LocalSource::LocalSource(std::shared_ptr<const LanguageModel> model)
    : model_(std::move(model)) {
  if (!model_) throw std::invalid_argument("null model");
}

std::string LocalSource::respond(const std::string& prompt, const SamplingConfig& config,
                                 std::uint64_t seed) const {
  const auto& vocab = model_->vocabulary();
  const auto x = tokenize(prompt, vocab);
  return detokenize(sample(*model_, x.ids, config, seed), vocab);
}

double LocalSource::perplexity(const std::string& prompt,
                               const std::string& response) const {
  const auto& vocab = model_->vocabulary();
  const auto x = tokenize(prompt, vocab);
  const auto y = frame_response(response, vocab);
  return pplkd::perplexity(*model_, x.ids, y.ids);
}

RemoteSource::RemoteSource(std::shared_ptr<RemoteClient> client, int max_tokens)
    : client_(std::move(client)), max_tokens_(max_tokens) {
  if (!client_) throw std::invalid_argument("null client");
}

std::string RemoteSource::id() const {
  return "remote(" + client_->endpoint().model + ")";
}

std::string RemoteSource::respond(const std::string& prompt, const SamplingConfig& config,
                                  std::uint64_t /*seed*/) const {
  const double t = config.greedy ? 0.0 : config.temperature;
  return normalize_text(client_->generate(prompt, max_tokens_, t).text);
}

double RemoteSource::perplexity(const std::string& prompt,
                                const std::string& response) const {
  return client_->perplexity(prompt, response);
}

ScoredPair score_pair(const SourceModel& model_f, const SourceModel& model_b,
                      const std::string& prompt, const GenerationConfig& gen,
                      std::uint64_t seed) {
  if (gen.best_of < 1) throw std::invalid_argument("best_of must be >= 1");
  ScoredPair pair;
  pair.prompt = prompt;
  auto best = [&](const SourceModel& source, std::uint64_t stream,
                  std::string& response, double& ppl) {
    ppl = std::numeric_limits<double>::infinity();
    for (int k = 0; k < gen.best_of; ++k) {
      auto y = source.respond(prompt, gen.sampling, derive_seed(seed, stream, k));
      const double p = model_f.perplexity(prompt, y);
      if (k == 0 || p < ppl) {
        ppl = p;
        response = std::move(y);
      }
    }
  };
  best(model_f, 1, pair.response_f, pair.ppl_f);
  best(model_b, 2, pair.response_b, pair.ppl_b);
  pair.margin = margin(pair.ppl_f, pair.ppl_b);
  return pair;
}

ImplicationAudit& ImplicationAudit::global() {
  static ImplicationAudit audit;
  return audit;
}

bool ImplicationAudit::record(const FilterRule& rule, const ScoredPair& pair) {
  if (rule.kind() != RuleKind::kLowHigh && rule.kind() != RuleKind::kSymmetric) return true;
  if (!pair.kept.value_or(false)) return true;
  ++checked_;
  const double tau = rule.p1();
  const bool ok = pair.margin > 0.0 && pair.margin > std::log(tau / pair.ppl_f);
  if (!ok) ++violations_;
  return ok;
}

}  // namespace pplkd
