#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pplkd/analysis.hpp"
#include "pplkd/error.hpp"
#include "pplkd/fixture.hpp"
#include "pplkd/scoring.hpp"
#include "test_util.hpp"

using namespace pplkd;
using pplkd::test::small_vocab;

namespace {

ScoredPair pair_of(double f, double b) {
  ScoredPair p;
  p.prompt = "x";
  p.ppl_f = f;
  p.ppl_b = b;
  p.margin = margin(f, b);
  return p;
}

bool keeps(const FilterRule& r, double f, double b) { return apply_filter(r, pair_of(f, b)); }

struct FixtureModels {
  Fixture fx;
  std::shared_ptr<const Vocabulary> vocab;
  std::shared_ptr<const TabularModel> base;
  std::shared_ptr<const FineTunedModel> ft;
};

const FixtureModels& fixture_models() {
  static const FixtureModels m = [] {
    FixtureModels out;
    out.fx = make_two_domain_fixture();
    out.vocab = std::make_shared<const Vocabulary>(out.fx.vocabulary());
    out.base = std::make_shared<const TabularModel>(
        fit_tabular(pplkd::test::tokenize_all(out.fx.base_corpus, *out.vocab), out.vocab, 3, 0.1));
    out.ft = std::make_shared<const FineTunedModel>(
        apply_fine_tune(out.base, pplkd::test::tokenize_all(out.fx.ft_corpus, *out.vocab), 5.0));
    return out;
  }();
  return m;
}

}  // namespace

TEST(Perplexity, ClosedForms) {
  auto v = small_vocab(5);
  TabularModel uniform(v, CountTable(v->size(), 2), 1.0);
  EXPECT_NEAR(perplexity(uniform, {}, std::vector<TokenId>{3, 4, 5}),
              static_cast<double>(v->size()), 1e-9);
  auto det = fit_tabular(pplkd::test::tokenize_all({"t0 t1"}, *v), v, 3, 1e-300);
  EXPECT_NEAR(perplexity(det, {}, std::vector<TokenId>{3, 4, Vocabulary::kEos}), 1.0, 1e-12);
  try {
    perplexity(uniform, {}, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyResponse);
  }
}

TEST(Perplexity, FixtureInDomainResponseByHandCount) {
  const auto& m = fixture_models();
  const auto& ex = m.fx.heldout_in.front();
  const auto x = tokenize(ex.prompt, *m.vocab);
  const auto y = frame_response(ex.response, *m.vocab);
  // Walk the count tables directly instead of calling distribution().
  auto hand = [&](bool fine_tuned) {
    const auto& base = m.base->counts();
    const auto& delta = m.ft->delta().counts;
    const double V = static_cast<double>(m.vocab->size());
    std::vector<TokenId> h = x.ids;
    double ll = 0;
    for (TokenId t : y.ids) {
      const auto key = base.context_key(h);
      const auto* br = base.row(key);
      double num = 0.1 + (br ? static_cast<double>(br->count(t)) : 0.0);
      double den = 0.1 * V + (br ? static_cast<double>(br->total) : 0.0);
      if (fine_tuned) {
        if (const auto* dr = delta.row(key)) {
          num += 5.0 * static_cast<double>(dr->count(t));
          den += 5.0 * static_cast<double>(dr->total);
        }
      }
      ll += std::log(num / den);
      h.push_back(t);
    }
    return std::exp(-ll / static_cast<double>(y.size()));
  };
  const double pf = perplexity(*m.ft, x.ids, y.ids);
  const double pb = perplexity(*m.base, x.ids, y.ids);
  EXPECT_NEAR(pf, hand(true), 1e-12);
  EXPECT_NEAR(pb, hand(false), 1e-12);
  EXPECT_LT(pf, pb);
}

TEST(Margin, KnownValues) {
  EXPECT_EQ(margin(1.0, 1.0), 0.0);
  EXPECT_NEAR(margin(1.19, 4.22), std::log(4.22 / 1.19), 1e-15);
  EXPECT_NEAR(margin(1.19, 4.22), 1.266, 1e-3);
  EXPECT_LT(margin(2.01, 1.66), 0.0);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double a = 1 + static_cast<double>(rng() % 100000) / 1000.0;
    const double b = 1 + static_cast<double>(rng() % 100000) / 1000.0;
    EXPECT_EQ(margin(a, b), -margin(b, a));
  }
}

TEST(Filter, ReportedExamplePairs) {
  const auto r = FilterRule::low_high(1.5);
  EXPECT_TRUE(keeps(r, 1.19, 4.22));
  EXPECT_FALSE(keeps(r, 1.67, 1.68));
  EXPECT_FALSE(keeps(r, 2.01, 1.66));
}

TEST(Filter, Boundaries) {
  EXPECT_TRUE(keeps(FilterRule::ratio(1.5), 1.0, 1.5));
  EXPECT_FALSE(keeps(FilterRule::low_high(1.5), 1.5, 2.0));
  EXPECT_TRUE(keeps(FilterRule::low_high(1.5), 1.49, 1.5));
  EXPECT_FALSE(keeps(FilterRule::asymmetric(1.2, 1.6), 1.1, 1.6));
  EXPECT_TRUE(keeps(FilterRule::asymmetric(1.2, 1.6), 1.1, 1.61));
  EXPECT_FALSE(keeps(FilterRule::asymmetric(1.2, 1.6), 1.2, 5.0));
  EXPECT_TRUE(keeps(FilterRule::symmetric(1.3), 1.29, 1.3));
  EXPECT_TRUE(keeps(FilterRule::low_low(1.5), 1.49, 1.49));
  EXPECT_FALSE(keeps(FilterRule::low_low(1.5), 1.49, 1.5));
  EXPECT_TRUE(keeps(FilterRule::high_high(1.5), 1.5, 1.5));
  EXPECT_TRUE(keeps(FilterRule::none(), 100, 1));
}

TEST(Filter, InvalidParameters) {
  for (auto make : {+[] { return FilterRule::low_high(1.0); }, +[] { return FilterRule::low_low(0.5); },
                    +[] { return FilterRule::ratio(0.0); }, +[] { return FilterRule::ratio(-1.0); },
                    +[] { return FilterRule::asymmetric(1.7, 1.6); },
                    +[] { return FilterRule::asymmetric(1.0, 1.6); }}) {
    try {
      make();
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kInvalidRuleParameters);
    }
  }
  EXPECT_NO_THROW(FilterRule::asymmetric(1.6, 1.6));
}

TEST(Filter, ParseAndIds) {
  EXPECT_EQ(FilterRule::parse("low_high").id(), "low_high(1.5)");
  EXPECT_EQ(FilterRule::parse("symmetric").id(), "symmetric(1.3)");
  EXPECT_EQ(FilterRule::parse("asymmetric").id(), "asymmetric(1.2,1.6)");
  EXPECT_EQ(FilterRule::parse("ratio(2)").id(), "ratio(2)");
  EXPECT_EQ(FilterRule::parse("none").id(), "none");
  EXPECT_EQ(FilterRule::parse(" low_low( 1.25 ) ").id(), "low_low(1.25)");
  for (const auto& r : {FilterRule::low_high(1.7), FilterRule::asymmetric(1.1, 3.0),
                        FilterRule::high_high(2.5), FilterRule::ratio(0.75)}) {
    EXPECT_EQ(FilterRule::parse(r.id()), r);
  }
  for (const char* bad : {"", "median", "low_high(", "low_high(x)", "ratio(1,2)", "none(1)"}) {
    EXPECT_THROW(FilterRule::parse(bad), Error) << bad;
  }
}

TEST(Filter, ThresholdRulesPartitionThePlane) {
  std::mt19937_64 rng(2);
  for (double tau : {1.1, 1.5, 3.0}) {
    const auto lh = FilterRule::low_high(tau), ll = FilterRule::low_low(tau),
               hh = FilterRule::high_high(tau);
    for (int i = 0; i < 20000; ++i) {
      // Include exact threshold hits.
      const double f = (i % 50 == 0) ? tau : 1 + static_cast<double>(rng() % 4000) / 1000.0;
      const double b = (i % 70 == 0) ? tau : 1 + static_cast<double>(rng() % 4000) / 1000.0;
      const bool residual = f >= tau && b < tau;
      EXPECT_EQ(keeps(lh, f, b) + keeps(ll, f, b) + keeps(hh, f, b) + residual, 1) << f << " " << b;
    }
  }
}

TEST(Filter, DeterministicAndDiscardReasons) {
  const auto r = FilterRule::low_high(1.5);
  EXPECT_EQ(keeps(r, 1.2, 2.0), keeps(r, 1.2, 2.0));
  EXPECT_EQ(r.discard_reason(1.6, 2.0), "f_high");
  EXPECT_EQ(r.discard_reason(1.2, 1.4), "b_low");
  EXPECT_EQ(r.discard_reason(1.6, 1.4), "f_high+b_low");
  EXPECT_EQ(FilterRule::ratio(1.5).discard_reason(1.2, 1.3), "ratio_low");
}

TEST(Implication, HoldsOnKeptPairsAndAuditCounts) {
  std::mt19937_64 rng(3);
  ImplicationAudit audit;
  const auto r = FilterRule::low_high(1.5);
  for (int i = 0; i < 100000; ++i) {
    auto p = pair_of(1 + static_cast<double>(rng() % 100000) / 20000.0,
                     1 + static_cast<double>(rng() % 100000) / 20000.0 + 1e-9);
    judge(r, p);
    if (*p.kept) {
      EXPECT_GT(p.margin, 0.0);
      EXPECT_GT(p.margin, std::log(1.5 / p.ppl_f));
    }
    EXPECT_TRUE(audit.record(r, p));
  }
  EXPECT_GT(audit.checked(), 0u);
  EXPECT_EQ(audit.violations(), 0u);
}

TEST(Implication, BoundaryPairIsKeptWithEquality) {
  // ppl_b == tau passes the weak inequality, so the second strict bound
  // degenerates to equality and its verdict is down to rounding.
  ImplicationAudit audit;
  auto p = pair_of(1.2, 1.5);
  judge(FilterRule::low_high(1.5), p);
  EXPECT_TRUE(*p.kept);
  EXPECT_NEAR(p.margin, std::log(1.5 / 1.2), 1e-15);
  EXPECT_FALSE(p.margin > std::log(1.5 / 1.2) + 1e-15);
  audit.record(FilterRule::low_high(1.5), p);
  EXPECT_EQ(audit.checked(), 1u);
}

TEST(ScorePair, GreedyIdenticalModelsGiveZeroMargin) {
  const auto& m = fixture_models();
  LocalSource f(m.base), b(m.base);
  GenerationConfig gen;
  gen.sampling.greedy = true;
  for (const auto& prompt : m.fx.in_domain_probes) {
    const auto p = score_pair(f, b, prompt, gen, 5);
    EXPECT_EQ(p.response_f, p.response_b);
    EXPECT_EQ(p.margin, 0.0);
    EXPECT_FALSE(p.kept.has_value());
  }
}

TEST(ScorePair, LambdaZeroMarginMeanIsZeroWithinThreeSe) {
  const auto& m = fixture_models();
  auto same = std::make_shared<const FineTunedModel>(
      apply_fine_tune(m.base, pplkd::test::tokenize_all(m.fx.ft_corpus, *m.vocab), 0.0));
  LocalSource f(same), b(m.base);
  GenerationConfig gen;
  std::vector<std::string> prompts = m.fx.in_domain_probes;
  prompts.insert(prompts.end(), m.fx.out_of_domain_probes.begin(), m.fx.out_of_domain_probes.end());
  double sum = 0, sq = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const auto p = score_pair(f, b, prompts[static_cast<std::size_t>(i) % prompts.size()], gen,
                              static_cast<std::uint64_t>(1000 + i));
    sum += p.margin;
    sq += p.margin * p.margin;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / (n - 1));
  EXPECT_LT(std::abs(mean), 3 * se);
}

TEST(ScorePair, InDomainMeanMarginPositive) {
  const auto& m = fixture_models();
  LocalSource f(m.ft), b(m.base);
  GenerationConfig gen;
  double sum = 0;
  for (int i = 0; i < 500; ++i) {
    sum += score_pair(f, b, m.fx.in_domain_probes[static_cast<std::size_t>(i) % m.fx.in_domain_probes.size()],
                      gen, static_cast<std::uint64_t>(i))
               .margin;
  }
  EXPECT_GT(sum / 500, 0.0);
  // The exact fixed-length expectation agrees in sign.
  const auto x = tokenize(m.fx.in_domain_probes.front(), *m.vocab);
  EXPECT_GT(decompose_margin(*m.ft, *m.base, x.ids, 3).expected_margin, 0.0);
}

TEST(ScorePair, BestOfKeepsLowestPerplexity) {
  const auto& m = fixture_models();
  LocalSource f(m.ft), b(m.base);
  GenerationConfig one, four;
  four.best_of = 4;
  const auto& prompt = m.fx.in_domain_probes[3];
  const auto p1 = score_pair(f, b, prompt, one, 9);
  const auto p4 = score_pair(f, b, prompt, four, 9);
  // k = 0 draws are shared, so best-of can only improve.
  EXPECT_LE(p4.ppl_f, p1.ppl_f);
  EXPECT_LE(p4.ppl_b, p1.ppl_b);
  four.best_of = 0;
  EXPECT_THROW(score_pair(f, b, prompt, four, 9), std::invalid_argument);
}

TEST(ScorePair, BothResponsesScoredUnderFineTuned) {
  const auto& m = fixture_models();
  LocalSource f(m.ft), b(m.base);
  const auto p = score_pair(f, b, m.fx.in_domain_probes[0], GenerationConfig{}, 3);
  EXPECT_DOUBLE_EQ(p.ppl_b, f.perplexity(p.prompt, p.response_b));
  EXPECT_DOUBLE_EQ(p.ppl_f, f.perplexity(p.prompt, p.response_f));
  EXPECT_DOUBLE_EQ(p.margin, std::log(p.ppl_b) - std::log(p.ppl_f));
}

TEST(ScoredPair, ToExampleCarriesScore) {
  auto p = pair_of(1.19, 4.22);
  p.response_f = "rf";
  p.response_b = "rb";
  judge(FilterRule::low_high(1.5), p);
  const auto ex = to_example(p, 3);
  EXPECT_EQ(ex.provenance, Provenance::kGenerated);
  EXPECT_EQ(ex.iteration, 3);
  EXPECT_EQ(ex.response, "rf");
  ASSERT_TRUE(ex.score.has_value());
  EXPECT_TRUE(ex.score->kept);
  EXPECT_EQ(ex.score->rule, "low_high(1.5)");
  EXPECT_EQ(ex.score->response_b, "rb");
}
