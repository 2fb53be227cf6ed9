#include <gtest/gtest.h>

#include <set>

#include "pplkd/analysis.hpp"
#include "pplkd/error.hpp"
#include "pplkd/fixture.hpp"
#include "pplkd/remote.hpp"
#include "pplkd/synthgen.hpp"
#include "remote_mock.hpp"
#include "test_util.hpp"

using namespace pplkd;
using pplkd::test::MockServer;

namespace {

Example seed(const std::string& p, const std::string& r) {
  Example ex;
  ex.prompt = p;
  ex.response = r;
  return ex;
}

Example kept(const std::string& p, int it) {
  Example ex = seed(p, "r");
  ex.provenance = Provenance::kGenerated;
  ex.iteration = it;
  PairScore s;
  s.kept = true;
  s.rule = "none";
  ex.score = s;
  return ex;
}

std::vector<Example> five_seeds() {
  return {seed("what is 1 + 2", "3"), seed("what is 2 + 2", "4"), seed("what is 3 + 1", "4"),
          seed("what is 5 + 2", "7"), seed("what is 4 + 4", "8")};
}

struct World {
  Fixture fx;
  std::shared_ptr<const Vocabulary> vocab;
  std::shared_ptr<const TabularModel> base;
  std::shared_ptr<const FineTunedModel> ft;
  std::shared_ptr<const TabularModel> prompts;
};

const World& world() {
  static const World w = [] {
    World o;
    o.fx = make_two_domain_fixture();
    o.vocab = std::make_shared<const Vocabulary>(o.fx.vocabulary());
    o.base = std::make_shared<const TabularModel>(
        fit_tabular(pplkd::test::tokenize_all(o.fx.base_corpus, *o.vocab), o.vocab, 3, 0.1));
    o.ft = std::make_shared<const FineTunedModel>(
        apply_fine_tune(o.base, pplkd::test::tokenize_all(o.fx.ft_corpus, *o.vocab), 5.0));
    o.prompts = std::make_shared<const TabularModel>(
        fit_tabular(pplkd::test::tokenize_all(o.fx.prompt_corpus, *o.vocab), o.vocab, 3, 0.01));
    return o;
  }();
  return w;
}

PrefixResampleGenerator fixture_generator() {
  PrefixResampleOptions opts;
  opts.background = world().prompts;
  return PrefixResampleGenerator(world().vocab, StrategyConfig{}, opts);
}

}  // namespace

TEST(Pool, SeedsAndGrowth) {
  EXPECT_THROW(GenerationPool({}), Error);
  auto bad = five_seeds();
  bad[0].provenance = Provenance::kGenerated;
  EXPECT_THROW(GenerationPool{bad}, std::invalid_argument);
  GenerationPool pool(five_seeds());
  EXPECT_EQ(pool.seed_count(), 5u);
  EXPECT_TRUE(pool.contains_prompt("what  is 1 + 2 "));
  EXPECT_THROW(pool.add(seed("x", "y")), std::invalid_argument);
  auto rejected = kept("x", 1);
  rejected.score->kept = false;
  EXPECT_THROW(pool.add(rejected), std::invalid_argument);
  pool.add(kept("x", 1));
  EXPECT_EQ(pool.size(), 6u);
}

TEST(Template, VerbatimHeaderAndDemonstrations) {
  const auto seeds = five_seeds();
  std::vector<const Example*> demos;
  for (const auto& s : seeds) demos.push_back(&s);
  const auto t = format_template(demos, 20, true);
  EXPECT_EQ(t.rfind("Generate 20 more samples like these 5:\n", 0), 0u);
  EXPECT_NE(t.find("1. Prompt: what is 1 + 2\n   Response: 3\n"), std::string::npos);
  const auto bare = format_template(demos, 20, false);
  EXPECT_NE(bare.find("5. what is 4 + 4\n"), std::string::npos);
  EXPECT_EQ(bare.find("Response"), std::string::npos);
}

TEST(Demonstrations, DistinctAndBounded) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto d = sample_demonstrations(12, 5, s);
    EXPECT_EQ(d.size(), 5u);
    EXPECT_EQ(std::set<std::size_t>(d.begin(), d.end()).size(), 5u);
    for (auto i : d) EXPECT_LT(i, 12u);
  }
  EXPECT_EQ(sample_demonstrations(3, 5, 1).size(), 3u);
  EXPECT_EQ(sample_demonstrations(12, 5, 7), sample_demonstrations(12, 5, 7));
}

TEST(Parse, NumberedListDropsAnswers) {
  std::vector<std::string> prompts;
  for (int i = 0; i < 20; ++i) prompts.push_back("question number " + std::to_string(i));
  const auto out = parse_generated_prompts(pplkd::test::numbered_list(prompts));
  EXPECT_EQ(out, prompts);
  for (const auto& p : out) EXPECT_EQ(p.find("answer"), std::string::npos);
}

TEST(Parse, DelimitersLabelsAndFallback) {
  EXPECT_EQ(parse_generated_prompts("1) first one\n2: second\n3. Question: third? Answer: 42"),
            (std::vector<std::string>{"first one", "second", "third?"}));
  EXPECT_EQ(parse_generated_prompts("1. a multi\n   line prompt\n2. next A: no"),
            (std::vector<std::string>{"a multi line prompt", "next"}));
  EXPECT_EQ(parse_generated_prompts("alpha prompt\nstill alpha\n\nbeta prompt\nSolution: x"),
            (std::vector<std::string>{"alpha prompt still alpha", "beta prompt"}));
  // "answer" inside a word or without the colon survives.
  EXPECT_EQ(parse_generated_prompts("1. what is the answering machine"),
            (std::vector<std::string>{"what is the answering machine"}));
  try {
    parse_generated_prompts("   \n\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParseFailure);
  }
  EXPECT_THROW(parse_generated_prompts("1. Answer: only an answer"), Error);
}

TEST(Dedup, AgainstPoolAndBatch) {
  GenerationPool pool(five_seeds());
  std::vector<std::string> cands;
  for (int i = 0; i < 17; ++i) cands.push_back("fresh prompt " + std::to_string(i));
  cands.push_back("what is 1 + 2");
  cands.push_back("what is 2 + 2");
  cands.push_back(" what is 3   + 1");
  const auto b = dedup_prompts(cands, pool);
  EXPECT_EQ(b.prompts.size(), 17u);
  EXPECT_EQ(b.proposed, 20u);
  EXPECT_EQ(b.duplicates, 3u);
  EXPECT_EQ(dedup_prompts({"a", "a", " a ", ""}, pool).prompts.size(), 1u);
}

TEST(TemplateGenerator, MockEndpointTwentyPromptsNoResponses) {
  std::vector<std::string> prompts;
  for (int i = 0; i < 20; ++i) prompts.push_back("new task " + std::to_string(i));
  prompts[4] = "what is 1 + 2";
  prompts[9] = "what is 5 + 2";
  prompts[15] = "what is 4 + 4";
  std::string seen;
  MockServer server([&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body)["prompt"];
    res.set_content(pplkd::test::text_body(pplkd::test::numbered_list(prompts)), "application/json");
  });
  RemoteEndpoint ep;
  ep.base_url = server.base_url();
  ClientOptions opts;
  opts.sleep = [](double) {};
  TemplateGenerator gen(std::make_shared<RemoteClient>(ep, opts), StrategyConfig{});
  GenerationPool pool(five_seeds());
  const auto raw = gen.propose(pool, 1);
  EXPECT_EQ(raw.size(), 20u);
  EXPECT_EQ(seen.rfind("Generate 20 more samples like these 5:", 0), 0u);
  const auto out = generate_prompts(gen, pool, 1);
  EXPECT_EQ(out.size(), 17u);
  for (const auto& p : out) EXPECT_EQ(p.find("answer"), std::string::npos);
}

TEST(PrefixResample, InVocabularyAndMoreDiverseThanCopies) {
  auto gen = fixture_generator();
  std::vector<Example> seeds = world().fx.seeds;
  GenerationPool pool(seeds);
  std::vector<std::string> outs;
  for (std::uint64_t s = 0; outs.size() < 200; ++s) {
    for (auto& p : gen.propose(pool, s)) {
      for (auto tok : split_whitespace(p)) {
        const auto id = world().vocab->find(tok);
        ASSERT_TRUE(id.has_value()) << tok;
        EXPECT_GE(*id, static_cast<TokenId>(Vocabulary::kSpecialCount));
      }
      outs.push_back(p);
      if (outs.size() == 200) break;
    }
  }
  double best_single = 0;
  for (const auto& s : seeds) {
    best_single = std::max(best_single, distinct_n(std::vector<std::string>(200, s.prompt), 1));
  }
  EXPECT_GT(distinct_n(outs, 1), best_single);
}

TEST(PrefixResample, PoolOnlyModelWithoutBackground) {
  PrefixResampleGenerator gen(world().vocab, StrategyConfig{});
  GenerationPool pool(world().fx.seeds);
  const auto model = gen.prompt_model(pool);
  // Pool prompts themselves are the most likely continuations.
  const auto x = tokenize(world().fx.seeds[0].prompt, *world().vocab);
  const auto d = model->next_token_distribution(std::span<const TokenId>(x.ids).first(1));
  EXPECT_EQ(std::max_element(d.begin(), d.end()) - d.begin(), x.ids[1]);
  EXPECT_EQ(gen.propose(pool, 3), gen.propose(pool, 3));
}

TEST(Iteration, RuleNoneKeepsEverythingGenerated) {
  auto gen = fixture_generator();
  GenerationPool pool(world().fx.seeds);
  LocalSource f(world().ft), b(world().base);
  const auto r = run_iteration(pool, gen, f, b, FilterRule::none(), GenerationConfig{}, 4);
  EXPECT_GT(r.stats.generated, 0u);
  EXPECT_EQ(r.stats.kept, r.stats.generated);
  EXPECT_EQ(r.kept.size(), r.stats.generated);
  EXPECT_EQ(pool.size(), world().fx.seeds.size() + r.kept.size());
  for (const auto& ex : r.kept) {
    EXPECT_EQ(ex.iteration, 1);
    EXPECT_EQ(ex.provenance, Provenance::kGenerated);
  }
}

TEST(Iteration, NearOneThresholdKeepsAlmostNothing) {
  auto gen = fixture_generator();
  GenerationPool pool(world().fx.seeds);
  LocalSource f(world().ft), b(world().base);
  std::size_t kept_n = 0, generated = 0;
  for (int i = 0; i < 5; ++i) {
    const auto r = run_iteration(pool, gen, f, b, FilterRule::low_high(1 + 1e-9), GenerationConfig{},
                                 static_cast<std::uint64_t>(i));
    kept_n += r.stats.kept;
    generated += r.stats.generated;
    EXPECT_EQ(r.stats.kept + r.stats.discarded, r.stats.generated);
  }
  EXPECT_GT(generated, 20u);
  EXPECT_EQ(kept_n, 0u);
}

TEST(Iteration, WorkerCountDoesNotChangeResults) {
  LocalSource f(world().ft), b(world().base);
  auto run = [&](int workers) {
    auto gen = fixture_generator();
    GenerationPool pool(world().fx.seeds);
    BuildConfig cfg;
    cfg.target_size = 40;
    cfg.seed = 11;
    cfg.workers = workers;
    return build_dataset(pool, gen, f, b, FilterRule::low_high(), cfg).dataset;
  };
  EXPECT_EQ(run(1), run(3));
}

TEST(Build, TargetOneWithRuleNone) {
  auto gen = fixture_generator();
  GenerationPool pool(world().fx.seeds);
  LocalSource f(world().ft), b(world().base);
  BuildConfig cfg;
  cfg.target_size = 1;
  const auto r = build_dataset(pool, gen, f, b, FilterRule::none(), cfg);
  EXPECT_FALSE(r.budget_exhausted);
  EXPECT_EQ(r.iterations.size(), 1u);
  const auto syn = synthetic_only(r.dataset);
  ASSERT_EQ(syn.size(), 1u);
  EXPECT_EQ(syn.examples()[0].iteration, 1);
}

TEST(Build, ImpossibleRuleExhaustsBudget) {
  auto gen = fixture_generator();
  GenerationPool pool(world().fx.seeds);
  LocalSource f(world().ft), b(world().base);
  BuildConfig cfg;
  cfg.target_size = 10;
  cfg.max_iterations = 5;
  const auto r = build_dataset(pool, gen, f, b, FilterRule::asymmetric(1.001, 1e6), cfg);
  EXPECT_TRUE(r.budget_exhausted);
  EXPECT_EQ(r.kept_total, 0u);
  EXPECT_EQ(synthetic_only(r.dataset).size(), 0u);
  EXPECT_EQ(r.iterations.size(), 5u);
  EXPECT_GT(r.discards.size(), 0u);
  EXPECT_TRUE(r.dataset.manifest().meta["budget_exhausted"].get<bool>());
}

TEST(Build, ExactSizeProvenanceAndMonotonePool) {
  auto gen = fixture_generator();
  GenerationPool pool(world().fx.seeds);
  LocalSource f(world().ft), b(world().base);
  BuildConfig cfg;
  cfg.target_size = 60;
  cfg.seed = 2;
  const auto rule = FilterRule::low_high();
  const auto r = build_dataset(pool, gen, f, b, rule, cfg);
  ASSERT_FALSE(r.budget_exhausted);
  EXPECT_EQ(r.dataset.manifest().generated_count, 60u);
  EXPECT_GE(r.kept_total, 60u);
  std::size_t total_kept = 0;
  for (const auto& s : r.iterations) total_kept += s.kept;
  EXPECT_EQ(total_kept, r.kept_total);
  int last_it = 0;
  for (const auto& ex : r.dataset.examples()) {
    if (ex.iteration == 0) {
      EXPECT_EQ(ex.provenance, Provenance::kSeed);
      continue;
    }
    EXPECT_EQ(ex.provenance, Provenance::kGenerated);
    ASSERT_TRUE(ex.score.has_value());
    EXPECT_TRUE(ex.score->kept);
    EXPECT_TRUE(rule.keeps(ex.score->ppl_f, ex.score->ppl_b));
    EXPECT_GE(ex.iteration, last_it);
    last_it = ex.iteration;
  }
  for (const auto& ex : r.discards.examples()) {
    ASSERT_TRUE(ex.score.has_value());
    EXPECT_FALSE(ex.score->kept);
    EXPECT_FALSE(rule.keeps(ex.score->ppl_f, ex.score->ppl_b));
  }
  EXPECT_EQ(pool.size(), world().fx.seeds.size() + r.kept_total);
}

TEST(Build, SameSeedSameDataset) {
  LocalSource f(world().ft), b(world().base);
  auto run = [&](std::uint64_t seed) {
    auto gen = fixture_generator();
    GenerationPool pool(world().fx.seeds);
    BuildConfig cfg;
    cfg.target_size = 30;
    cfg.seed = seed;
    return build_dataset(pool, gen, f, b, FilterRule::low_high(), cfg).dataset;
  };
  EXPECT_EQ(run(42), run(42));
  EXPECT_NE(run(42), run(43));
}
