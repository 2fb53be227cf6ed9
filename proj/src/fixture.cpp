#include "pplkd/fixture.hpp"

#include <fstream>
#include <random>
#include <stdexcept>

#include "pplkd/error.hpp"
#include "pplkd/lm.hpp"

namespace pplkd {

namespace {

struct ClassChain {
  const char* name;
  const char* verb;
  const char* object;
};

constexpr ClassChain kClasses[] = {
    {"bird", "sings", "loudly"}, {"fish", "swims", "deep"},   {"tree", "grows", "tall"},
    {"stone", "rests", "still"}, {"star", "shines", "bright"}, {"river", "flows", "east"},
};
constexpr int kClassCount = 6;

constexpr const char* kSpecialized[] = {
    "zarvel", "quintor", "mobrik", "felgan", "tovish", "drumel", "yorrin",
    "plaxo",  "venkit",  "halbry", "orsune", "gimmet", "trevok", "nalda",
    "wispen", "corvax",  "jubelo", "saphet", "riknor", "ulmaze",
};

struct PublicEntity {
  const char* name;
  int klass;
};
constexpr PublicEntity kPublic[] = {
    {"robin", 0}, {"salmon", 1}, {"oak", 2}, {"granite", 3},
    {"sun", 4},   {"nile", 5},   {"eagle", 0}, {"pine", 2},
};

struct Pair {
  const char* a;
  const char* b;
};
constexpr Pair kColors[] = {
    {"sky", "blue"},  {"grass", "green"}, {"snow", "white"},  {"coal", "black"},
    {"blood", "red"}, {"cloud", "white"}, {"leaf", "green"},  {"night", "black"},
};
constexpr Pair kOpposites[] = {
    {"hot", "cold"},  {"up", "down"},     {"big", "small"},
    {"fast", "slow"}, {"early", "late"},  {"open", "closed"},
};

constexpr const char* kOpeners[] = {"please", "now", "kindly", "hey", "ok", "so"};
constexpr const char* kEntityTemplates[] = {"tell me about", "describe", "what is"};
constexpr const char* kHeldoutTemplate = "explain";

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double unit() { return uniform01(rng_); }
  int below(int n) { return std::min(n - 1, static_cast<int>(unit() * n)); }

  std::string opener() {
    const double u = unit();
    if (u < 0.5) return "";
    std::string out = kOpeners[below(6)];
    if (u >= 0.75) out += std::string(" ") + kOpeners[below(6)];
    return out + " ";
  }

  std::string entity_prompt(const std::string& entity, int templates = 3) {
    const int k = below(templates);
    const char* t = k < 3 ? kEntityTemplates[k] : kHeldoutTemplate;
    return opener() + t + " " + entity + " :";
  }

  std::string generic_prompt(std::string& answer) {
    if (unit() < 0.5) {
      const auto& c = kColors[below(8)];
      answer = c.b;
      return opener() + "what color is the " + c.a + " :";
    }
    const auto& o = kOpposites[below(6)];
    const bool flip = unit() < 0.5;
    answer = flip ? o.a : o.b;
    return opener() + "opposite of " + (flip ? o.b : o.a) + " :";
  }

  // The true class with probability `accuracy`, else a uniformly wrong one.
  int noisy_class(int truth, double accuracy) {
    if (unit() < accuracy) return truth;
    const int k = below(kClassCount - 1);
    return k >= truth ? k + 1 : k;
  }

 private:
  std::mt19937_64 rng_;
};

std::string chain(int klass) {
  const auto& c = kClasses[klass];
  return std::string(c.name) + " " + c.verb + " " + c.object;
}

Example fact(const std::string& prompt, const std::string& response) {
  Example ex;
  ex.prompt = prompt;
  ex.response = response;
  return ex;
}

void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

void write_examples(const std::vector<Example>& examples, const std::filesystem::path& path) {
  Dataset ds;
  for (const auto& ex : examples) ds.add(ex);
  save_dataset(ds, path);
}

}  // namespace

Vocabulary Fixture::vocabulary() const {
  std::vector<std::string> texts;
  for (const auto* c : {&base_corpus, &ft_corpus, &target_corpus, &prompt_corpus}) {
    texts.insert(texts.end(), c->begin(), c->end());
  }
  for (const auto& ex : seeds) texts.push_back(ex.prompt + " " + ex.response);
  return build_vocabulary(texts, 1'000'000);
}

Fixture make_two_domain_fixture(const FixtureParams& p) {
  if (p.specialized_entities < 1 || p.specialized_entities > 20 || p.public_entities < 0 ||
      p.public_entities > 8 || p.seed_examples < 1 || p.seed_examples > p.specialized_entities) {
    throw std::invalid_argument("fixture parameters out of range");
  }
  Gen g(p.seed);
  Fixture fx;

  std::vector<int> truth(static_cast<std::size_t>(p.specialized_entities));
  for (int i = 0; i < p.specialized_entities; ++i) truth[static_cast<std::size_t>(i)] = g.below(kClassCount);

  auto generic_lines = [&](std::vector<std::string>& out, int repeats) {
    const int facts = 8 + 12;
    for (int i = 0; i < facts * repeats; ++i) {
      std::string answer;
      const auto prompt = g.generic_prompt(answer);
      out.push_back(prompt + " " + answer);
    }
  };
  auto public_lines = [&](std::vector<std::string>& out, int repeats, double accuracy) {
    for (int e = 0; e < p.public_entities; ++e) {
      for (int r = 0; r < repeats; ++r) {
        out.push_back(g.entity_prompt(kPublic[e].name) + " " +
                      chain(g.noisy_class(kPublic[e].klass, accuracy)));
      }
    }
  };
  auto specialized_lines = [&](std::vector<std::string>& out, int repeats, double accuracy) {
    for (int e = 0; e < p.specialized_entities; ++e) {
      for (int r = 0; r < repeats; ++r) {
        out.push_back(g.entity_prompt(kSpecialized[e]) + " " +
                      chain(g.noisy_class(truth[static_cast<std::size_t>(e)], accuracy)));
      }
    }
  };

  generic_lines(fx.base_corpus, p.generic_repeats);
  public_lines(fx.base_corpus, p.base_public_repeats, p.base_public_accuracy);
  specialized_lines(fx.base_corpus, p.base_specialized_repeats, p.base_specialized_accuracy);

  specialized_lines(fx.ft_corpus, p.ft_repeats, 1.0);

  generic_lines(fx.target_corpus, p.generic_repeats);
  public_lines(fx.target_corpus, p.target_public_repeats, p.target_public_accuracy);

  for (int r = 0; r < p.prompt_repeats; ++r) {
    for (int e = 0; e < p.specialized_entities; ++e) fx.prompt_corpus.push_back(g.entity_prompt(kSpecialized[e], 4));
    for (int e = 0; e < p.public_entities; ++e) fx.prompt_corpus.push_back(g.entity_prompt(kPublic[e].name, 4));
    for (int i = 0; i < p.prompt_generic; ++i) {
      std::string answer;
      fx.prompt_corpus.push_back(g.generic_prompt(answer));
    }
  }

  for (int e = 0; e < p.seed_examples; ++e) {
    Example ex;
    ex.prompt = std::string(kEntityTemplates[e % 3]) + " " + kSpecialized[e] + " :";
    ex.response = chain(truth[static_cast<std::size_t>(e)]);
    fx.seeds.push_back(std::move(ex));
  }

  for (int e = 0; e < p.specialized_entities; ++e) {
    const std::string entity = kSpecialized[e];
    const std::string response = chain(truth[static_cast<std::size_t>(e)]);
    fx.in_domain_probes.push_back(std::string(kHeldoutTemplate) + " " + entity + " :");
    for (const char* lead : {"", "please ", "now "}) {
      Example ex;
      ex.prompt = lead + std::string(kHeldoutTemplate) + " " + entity + " :";
      ex.response = response;
      fx.heldout_in.push_back(std::move(ex));
    }
  }
  for (const auto& c : kColors) {
    fx.out_of_domain_probes.push_back(std::string("what color is the ") + c.a + " :");
    fx.heldout_out.push_back(fact(fx.out_of_domain_probes.back(), c.b));
  }
  for (const auto& o : kOpposites) {
    fx.out_of_domain_probes.push_back(std::string("opposite of ") + o.a + " :");
    fx.heldout_out.push_back(fact(fx.out_of_domain_probes.back(), o.b));
  }
  return fx;
}

void write_fixture(const Fixture& fx, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_lines(fx.base_corpus, dir / "base.txt");
  write_lines(fx.ft_corpus, dir / "ft.txt");
  write_lines(fx.target_corpus, dir / "target.txt");
  write_lines(fx.prompt_corpus, dir / "prompts.txt");
  write_lines(fx.in_domain_probes, dir / "probes_in.txt");
  write_lines(fx.out_of_domain_probes, dir / "probes_out.txt");
  write_examples(fx.seeds, dir / "seeds.jsonl");
  write_examples(fx.heldout_in, dir / "heldout_in.jsonl");
  write_examples(fx.heldout_out, dir / "heldout_out.jsonl");
}

}  // namespace pplkd
