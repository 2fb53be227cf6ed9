#include "pplkd/synthgen.hpp"

#include <algorithm>
#include <cctype>
#include <random>
#include <regex>
#include <sstream>

#include "pplkd/error.hpp"
#include "pplkd/hash.hpp"
#include "pplkd/parallel.hpp"
#include "pplkd/remote.hpp"

namespace pplkd {

GenerationPool::GenerationPool(std::vector<Example> seeds) {
  if (seeds.empty()) throw Error(ErrorCode::kEmptyDataset, "generation pool needs seeds");
  for (auto& s : seeds) {
    if (s.provenance != Provenance::kSeed || s.iteration != 0) {
      throw std::invalid_argument("pool seeds must be iteration-0 seed examples");
    }
    prompts_.insert(normalize_text(s.prompt));
    examples_.push_back(std::move(s));
  }
  seed_count_ = examples_.size();
}

void GenerationPool::add(Example example) {
  if (example.provenance != Provenance::kGenerated || example.iteration < 1 ||
      !example.score || !example.score->kept) {
    throw std::invalid_argument("only kept generated examples may join the pool");
  }
  prompts_.insert(normalize_text(example.prompt));
  examples_.push_back(std::move(example));
}

bool GenerationPool::contains_prompt(const std::string& prompt) const {
  return prompts_.count(normalize_text(prompt)) > 0;
}

PromptGenerator::PromptGenerator(StrategyConfig config) : config_(config) {
  if (config_.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (config_.demonstrations < 1) throw std::invalid_argument("need >= 1 demonstration");
}

std::vector<std::size_t> sample_demonstrations(std::size_t pool_size, int k,
                                               std::uint64_t seed) {
  std::vector<std::size_t> idx(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) idx[i] = i;
  const std::size_t take = std::min<std::size_t>(pool_size, static_cast<std::size_t>(std::max(k, 0)));
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t span = pool_size - i;
    const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(span));
    std::swap(idx[i], idx[std::min(j, pool_size - 1)]);
  }
  idx.resize(take);
  return idx;
}

std::string format_template(const std::vector<const Example*>& demos, int batch_size,
                            bool include_responses) {
  std::ostringstream os;
  os << "Generate " << batch_size << " more samples like these " << demos.size() << ":\n";
  for (std::size_t i = 0; i < demos.size(); ++i) {
    if (include_responses) {
      os << (i + 1) << ". Prompt: " << demos[i]->prompt << "\n   Response: "
         << demos[i]->response << '\n';
    } else {
      os << (i + 1) << ". " << demos[i]->prompt << '\n';
    }
  }
  return os.str();
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool boundary_before(const std::string& s, std::size_t pos) {
  return pos == 0 || std::isspace(static_cast<unsigned char>(s[pos - 1]));
}

// Removes everything from the first answer marker on.
std::string cut_answer(const std::string& item) {
  static const char* kMarkers[] = {"answer:", "response:", "output:", "solution:"};
  const std::string low = lower(item);
  std::size_t cut = std::string::npos;
  for (const char* m : kMarkers) {
    for (auto p = low.find(m); p != std::string::npos; p = low.find(m, p + 1)) {
      if (boundary_before(low, p)) {
        cut = std::min(cut, p);
        break;
      }
    }
  }
  for (auto p = item.find("A:"); p != std::string::npos; p = item.find("A:", p + 1)) {
    if (boundary_before(item, p)) {
      cut = std::min(cut, p);
      break;
    }
  }
  return cut == std::string::npos ? item : item.substr(0, cut);
}

std::string strip_label(std::string item) {
  static const char* kLabels[] = {"prompt:", "question:", "q:", "input:", "instruction:"};
  const std::string low = lower(item);
  for (const char* l : kLabels) {
    const std::string_view lv(l);
    if (low.rfind(lv, 0) == 0) return item.substr(lv.size());
  }
  return item;
}

std::string clean_item(const std::string& raw) {
  return normalize_text(strip_label(normalize_text(cut_answer(normalize_text(raw)))));
}

}  // namespace

std::vector<std::string> parse_generated_prompts(const std::string& text) {
  static const std::regex kItem(R"(^\s*\d+\s*[.):]\s*(.*)$)");
  std::vector<std::string> items;
  std::vector<std::string> lines;
  {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  }

  std::string current;
  bool in_item = false;
  for (const auto& line : lines) {
    std::smatch m;
    if (std::regex_match(line, m, kItem)) {
      if (in_item) items.push_back(current);
      current = m[1].str();
      in_item = true;
    } else if (in_item) {
      current += ' ';
      current += line;
    }
  }
  if (in_item) items.push_back(current);

  if (items.empty()) {
    std::string block;
    for (const auto& line : lines) {
      if (normalize_text(line).empty()) {
        if (!block.empty()) items.push_back(block);
        block.clear();
      } else {
        block += ' ';
        block += line;
      }
    }
    if (!block.empty()) items.push_back(block);
  }

  std::vector<std::string> out;
  for (const auto& it : items) {
    auto cleaned = clean_item(it);
    if (!cleaned.empty()) out.push_back(std::move(cleaned));
  }
  if (out.empty()) {
    throw Error(ErrorCode::kParseFailure, "no prompts found in generator output: " +
                                              text.substr(0, std::min<std::size_t>(text.size(), 200)));
  }
  return out;
}

TemplateGenerator::TemplateGenerator(std::shared_ptr<RemoteClient> client,
                                     StrategyConfig config, int max_tokens,
                                     double temperature)
    : PromptGenerator(config),
      client_(std::move(client)),
      max_tokens_(max_tokens),
      temperature_(temperature) {
  if (!client_) throw std::invalid_argument("null client");
}

std::vector<std::string> TemplateGenerator::propose(const GenerationPool& pool,
                                                    std::uint64_t seed) {
  std::vector<const Example*> demos;
  for (auto i : sample_demonstrations(pool.size(), config_.demonstrations, seed)) {
    demos.push_back(&pool.examples()[i]);
  }
  const auto request = format_template(demos, config_.batch_size, config_.include_responses);
  const auto completion = client_->generate(request, max_tokens_, temperature_);
  // Only prompts survive; any answers the generator wrote are discarded.
  return parse_generated_prompts(completion.text);
}

PrefixResampleGenerator::PrefixResampleGenerator(std::shared_ptr<const Vocabulary> vocab,
                                                 StrategyConfig config,
                                                 PrefixResampleOptions options)
    : PromptGenerator(config), vocab_(std::move(vocab)), options_(std::move(options)) {
  if (!vocab_) throw std::invalid_argument("null vocabulary");
  if (options_.background) {
    if (!(options_.background->vocabulary() == *vocab_)) {
      throw Error(ErrorCode::kVocabularyMismatch, "prompt background uses another vocabulary");
    }
    options_.order = options_.background->order();
  }
  if (options_.max_len < 1) throw std::invalid_argument("max_len must be >= 1");
}

std::shared_ptr<const LanguageModel> PrefixResampleGenerator::prompt_model(
    const GenerationPool& pool) const {
  std::vector<TokenSequence> prompts;
  prompts.reserve(pool.size());
  for (const auto& ex : pool.examples()) prompts.push_back(tokenize(ex.prompt, *vocab_));
  if (options_.background) {
    auto counts = count_sequences(prompts, *vocab_, options_.order);
    return std::make_shared<FineTunedModel>(
        options_.background, FineTuneDelta{std::move(counts), options_.pool_weight});
  }
  return std::make_shared<TabularModel>(fit_tabular(prompts, vocab_, options_.order, options_.alpha));
}

std::vector<std::string> PrefixResampleGenerator::propose(const GenerationPool& pool,
                                                          std::uint64_t seed) {
  const auto model = prompt_model(pool);
  std::mt19937_64 rng(seed);
  SamplingConfig sc;
  sc.max_len = options_.max_len;
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(config_.batch_size));
  for (int i = 0; i < config_.batch_size; ++i) {
    const auto pick = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(pool.size()));
    const auto& demo = pool.examples()[std::min(pick, pool.size() - 1)];
    auto ids = tokenize(demo.prompt, *vocab_).ids;
    const std::size_t keep =
        ids.empty() ? 0 : static_cast<std::size_t>(uniform01(rng) * static_cast<double>(ids.size()));
    ids.resize(keep);
    auto tail = sample(*model, ids, sc, rng());
    // Smoothing gives <s> and <unk> some mass; they are not prompt text.
    for (auto id : tail.ids) {
      if (id == Vocabulary::kEos) break;
      if (id >= static_cast<TokenId>(Vocabulary::kSpecialCount)) ids.push_back(id);
    }
    TokenSequence seq{std::move(ids), vocab_->fingerprint()};
    out.push_back(detokenize(seq, *vocab_));
  }
  return out;
}

PromptBatch dedup_prompts(const std::vector<std::string>& candidates,
                          const GenerationPool& pool) {
  PromptBatch batch;
  batch.proposed = candidates.size();
  std::unordered_set<std::string> seen;
  for (const auto& c : candidates) {
    auto p = normalize_text(c);
    if (p.empty() || pool.contains_prompt(p) || !seen.insert(p).second) {
      ++batch.duplicates;
      continue;
    }
    batch.prompts.push_back(std::move(p));
  }
  return batch;
}

std::vector<std::string> generate_prompts(PromptGenerator& generator,
                                          const GenerationPool& pool, std::uint64_t seed) {
  return dedup_prompts(generator.propose(pool, seed), pool).prompts;
}

nlohmann::ordered_json IterationStats::to_json() const {
  nlohmann::ordered_json reasons = nlohmann::ordered_json::object();
  for (const auto& [k, v] : discard_reasons) reasons[k] = v;
  return {{"iteration", iteration},
          {"proposed", proposed},
          {"duplicates", duplicates},
          {"generated", generated},
          {"kept", kept},
          {"discarded", discarded},
          {"discard_reasons", reasons},
          {"implication_violations", implication_violations}};
}

IterationResult run_iteration(GenerationPool& pool, PromptGenerator& generator,
                              const SourceModel& model_f, const SourceModel& model_b,
                              const FilterRule& rule, const GenerationConfig& gen,
                              std::uint64_t seed, int workers) {
  const int iteration = pool.iteration() + 1;
  IterationResult result;
  result.stats.iteration = iteration;

  const auto batch = dedup_prompts(
      generator.propose(pool, derive_seed(seed, static_cast<std::uint64_t>(iteration), 0)), pool);
  result.stats.proposed = batch.proposed;
  result.stats.duplicates = batch.duplicates;
  result.stats.generated = batch.prompts.size();

  std::vector<ScoredPair> pairs(batch.prompts.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) {
    pairs[i] = score_pair(model_f, model_b, batch.prompts[i], gen,
                          derive_seed(seed, static_cast<std::uint64_t>(iteration), i + 1));
  });

  auto& audit = ImplicationAudit::global();
  for (auto& pair : pairs) {
    judge(rule, pair);
    if (!audit.record(rule, pair)) ++result.stats.implication_violations;
    auto ex = to_example(pair, iteration);
    if (*pair.kept) {
      result.kept.push_back(std::move(ex));
    } else {
      ++result.stats.discard_reasons[rule.discard_reason(pair.ppl_f, pair.ppl_b)];
      result.discarded.push_back(std::move(ex));
    }
  }
  result.stats.kept = result.kept.size();
  result.stats.discarded = result.discarded.size();

  pool.advance();
  for (const auto& ex : result.kept) pool.add(ex);
  return result;
}

BuildResult build_dataset(GenerationPool& pool, PromptGenerator& generator,
                          const SourceModel& model_f, const SourceModel& model_b,
                          const FilterRule& rule, const BuildConfig& config) {
  if (config.target_size < 1) throw std::invalid_argument("target_size must be >= 1");
  BuildResult out;
  for (std::size_t i = 0; i < pool.seed_count(); ++i) out.dataset.add(pool.examples()[i]);

  std::size_t generated = 0;
  for (int it = 0; it < config.max_iterations && generated < config.target_size; ++it) {
    auto r = run_iteration(pool, generator, model_f, model_b, rule, config.gen, config.seed,
                           config.workers);
    out.kept_total += r.kept.size();
    for (auto& ex : r.kept) {
      if (generated == config.target_size) break;
      out.dataset.add(std::move(ex));
      ++generated;
    }
    for (auto& ex : r.discarded) out.discards.add(std::move(ex));
    out.iterations.push_back(std::move(r.stats));
  }
  out.budget_exhausted = generated < config.target_size;

  nlohmann::ordered_json stats = nlohmann::ordered_json::array();
  for (const auto& s : out.iterations) stats.push_back(s.to_json());
  out.dataset.meta()["rule"] = rule.id();
  out.dataset.meta()["generator"] = generator.name();
  out.dataset.meta()["target_size"] = config.target_size;
  out.dataset.meta()["kept_total"] = out.kept_total;
  out.dataset.meta()["budget_exhausted"] = out.budget_exhausted;
  out.dataset.meta()["iterations"] = std::move(stats);
  out.discards.meta()["rule"] = rule.id();
  return out;
}

Dataset synthetic_only(const Dataset& ds) {
  Dataset out;
  out.set_config_hash(ds.manifest().config_hash);
  out.set_created_at(ds.manifest().created_at);
  for (const auto& ex : ds.examples()) {
    if (ex.provenance == Provenance::kGenerated) out.add(ex);
  }
  return out;
}

}  // namespace pplkd
