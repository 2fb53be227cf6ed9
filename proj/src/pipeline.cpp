#include "pplkd/pipeline.hpp"

#include <fstream>

#include "pplkd/analysis.hpp"
#include "pplkd/error.hpp"
#include "pplkd/remote.hpp"

namespace pplkd {

namespace {

std::vector<TokenSequence> tokenize_lines(const std::vector<std::string>& lines,
                                          const Vocabulary& vocab) {
  std::vector<TokenSequence> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(tokenize(l, vocab));
  return out;
}

std::vector<std::string> optional_lines(const std::string& path, const std::string& field) {
  if (path.empty()) return {};
  require_path(path, field);
  return read_lines(path);
}

std::string resolved_method(const RunConfig& config, const Models& models) {
  if (config.target.method != "auto") return config.target.method;
  return models.target_prior ? "onto" : "tabular";
}

nlohmann::ordered_json perplexity_pair(const DistilledTarget& t, const Models& models,
                                       const std::vector<Example>& set) {
  nlohmann::ordered_json j;
  j["examples"] = set.size();
  j["prior"] = models.target_prior ? nlohmann::ordered_json(corpus_perplexity(*models.target_prior, set))
                                   : nlohmann::ordered_json(nullptr);
  j["distilled"] = t.model ? nlohmann::ordered_json(corpus_perplexity(*t.model, set))
                                  : nlohmann::ordered_json(nullptr);
  return j;
}

}  // namespace

Models fit_models(const RunConfig& config) {
  const auto& p = config.paths;
  require_path(p.base_corpus, "paths.base_corpus");
  require_path(p.ft_corpus, "paths.ft_corpus");
  const auto base_lines = read_lines(p.base_corpus);
  const auto ft_lines = read_lines(p.ft_corpus);
  const auto target_lines = optional_lines(p.target_corpus, "paths.target_corpus");
  const auto prompt_lines = optional_lines(p.prompt_corpus, "paths.prompt_corpus");

  std::vector<std::string> texts;
  for (const auto* c : {&base_lines, &ft_lines, &target_lines, &prompt_lines}) {
    texts.insert(texts.end(), c->begin(), c->end());
  }
  if (!p.seeds.empty()) {
    require_path(p.seeds, "paths.seeds");
    for (const auto& ex : load_examples(p.seeds)) texts.push_back(ex.prompt + " " + ex.response);
  }

  Models m;
  m.vocab = std::make_shared<const Vocabulary>(build_vocabulary(texts, config.model.max_vocab));
  m.base = std::make_shared<const TabularModel>(
      fit_tabular(tokenize_lines(base_lines, *m.vocab), m.vocab, config.model.order, config.model.alpha));
  m.fine_tuned = std::make_shared<const FineTunedModel>(
      apply_fine_tune(m.base, tokenize_lines(ft_lines, *m.vocab), config.model.lambda));
  if (!target_lines.empty()) {
    m.target_prior = std::make_shared<const TabularModel>(fit_tabular(
        tokenize_lines(target_lines, *m.vocab), m.vocab, config.target.order, config.target.alpha));
  }
  if (!prompt_lines.empty()) {
    m.prompt_background = std::make_shared<const TabularModel>(
        fit_tabular(tokenize_lines(prompt_lines, *m.vocab), m.vocab, config.model.order,
                    config.generation.prompt_alpha));
  }
  return m;
}

void save_models(const Models& m, const std::string& config_hash,
                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  m.vocab->save(dir / "vocab.txt");
  save_tabular(*m.base, dir / "base.model");
  save_delta(m.fine_tuned->delta(), *m.vocab, dir / "finetune.delta");
  nlohmann::ordered_json manifest;
  manifest["config_hash"] = config_hash;
  manifest["vocab"] = m.vocab->fingerprint_hex();
  manifest["files"] = {"vocab.txt", "base.model", "finetune.delta"};
  if (m.target_prior) {
    save_tabular(*m.target_prior, dir / "target_prior.model");
    manifest["files"].push_back("target_prior.model");
  }
  if (m.prompt_background) {
    save_tabular(*m.prompt_background, dir / "prompt.model");
    manifest["files"].push_back("prompt.model");
  }
  write_json(manifest, dir / "manifest.json");
}

Models load_models(const std::filesystem::path& dir, std::string* config_hash) {
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw Error(ErrorCode::kIoFailure, "no fitted models under " + dir.string() + " (run fit first)");
  }
  std::ifstream in(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  if (config_hash) *config_hash = manifest.value("config_hash", "");
  Models m;
  m.vocab = std::make_shared<const Vocabulary>(Vocabulary::load(dir / "vocab.txt"));
  m.base = std::make_shared<const TabularModel>(load_tabular(dir / "base.model", m.vocab));
  m.fine_tuned = std::make_shared<const FineTunedModel>(
      m.base, load_delta(dir / "finetune.delta", *m.vocab));
  if (std::filesystem::exists(dir / "target_prior.model")) {
    m.target_prior = std::make_shared<const TabularModel>(load_tabular(dir / "target_prior.model", m.vocab));
  }
  if (std::filesystem::exists(dir / "prompt.model")) {
    m.prompt_background = std::make_shared<const TabularModel>(load_tabular(dir / "prompt.model", m.vocab));
  }
  return m;
}

std::vector<Example> load_examples(const std::filesystem::path& path) {
  return load_dataset(path).examples();
}

std::unique_ptr<PromptGenerator> make_generator(const RunConfig& config, const Models& models) {
  const auto& g = config.generation;
  StrategyConfig sc{g.batch_size, g.demonstrations, g.include_responses};
  if (g.strategy == "instruction_template") {
    ClientOptions opts;
    opts.cache_dir = config.cache_dir();
    auto client = std::make_shared<RemoteClient>(*config.endpoint, opts);
    return std::make_unique<TemplateGenerator>(std::move(client), sc, g.template_max_tokens,
                                               g.template_temperature);
  }
  PrefixResampleOptions po;
  po.order = config.model.order;
  po.alpha = g.prompt_alpha;
  po.background = models.prompt_background;
  po.pool_weight = g.pool_weight;
  po.max_len = g.prompt_max_len;
  return std::make_unique<PrefixResampleGenerator>(models.vocab, sc, po);
}

std::pair<std::unique_ptr<SourceModel>, std::unique_ptr<SourceModel>> make_sources(
    const RunConfig& config, const Models& models) {
  if (config.source_f) {
    ClientOptions opts;
    opts.cache_dir = config.cache_dir();
    auto cf = std::make_shared<RemoteClient>(*config.source_f, opts);
    auto cb = std::make_shared<RemoteClient>(*config.source_b, opts);
    return {std::make_unique<RemoteSource>(cf, config.generation.max_len),
            std::make_unique<RemoteSource>(cb, config.generation.max_len)};
  }
  return {std::make_unique<LocalSource>(models.fine_tuned),
          std::make_unique<LocalSource>(models.base)};
}

FilterRule config_rule(const RunConfig& config) {
  try {
    return FilterRule::parse(config.filter);
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfigError, std::string("filter: ") + e.what());
  }
}

GenerationConfig config_generation(const RunConfig& config) {
  GenerationConfig gen;
  gen.sampling.max_len = config.generation.max_len;
  gen.sampling.temperature = config.generation.temperature;
  gen.sampling.greedy = config.generation.greedy;
  gen.best_of = config.generation.best_of;
  return gen;
}

double corpus_perplexity(const LanguageModel& model, const std::vector<Example>& examples) {
  if (examples.empty()) throw Error(ErrorCode::kEmptyDataset, "perplexity of an empty set");
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : examples) {
    const auto x = tokenize(ex.prompt, model.vocabulary());
    const auto y = frame_response(ex.response, model.vocabulary());
    nll -= total_log_likelihood(model, x.ids, y.ids);
    tokens += y.size();
  }
  return std::exp(nll / static_cast<double>(tokens));
}

DistilledTarget distill_target(const RunConfig& config, const Models& models,
                               const Dataset& synthetic) {
  DistilledTarget t;
  t.kind = resolved_method(config, models);
  const auto& tc = config.target;
  if (t.kind == "onto") {
    if (!models.target_prior) {
      throw Error(ErrorCode::kConfigError, "paths.target_corpus: is required by target.method onto");
    }
    t.model = std::make_shared<FineTunedModel>(distill_onto(models.target_prior, synthetic, tc.lambda));
  } else if (t.kind == "tabular") {
    t.model = std::make_shared<TabularModel>(distill_tabular(synthetic, models.vocab, tc.order, tc.alpha));
  } else {
    TrainConfig train;
    train.epochs = tc.epochs;
    train.learning_rate = tc.learning_rate;
    train.seed = config.seed;
    train.report_every = tc.report_every;
    train.workers = config.workers;
    auto r = distill_gradient(synthetic, models.vocab, tc.order, train);
    t.trajectory = std::move(r.trajectory);
    t.model = std::make_shared<LogitTableModel>(std::move(r.model));
  }
  return t;
}

void save_target(const DistilledTarget& t, const Vocabulary& vocab,
                 const std::filesystem::path& out_dir) {
  if (!t.model) return;
  const auto dir = out_dir / "models";
  std::filesystem::create_directories(dir);
  if (t.kind == "onto") {
    save_delta(dynamic_cast<const FineTunedModel&>(*t.model).delta(), vocab, dir / "target.delta");
  } else if (t.kind == "tabular") {
    save_tabular(dynamic_cast<const TabularModel&>(*t.model), dir / "target.model");
  } else {
    save_logit_table(dynamic_cast<const LogitTableModel&>(*t.model), dir / "target.logits");
    write_loss_csv(t.trajectory, out_dir / "loss.csv");
  }
}

BuildResult build_synthetic(const RunConfig& config, const Models& models) {
  require_path(config.paths.seeds, "paths.seeds");
  std::vector<Example> seeds;
  for (auto ex : load_examples(config.paths.seeds)) {
    ex.provenance = Provenance::kSeed;
    ex.iteration = 0;
    ex.score.reset();
    seeds.push_back(std::move(ex));
  }
  const auto rule = config_rule(config);
  auto generator = make_generator(config, models);
  auto [source_f, source_b] = make_sources(config, models);

  BuildConfig bc;
  bc.target_size = config.target_size;
  bc.max_iterations = config.max_iterations;
  bc.gen = config_generation(config);
  bc.seed = config.seed;
  bc.workers = config.workers;

  GenerationPool pool(std::move(seeds));
  auto out = build_dataset(pool, *generator, *source_f, *source_b, rule, bc);
  const auto hash = config.hash();
  for (auto* ds : {&out.dataset, &out.discards}) {
    ds->set_config_hash(hash);
    ds->set_created_at(config.created_at);
  }
  return out;
}

nlohmann::ordered_json build_report(const RunConfig& config, const BuildResult& build) {
  const auto rule = config_rule(config);
  const auto synthetic = synthetic_only(build.dataset);
  std::size_t scored = 0, checked = 0, violations = 0;
  for (const auto& s : build.iterations) {
    scored += s.generated;
    violations += s.implication_violations;
  }
  double kept_margin = 0.0, discarded_margin = 0.0;
  for (const auto& ex : synthetic.examples()) kept_margin += ex.score->margin;
  for (const auto& ex : build.discards.examples()) discarded_margin += ex.score->margin;
  if (rule.kind() == RuleKind::kLowHigh || rule.kind() == RuleKind::kSymmetric) {
    checked = build.kept_total;
  }

  nlohmann::ordered_json r;
  r["config_hash"] = config.hash();
  r["created_at"] = config.created_at;
  r["rule"] = rule.id();
  r["generator"] = build.dataset.manifest().meta.value("generator", "");
  r["target_size"] = config.target_size;
  r["kept"] = synthetic.size();
  r["kept_total"] = build.kept_total;
  r["scored"] = scored;
  r["keep_rate"] = scored ? static_cast<double>(build.kept_total) / static_cast<double>(scored) : 0.0;
  r["iterations"] = build.iterations.size();
  r["budget_exhausted"] = build.budget_exhausted;
  r["margin"] = {
      {"kept_mean", synthetic.empty() ? 0.0 : kept_margin / static_cast<double>(synthetic.size())},
      {"discarded_mean", build.discards.empty()
                             ? 0.0
                             : discarded_margin / static_cast<double>(build.discards.size())}};
  r["implication"] = {{"checked", checked}, {"violations", violations}};
  return r;
}

nlohmann::ordered_json target_report(const RunConfig& config, const Models& models,
                                     const DistilledTarget& target) {
  nlohmann::ordered_json t;
  t["kind"] = target.model ? nlohmann::ordered_json(target.kind) : nlohmann::ordered_json(nullptr);
  if (!config.paths.heldout_in.empty()) {
    require_path(config.paths.heldout_in, "paths.heldout_in");
    t["heldout_in"] = perplexity_pair(target, models, load_examples(config.paths.heldout_in));
  }
  if (!config.paths.heldout_out.empty()) {
    require_path(config.paths.heldout_out, "paths.heldout_out");
    t["heldout_out"] = perplexity_pair(target, models, load_examples(config.paths.heldout_out));
  }
  return t;
}

TransferOutcome run_transfer(const RunConfig& config, const Models& models) {
  TransferOutcome out;
  out.build = build_synthetic(config, models);
  const auto synthetic = synthetic_only(out.build.dataset);
  if (!synthetic.empty()) out.target = distill_target(config, models, synthetic);
  out.report = build_report(config, out.build);
  out.report["target"] = target_report(config, models, out.target);
  return out;
}

void write_transfer_outputs(const RunConfig& config, const Models& models,
                            const TransferOutcome& outcome) {
  const auto dir = config.out_dir();
  std::filesystem::create_directories(dir);
  save_dataset(outcome.build.dataset, dir / "dataset.jsonl");
  save_dataset(outcome.build.discards, dir / "discards.jsonl");
  save_target(outcome.target, *models.vocab, dir);
  write_json(outcome.report, dir / "report.json");
}

nlohmann::ordered_json analyze(const RunConfig& config, const Models& models,
                               const Dataset& dataset) {
  nlohmann::ordered_json records = nlohmann::ordered_json::array();
  const auto& a = config.analysis;
  auto probes = [&](const std::string& path, const std::string& field, const char* domain) {
    for (const auto& prompt : optional_lines(path, field)) {
      const auto x = tokenize(prompt, *models.vocab);
      auto d = decompose_margin(*models.fine_tuned, *models.base, x.ids, a.length, a.budget,
                                config.workers);
      nlohmann::ordered_json rec;
      rec["type"] = "decomposition";
      rec["domain"] = domain;
      rec["prompt"] = prompt;
      const auto dj = d.to_json();
      for (const auto& [k, v] : dj.items()) rec[k] = v;
      records.push_back(std::move(rec));
    }
  };
  probes(config.paths.probes_in, "paths.probes_in", "in");
  probes(config.paths.probes_out, "paths.probes_out", "out");

  for (auto [which, name] : {std::pair{Which::kF, "f"}, std::pair{Which::kB, "b"}}) {
    nlohmann::ordered_json rec;
    rec["type"] = "histogram";
    rec["which"] = name;
    const auto hj = perplexity_histogram(dataset, which, a.edges).to_json();
    for (const auto& [k, v] : hj.items()) rec[k] = v;
    records.push_back(std::move(rec));
  }

  std::vector<std::string> prompts;
  for (const auto& ex : dataset.examples()) prompts.push_back(ex.prompt);
  if (!prompts.empty()) {
    for (int n = 1; n <= 3; ++n) {
      records.push_back({{"type", "distinct"}, {"n", n}, {"prompts", prompts.size()},
                         {"value", distinct_n(prompts, n)}});
    }
  }
  return records;
}

void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string hash_warning(const Manifest& manifest, const std::string& expected,
                         const std::string& what) {
  if (manifest.config_hash.empty() || manifest.config_hash == expected) return "";
  return "warning: " + what + " was produced under config " + manifest.config_hash.substr(0, 12) +
         ", current config is " + expected.substr(0, 12);
}

}  // namespace pplkd
