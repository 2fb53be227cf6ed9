#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pplkd/analysis.hpp"
#include "pplkd/config.hpp"
#include "pplkd/error.hpp"
#include "pplkd/fixture.hpp"
#include "pplkd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pplkd;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> rule;
  std::optional<double> tau;
  std::optional<std::size_t> target_size;
  std::optional<int> workers;
  std::optional<std::string> out;
  std::string dataset;
};

// Single instance per output directory.
class Lock {
 public:
  explicit Lock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST) {
        throw Error(ErrorCode::kIoFailure, path_.string() +
                                               " exists; another run is using this directory "
                                               "(remove the file if it is stale)");
      }
      throw Error(ErrorCode::kIoFailure, "cannot create " + path_.string() + ": " + std::strerror(errno));
    }
  }
  ~Lock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  Lock(const Lock&) = delete;
  Lock& operator=(const Lock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

std::string with_tau(const std::string& rule_text, double tau) {
  const auto rule = FilterRule::parse(rule_text);
  const auto id = rule.id();
  const auto name = id.substr(0, id.find('('));
  if (rule.kind() == RuleKind::kNone) {
    throw Error(ErrorCode::kConfigError, "--tau: rule none takes no threshold");
  }
  std::string out = name + "(" + std::to_string(tau);
  if (rule.kind() == RuleKind::kAsymmetric) out += "," + std::to_string(rule.p2());
  out += ")";
  // Round-trip through the parser so the stored form is the canonical id.
  try {
    return FilterRule::parse(out).id();
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfigError, std::string("--tau: ") + e.what());
  }
}

RunConfig resolve_config(const Overrides& o) {
  if (o.config.empty()) throw Error(ErrorCode::kConfigError, "--config: is required");
  if (!fs::exists(o.config)) throw Error(ErrorCode::kConfigError, "--config: file not found: " + o.config);
  auto cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.rule) cfg.filter = *o.rule;
  if (o.target_size) cfg.target_size = *o.target_size;
  if (o.workers) cfg.workers = *o.workers;
  if (o.out) cfg.paths.out_dir = *o.out;
  (void)config_rule(cfg);
  if (o.tau) cfg.filter = with_tau(cfg.filter, *o.tau);
  if (cfg.workers < 1) throw Error(ErrorCode::kConfigError, "workers: must be >= 1");
  if (cfg.target_size < 1) throw Error(ErrorCode::kConfigError, "target_size: must be >= 1");
  return cfg;
}

fs::path models_dir(const RunConfig& cfg) { return cfg.out_dir() / "models"; }

void warn(const std::string& line) {
  if (!line.empty()) std::cerr << line << '\n';
}

// Reuses fitted models from out/models when present, fitting otherwise.
Models obtain_models(const RunConfig& cfg) {
  const auto dir = models_dir(cfg);
  if (fs::exists(dir / "manifest.json")) {
    std::string hash;
    auto m = load_models(dir, &hash);
    Manifest manifest;
    manifest.config_hash = hash;
    warn(hash_warning(manifest, cfg.hash(), "models/"));
    return m;
  }
  std::cerr << "fitting models\n";
  auto m = fit_models(cfg);
  save_models(m, cfg.hash(), dir);
  return m;
}

Dataset load_input(const RunConfig& cfg, const std::string& flag, const char* fallback) {
  const fs::path path = flag.empty() ? cfg.out_dir() / fallback : fs::path(flag);
  if (!fs::exists(path)) {
    throw Error(ErrorCode::kConfigError, "--dataset: file not found: " + path.string());
  }
  auto ds = load_dataset(path);
  warn(hash_warning(ds.manifest(), cfg.hash(), path.filename().string()));
  return ds;
}

int budget_status(const BuildResult& build) {
  if (!build.budget_exhausted) return 0;
  std::cerr << "BudgetExhausted: kept " << synthetic_only(build.dataset).size() << " of "
            << build.dataset.manifest().meta.value("target_size", 0) << " examples after "
            << build.iterations.size() << " iterations; partial artifacts written\n";
  return 1;
}

int cmd_fit(const Overrides& o) {
  const auto cfg = resolve_config(o);
  Lock lock(cfg.out_dir());
  const auto m = fit_models(cfg);
  save_models(m, cfg.hash(), models_dir(cfg));
  std::cout << "models written to " << models_dir(cfg).string() << " (|V| = " << m.vocab->size()
            << ")\n";
  return 0;
}

int cmd_generate(const Overrides& o) {
  const auto cfg = resolve_config(o);
  Lock lock(cfg.out_dir());
  const auto m = obtain_models(cfg);
  const auto build = build_synthetic(cfg, m);
  save_dataset(build.dataset, cfg.out_dir() / "dataset.jsonl");
  save_dataset(build.discards, cfg.out_dir() / "discards.jsonl");
  write_json(build_report(cfg, build), cfg.out_dir() / "report.json");
  std::cout << "kept " << synthetic_only(build.dataset).size() << " generated examples\n";
  return budget_status(build);
}

// Re-applies a rule to the recorded scores of a previous build.
int cmd_filter(const Overrides& o) {
  const auto cfg = resolve_config(o);
  Lock lock(cfg.out_dir());
  const auto rule = config_rule(cfg);
  const auto kept = load_input(cfg, o.dataset, "dataset.jsonl");
  Dataset pool;
  for (const auto& ex : kept.examples()) pool.add(ex);
  const auto discards_path = cfg.out_dir() / "discards.jsonl";
  if (o.dataset.empty() && fs::exists(discards_path)) {
    const auto discards = load_dataset(discards_path);
    for (const auto& ex : discards.examples()) pool.add(ex);
  }
  Dataset out;
  out.set_config_hash(cfg.hash());
  out.set_created_at(cfg.created_at);
  std::size_t generated = 0;
  for (auto ex : pool.examples()) {
    if (ex.provenance == Provenance::kSeed) {
      out.add(std::move(ex));
      continue;
    }
    ++generated;
    if (!ex.score || !rule.keeps(ex.score->ppl_f, ex.score->ppl_b)) continue;
    ex.score->kept = true;
    ex.score->rule = rule.id();
    out.add(std::move(ex));
  }
  out.meta()["rule"] = rule.id();
  out.meta()["source_generated"] = generated;
  save_dataset(out, cfg.out_dir() / "filtered.jsonl");
  std::cout << "kept " << out.manifest().generated_count << " of " << generated
            << " generated examples under " << rule.id() << "\n";
  return 0;
}

int cmd_distill(const Overrides& o) {
  const auto cfg = resolve_config(o);
  Lock lock(cfg.out_dir());
  const auto m = obtain_models(cfg);
  const auto synthetic = synthetic_only(load_input(cfg, o.dataset, "dataset.jsonl"));
  if (synthetic.empty()) throw Error(ErrorCode::kEmptyDataset, "no generated examples to distill");
  const auto target = distill_target(cfg, m, synthetic);
  save_target(target, *m.vocab, cfg.out_dir());
  auto report = target_report(cfg, m, target);
  report["config_hash"] = cfg.hash();
  report["examples"] = synthetic.size();
  write_json(report, cfg.out_dir() / "target.json");
  std::cout << "distilled " << target.kind << " target from " << synthetic.size() << " examples\n";
  return 0;
}

int cmd_analyze(const Overrides& o) {
  const auto cfg = resolve_config(o);
  Lock lock(cfg.out_dir());
  const auto m = obtain_models(cfg);
  const auto ds = load_input(cfg, o.dataset, "dataset.jsonl");
  const auto records = analyze(cfg, m, ds);
  std::ofstream out(cfg.out_dir() / "analysis.jsonl", std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write analysis.jsonl");
  out << nlohmann::ordered_json{{"type", "manifest"}, {"config_hash", cfg.hash()},
                                {"created_at", cfg.created_at}}
             .dump()
      << '\n';
  for (const auto& r : records) out << r.dump() << '\n';
  std::cout << records.size() << " analysis records\n";
  return 0;
}

int cmd_transfer(const Overrides& o) {
  const auto cfg = resolve_config(o);
  Lock lock(cfg.out_dir());
  const auto m = fit_models(cfg);
  save_models(m, cfg.hash(), models_dir(cfg));
  const auto outcome = run_transfer(cfg, m);
  write_transfer_outputs(cfg, m, outcome);
  const auto& r = outcome.report;
  std::cout << "kept " << r["kept"] << " (keep rate " << r["keep_rate"] << "), target "
            << r["target"]["kind"] << "\n";
  return budget_status(outcome.build);
}

int cmd_fixture(const std::string& dir, std::uint64_t seed) {
  FixtureParams params;
  params.seed = seed;
  const auto fx = make_two_domain_fixture(params);
  write_fixture(fx, dir);
  nlohmann::ordered_json cfg = {
      {"paths",
       {{"seeds", "seeds.jsonl"},
        {"base_corpus", "base.txt"},
        {"ft_corpus", "ft.txt"},
        {"target_corpus", "target.txt"},
        {"prompt_corpus", "prompts.txt"},
        {"heldout_in", "heldout_in.jsonl"},
        {"heldout_out", "heldout_out.jsonl"},
        {"probes_in", "probes_in.txt"},
        {"probes_out", "probes_out.txt"},
        {"out_dir", "out"}}},
      {"filter", "low_high(1.5)"},
      {"seed", seed},
      {"created_at", "1970-01-01T00:00:00Z"},
  };
  write_json(cfg, fs::path(dir) / "config.json");
  std::cout << "fixture written to " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perplexity-filtered synthetic data for knowledge transfer"};
  app.require_subcommand(1);
  Overrides o;

  auto add_common = [&](CLI::App* sub, bool dataset) {
    sub->add_option("--config", o.config, "run config (JSON)")->required();
    sub->add_option("--seed", o.seed, "rng seed");
    sub->add_option("--rule", o.rule, "filter rule, e.g. low_high or ratio(2)");
    sub->add_option("--tau", o.tau, "replaces the rule's first threshold");
    sub->add_option("--target-size", o.target_size, "generated examples to keep");
    sub->add_option("--workers", o.workers, "scoring and enumeration workers");
    sub->add_option("--out", o.out, "output directory");
    if (dataset) sub->add_option("--dataset", o.dataset, "input dataset (default <out>/dataset.jsonl)");
  };

  auto* fit = app.add_subcommand("fit", "fit base and fine-tuned models");
  auto* generate = app.add_subcommand("generate", "build the filtered synthetic dataset");
  auto* filter = app.add_subcommand("filter", "re-apply a rule to recorded scores");
  auto* distill = app.add_subcommand("distill", "distill the target from a dataset");
  auto* analyze_cmd = app.add_subcommand("analyze", "margin decompositions, histograms, distinct-n");
  auto* transfer = app.add_subcommand("transfer", "fit, generate, filter and distill");
  add_common(fit, false);
  add_common(generate, false);
  add_common(filter, true);
  add_common(distill, true);
  add_common(analyze_cmd, true);
  add_common(transfer, false);

  auto* fixture = app.add_subcommand("fixture", "write the two-domain fixture and a config");
  std::string fixture_dir;
  std::uint64_t fixture_seed = 7;
  fixture->add_option("--out", fixture_dir, "directory")->required();
  fixture->add_option("--seed", fixture_seed, "fixture seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*fit) return cmd_fit(o);
    if (*generate) return cmd_generate(o);
    if (*filter) return cmd_filter(o);
    if (*distill) return cmd_distill(o);
    if (*analyze_cmd) return cmd_analyze(o);
    if (*transfer) return cmd_transfer(o);
    if (*fixture) return cmd_fixture(fixture_dir, fixture_seed);
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return e.code() == ErrorCode::kConfigError ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
