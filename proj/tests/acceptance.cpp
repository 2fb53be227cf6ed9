// One line per acceptance criterion; exit status 1 if any criterion fails.

#define PPLKD_NO_GTEST

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "cli_util.hpp"
#include "pplkd/analysis.hpp"
#include "pplkd/distill.hpp"
#include "pplkd/error.hpp"
#include "pplkd/pipeline.hpp"
#include "remote_mock.hpp"
#include "test_util.hpp"

using namespace pplkd;
using namespace pplkd::test;

namespace {

int failures = 0;
std::map<int, std::string> lines;  // printed in criterion order at the end

void report(int id, bool ok, const std::string& name, const std::string& detail) {
  lines[id] = std::string(ok ? "[PASS] " : "[FAIL] ") + std::to_string(id) + " " + name + ": " + detail;
  std::cerr << lines[id] << std::endl;
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Kept pairs across every run of this binary, re-checked from scratch in criterion 2.
struct KeptPair {
  std::shared_ptr<const LanguageModel> f;
  Example example;
  double tau;
};
std::vector<KeptPair> kept_pairs;

void collect_kept(const RunConfig& cfg, const Models& m, const Dataset& ds) {
  const auto rule = config_rule(cfg);
  if (rule.kind() != RuleKind::kLowHigh && rule.kind() != RuleKind::kSymmetric) return;
  const auto synthetic = synthetic_only(ds);
  for (const auto& ex : synthetic.examples()) kept_pairs.push_back({m.fine_tuned, ex, rule.p1()});
}

struct FixtureRun {
  fs::path dir;
  RunConfig cfg;
  Models models;
};

FixtureRun make_fixture(const fs::path& dir, std::uint64_t seed) {
  const auto r = run_cli("fixture --out '" + dir.string() + "' --seed " + std::to_string(seed), dir / "log");
  if (r.code != 0) throw std::runtime_error("fixture: " + r.err);
  FixtureRun f;
  f.dir = dir;
  f.cfg = load_config(dir / "config.json");
  f.models = fit_models(f.cfg);
  return f;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string l; std::getline(in, l);) {
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

// |V| <= 8 pairs of order 2 or 3 with a random adapter weight.
struct RandomPair {
  std::shared_ptr<const TabularModel> b;
  std::shared_ptr<const FineTunedModel> f;
};

RandomPair random_pair(std::mt19937_64& rng) {
  const int n = 2 + static_cast<int>(rng() % 4);
  const int order = 2 + static_cast<int>(rng() % 2);
  auto v = small_vocab(n);
  RandomPair p;
  p.b = std::make_shared<const TabularModel>(
      fit_tabular(random_corpus(*v, rng, 20 + static_cast<int>(rng() % 40), 5), v, order,
                  0.05 + static_cast<double>(rng() % 100) / 100.0));
  p.f = std::make_shared<const FineTunedModel>(apply_fine_tune(
      p.b, random_corpus(*v, rng, 5 + static_cast<int>(rng() % 20), 5), 0.5 + static_cast<double>(rng() % 10)));
  return p;
}

void criterion_identity() {
  std::mt19937_64 rng(101);
  double worst = 0;
  int fixtures = 0;
  for (; fixtures < 60; ++fixtures) {
    const auto p = random_pair(rng);
    const auto& v = p.f->vocabulary();
    std::vector<TokenId> prompt;
    for (int i = 0, n = static_cast<int>(rng() % 3); i < n; ++i) {
      prompt.push_back(static_cast<TokenId>(Vocabulary::kSpecialCount + rng() % (v.size() - 3)));
    }
    const int L = 1 + static_cast<int>(rng() % 5);
    const auto d = decompose_margin(*p.f, *p.b, prompt, L);
    worst = std::max(worst, std::abs(d.expected_margin - d.entropy_drop() - d.kl));
  }
  report(1, worst < 1e-9, "margin identity", fmt("max |E[m] - dH - KL| = %.3g over %g fixtures (< 1e-9)", worst, fixtures));
}

void criterion_null(const fs::path& root) {
  const auto dir = root / "null";
  run_cli("fixture --out '" + dir.string() + "'", dir / "log");
  auto j = read_json(dir / "config.json");
  j["model"]["lambda"] = 0.0;
  write_json_file(j, dir / "config.json");
  const auto cfg = load_config(dir / "config.json");
  const auto m = fit_models(cfg);
  double worst = 0;
  for (const auto& pr : lines_of(dir / "probes_in.txt")) {
    const auto x = tokenize(pr, *m.vocab).ids;
    worst = std::max(worst, std::abs(decompose_margin(*m.fine_tuned, *m.base, x, cfg.analysis.length)
                                         .expected_margin));
  }
  LocalSource f(m.fine_tuned), b(m.base);
  const auto gen = config_generation(cfg);
  const auto prompts = lines_of(dir / "prompts.txt");
  const int n = 1000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const auto pair = score_pair(f, b, prompts[static_cast<std::size_t>(i) % prompts.size()], gen,
                                 static_cast<std::uint64_t>(i));
    sum += pair.margin;
    sq += pair.margin * pair.margin;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / (n - 1));
  report(3, worst == 0.0 && std::abs(mean) < 3 * se, "identical-models null",
         fmt("max |E[m]| = %.3g; sampled mean %.4f, 3 SE = %.4f (n = 1000)", worst, mean, 3 * se));
}

void criterion_sign(const FixtureRun& fx) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& a = fx.cfg.analysis;
  double min_in = 1e300, max_out = 0;
  for (const auto& pr : lines_of(fx.cfg.paths.probes_in)) {
    const auto x = tokenize(pr, *fx.models.vocab).ids;
    min_in = std::min(min_in, decompose_margin(*fx.models.fine_tuned, *fx.models.base, x, a.length,
                                               a.budget, fx.cfg.workers)
                                  .expected_margin);
  }
  for (const auto& pr : lines_of(fx.cfg.paths.probes_out)) {
    const auto x = tokenize(pr, *fx.models.vocab).ids;
    max_out = std::max(max_out, std::abs(decompose_margin(*fx.models.fine_tuned, *fx.models.base, x,
                                                          a.length, a.budget, fx.cfg.workers)
                                             .expected_margin));
  }
  const double secs = seconds_since(t0);
  report(4, min_in > 0 && max_out < 0.1 * min_in && secs < 60, "margin sign on the fixture",
         fmt("min in-domain E[m] = %.4f, max |out-of-domain E[m]| = %.4f, L = %g, %.1f s", min_in,
             max_out, a.length, secs));
}

// Seed-averaged held-out in-domain perplexity of the distilled target, per rule.
std::map<std::string, double> rule_sweep(const fs::path& root, const std::vector<std::string>& rules,
                                         int seeds) {
  std::map<std::string, double> mean;
  for (int s = 1; s <= seeds; ++s) {
    auto fx = make_fixture(root / ("seed" + std::to_string(s)), static_cast<std::uint64_t>(s));
    for (const auto& r : rules) {
      auto cfg = fx.cfg;
      cfg.filter = r;
      // low_low keeps few pairs; a larger iteration budget keeps every rule at
      // the same dataset size.
      cfg.max_iterations = 400;
      const auto out = run_transfer(cfg, fx.models);
      if (out.build.budget_exhausted) throw std::runtime_error(r + " exhausted its budget at seed " + std::to_string(s));
      collect_kept(cfg, fx.models, out.build.dataset);
      mean[r] += out.report["target"]["heldout_in"]["distilled"].get<double>() / seeds;
    }
  }
  return mean;
}

void criterion_ordering_and_robustness(const fs::path& root) {
  const auto t0 = std::chrono::steady_clock::now();
  const int seeds = 20;
  const std::string lh = "low_high(1.5)", ll = "low_low(1.5)", none = "none", hh = "high_high(1.5)";
  const std::string sym = "symmetric(1.3)", asym = "asymmetric(1.2,1.6)", ratio = "ratio(1.5)";
  const auto m = rule_sweep(root / "sweep", {lh, ll, none, hh, sym, asym, ratio}, seeds);
  const double secs = seconds_since(t0);
  const bool order = m.at(lh) < m.at(ll) && m.at(ll) < m.at(none) && m.at(ll) < m.at(hh);
  std::ostringstream d;
  d << fmt("%g seeds: low_high %.4f < low_low %.4f < {none %.4f, ", seeds, m.at(lh), m.at(ll), m.at(none))
    << fmt("high_high %.4f}, %.0f s", m.at(hh), secs);
  report(5, order, "filter-rule ordering", d.str());

  double worst = 0;
  std::ostringstream r;
  for (const auto& rule : {sym, asym, ratio}) {
    const double rel = m.at(rule) / m.at(lh) - 1;
    worst = std::max(worst, std::abs(rel));
    r << rule << " " << fmt("%+.2f%%", 100 * rel) << "; ";
  }
  r << "default " << lh << fmt(" %.4f (within 5%%)", m.at(lh));
  report(6, worst < 0.05, "rule robustness", r.str());
}

Dataset tiny_dataset(std::mt19937_64& rng, const Vocabulary& v, int n) {
  Dataset ds;
  auto word = [&] { return v.token(static_cast<TokenId>(3 + rng() % (v.size() - 3))); };
  for (int i = 0; i < n; ++i) {
    Example ex;
    for (int k = 0, len = 1 + static_cast<int>(rng() % 3); k < len; ++k) ex.prompt += (k ? " " : "") + word();
    for (int k = 0, len = 1 + static_cast<int>(rng() % 3); k < len; ++k) ex.response += (k ? " " : "") + word();
    ex.provenance = Provenance::kGenerated;
    ex.iteration = 1;
    ds.add(ex);
  }
  return ds;
}

void criterion_gradient() {
  std::mt19937_64 rng(202);
  double worst = 0;
  for (int inst = 0; inst < 10; ++inst) {
    auto v = small_vocab(2 + inst % 4);
    const auto ds = tiny_dataset(rng, *v, 4 + inst);
    KdObjective obj(ds, *v, 2 + inst % 2);
    std::normal_distribution<double> n01;
    std::vector<double> z(obj.dimension()), g(obj.dimension());
    for (auto& x : z) x = n01(rng);
    obj.gradient(z, g);
    for (int k = 0; k < 20; ++k) {
      const auto i = static_cast<std::size_t>(rng() % z.size());
      auto zp = z, zm = z;
      zp[i] += 1e-5;
      zm[i] -= 1e-5;
      const double fd = (obj.value(zp) - obj.value(zm)) / 2e-5;
      worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-8}));
    }
  }
  report(7, worst < 1e-4, "gradient check",
         fmt("max relative error %.3g over 20 coordinates x 10 instances (< 1e-4)", worst));
}

void criterion_optimality() {
  std::mt19937_64 rng(303);
  double worst_gap = -1e300;
  std::size_t perturbations = 0, decreases = 0;
  const int fixtures = 8;
  for (int inst = 0; inst < fixtures; ++inst) {
    auto v = small_vocab(2 + inst % 3);
    const int order = 2 + inst % 2;
    const auto ds = tiny_dataset(rng, *v, 3 + inst);
    const double alpha = 1e-12;
    const auto mle = distill_tabular(ds, v, order, alpha);
    const double tab = total_kd_loss(mle, ds);
    TrainConfig tc;
    tc.epochs = 5000;
    tc.learning_rate = 1.0;
    tc.report_every = 5000;
    const auto gd = distill_gradient(ds, v, order, tc);
    const double grad_total = gd.final_loss() * static_cast<double>(ds.size());
    worst_gap = std::max(worst_gap, tab - grad_total);
    const auto& counts = mle.counts();
    for (auto key : counts.sorted_keys()) {
      for (TokenId t = 0; t < static_cast<TokenId>(v->size()); ++t) {
        for (int delta : {-1, 1}) {
          if (counts.row(key)->count(t) + delta < 0) continue;
          CountTable c = counts;
          c.add(key, t, delta);
          ++perturbations;
          if (total_kd_loss(TabularModel(v, c, alpha), ds) < tab - 1e-9) ++decreases;
        }
      }
    }
  }
  report(8, worst_gap <= 1e-3 && decreases == 0, "distillation optimality",
         fmt("max (tabular - gradient) total loss %.3g (<= 1e-3) on %g fixtures; %g of %g perturbations decrease",
             worst_gap, fixtures, static_cast<double>(decreases), static_cast<double>(perturbations)));
}

void criterion_reference_pairs() {
  const auto rule = FilterRule::parse("low_high(1.5)");
  const bool a = rule.keeps(1.19, 4.22), b = rule.keeps(1.67, 1.68), c = rule.keeps(2.01, 1.66);
  report(9, a && !b && !c, "filter fixture pairs",
         std::string("(1.19, 4.22) ") + (a ? "kept" : "removed") + "; (1.67, 1.68) " +
             (b ? "kept" : "removed") + "; (2.01, 1.66) " + (c ? "kept" : "removed"));
}

void criterion_determinism(const fs::path& root) {
  const auto dir = root / "determinism";
  run_cli("fixture --out '" + dir.string() + "'", dir / "log");
  const auto cfg_path = dir / "config.json";
  const auto cli = [&](const std::string& out) {
    return run_cli("transfer --config '" + cfg_path.string() + "' --seed 42 --out '" + (dir / out).string() + "'",
                   dir / "log");
  };
  // Local generator first.
  bool ok = cli("local_a").code == 0 && cli("local_b").code == 0 && tree(dir / "local_a") == tree(dir / "local_b");
  const bool local_ok = ok;

  // Template generator against a mock, then replayed from the cache with the
  // server gone.
  const auto prompts = lines_of(dir / "prompts.txt");
  std::atomic<int> calls{0};
  auto server = std::make_unique<MockServer>([&](const httplib::Request& req, httplib::Response& res) {
    ++calls;
    const auto body = nlohmann::json::parse(req.body);
    const auto h = std::hash<std::string>{}(body["prompt"].get<std::string>());
    std::vector<std::string> batch;
    for (std::size_t i = 0; i < 20; ++i) batch.push_back(prompts[(h + 31 * i) % prompts.size()]);
    res.set_content(text_body(numbered_list(batch)), "application/json");
  });
  auto j = read_json(cfg_path);
  j["generation"] = {{"strategy", "instruction_template"}};
  j["endpoint"] = {{"base_url", server->base_url()}, {"model", "mock"}, {"timeout_s", 2.0}, {"max_retries", 0}};
  j["paths"]["cache_dir"] = "cache";
  j["target_size"] = 40;
  write_json_file(j, cfg_path);
  const auto live = cli("remote_a");
  const int live_calls = calls.load();
  server->stop();
  const auto replay = cli("remote_b");
  const bool remote_ok = live.code == 0 && replay.code == 0 && live_calls > 0 &&
                         tree(dir / "remote_a") == tree(dir / "remote_b");
  ok = ok && remote_ok;
  std::ostringstream d;
  d << "seed 42 transfer: prefix_resample runs " << (local_ok ? "identical" : "differ")
    << "; instruction_template live (" << live_calls << " requests) vs cached replay with the server stopped "
    << (remote_ok ? "identical" : "differ (exit " + std::to_string(live.code) + "/" + std::to_string(replay.code) + ": " + replay.err + ")");
  report(10, ok, "determinism", d.str());
}

void criterion_remote() {
  std::vector<std::string> notes;
  bool ok = true;
  auto endpoint = [](const MockServer& s) {
    RemoteEndpoint ep;
    ep.base_url = s.base_url();
    ep.model = "mock";
    ep.timeout_s = 5;
    ep.max_retries = 3;
    return ep;
  };
  ClientOptions quiet;
  quiet.sleep = [](double) {};
  auto code_of = [](const std::function<void()>& fn) -> std::optional<ErrorCode> {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return std::nullopt;
  };

  {
    MockServer s([](const httplib::Request&, httplib::Response& res) {
      res.set_content(completion_body("a b", {-0.5, -0.25}), "application/json");
    });
    RemoteClient c(endpoint(s), quiet);
    const auto r = c.generate("p", 4, 1.0);
    const bool pass = r.text == "a b" && r.token_logprobs.size() == 2;
    ok = ok && pass;
    notes.push_back(std::string("success ") + (pass ? "ok" : "FAILED"));
  }
  {
    std::atomic<int> calls{0};
    MockServer s([&](const httplib::Request&, httplib::Response& res) {
      if (calls++ < 2) {
        res.status = 503;
        return;
      }
      res.set_content(text_body("ok"), "application/json");
    });
    RemoteClient c(endpoint(s), quiet);
    const bool pass = c.generate("p", 4, 1.0).text == "ok" && calls.load() == 3;
    ok = ok && pass;
    notes.push_back(std::string("retry-then-success ") + (pass ? "ok" : "FAILED"));
  }
  {
    std::atomic<int> calls{0};
    MockServer s([&](const httplib::Request&, httplib::Response& res) {
      ++calls;
      res.status = 401;
    });
    RemoteClient c(endpoint(s), quiet);
    const auto code = code_of([&] { c.generate("p", 4, 1.0); });
    const bool pass = code == ErrorCode::kAuthFailure && calls.load() == 1;
    ok = ok && pass;
    notes.push_back(std::string("auth failure ") + (pass ? "ok" : "FAILED"));
  }
  {
    MockServer s([](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"choices":[{"text":"a b","logprobs":{"tokens":["a"," b"],"token_logprobs":[-0.1]}}]})",
                      "application/json");
    });
    RemoteClient c(endpoint(s), quiet);
    const bool pass = code_of([&] { c.generate("p", 4, 1.0); }) == ErrorCode::kProtocolError;
    ok = ok && pass;
    notes.push_back(std::string("malformed logprobs ") + (pass ? "ok" : "FAILED"));
  }
  double err = 1;
  {
    MockServer s([](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      res.set_content(completion_body(body["prompt"], {0.0, -1.5, -0.1, -0.3, -0.2}, true),
                      "application/json");
    });
    err = std::abs(remote_perplexity(endpoint(s), "q :", "x y z") - std::exp(0.2));
    ok = ok && err < 1e-12;
  }
  std::string d;
  for (const auto& n : notes) d += n + "; ";
  d += fmt("|remote_perplexity - exp(0.2)| = %.3g (< 1e-12)", err);
  report(11, ok, "remote protocol", d);
}

void criterion_implication() {
  std::size_t violations = 0, stored_mismatch = 0;
  for (const auto& k : kept_pairs) {
    const auto& ex = k.example;
    const auto& v = k.f->vocabulary();
    // Re-score both responses under F as plain NLL sums.
    auto ppl = [&](const std::string& response) {
      const auto y = frame_response(response, v);
      return std::exp(kd_loss(*k.f, tokenize(ex.prompt, v).ids, y.ids) /
                      static_cast<double>(y.ids.size()));
    };
    const double pf = ppl(ex.response), pb = ppl(ex.score->response_b);
    const double m = std::log(pb) - std::log(pf);
    if (!(m > 0 && m > std::log(k.tau / pf))) ++violations;
    if (std::abs(pf - ex.score->ppl_f) > 1e-9 * pf || std::abs(pb - ex.score->ppl_b) > 1e-9 * pb) ++stored_mismatch;
  }
  const auto& audit = ImplicationAudit::global();
  const bool ok = !kept_pairs.empty() && violations == 0 && stored_mismatch == 0 && audit.violations() == 0;
  std::ostringstream d;
  d << kept_pairs.size() << " kept low_high/symmetric pairs re-scored: " << violations << " violations, "
    << stored_mismatch << " stored-score mismatches; in-process audit " << audit.violations() << " of "
    << audit.checked();
  report(2, ok, "margin implication", d.str());
}

}  // namespace

int main() {
  TempDir root("pplkd-acceptance");
  try {
    criterion_identity();
    criterion_null(root.path());
    auto fx = make_fixture(root / "fixture", 7);
    criterion_sign(fx);
    criterion_ordering_and_robustness(root.path());
    criterion_gradient();
    criterion_optimality();
    criterion_reference_pairs();
    criterion_determinism(root.path());
    criterion_remote();
    criterion_implication();
  } catch (const std::exception& e) {
    for (const auto& [id, line] : lines) std::cout << line << '\n';
    std::cout << "[FAIL] aborted: " << e.what() << std::endl;
    return 1;
  }
  for (const auto& [id, line] : lines) std::cout << line << '\n';
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
