#include "pplkd/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pplkd/error.hpp"
#include "pplkd/hash.hpp"

namespace pplkd {
namespace {

bool is_space(char c) {
  return std::isspace(static_cast<unsigned char>(c)) != 0;
}

bool is_special(std::string_view token) {
  return token == Vocabulary::kBosToken || token == Vocabulary::kEosToken ||
         token == Vocabulary::kUnkToken;
}

}  // namespace

Vocabulary::Vocabulary(const std::vector<std::string>& corpus_tokens) {
  tokens_.reserve(corpus_tokens.size() + kSpecialCount);
  tokens_.emplace_back(kBosToken);
  tokens_.emplace_back(kEosToken);
  tokens_.emplace_back(kUnkToken);
  for (const auto& t : corpus_tokens) {
    if (t.empty() || is_special(t)) {
      throw std::invalid_argument("vocabulary token is empty or reserved: '" +
                                  t + "'");
    }
    tokens_.push_back(t);
  }
  std::string joined;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token: " + tokens_[i]);
    }
    joined += tokens_[i];
    joined += '\n';
  }
  fingerprint_ = fingerprint64(joined);
}

TokenId Vocabulary::lookup(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (!contains(id)) {
    throw std::out_of_range("token id " + std::to_string(id) +
                            " outside vocabulary of size " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::fingerprint_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, fingerprint_);
  return buf;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.size() < kSpecialCount || lines[0] != kBosToken ||
      lines[1] != kEosToken || lines[2] != kUnkToken) {
    throw MalformedRecord(1, "vocabulary file must start with the framing tokens");
  }
  return Vocabulary(
      std::vector<std::string>(lines.begin() + kSpecialCount, lines.end()));
}

std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (auto tok : split_whitespace(text)) {
    if (!out.empty()) out.push_back(' ');
    out.append(tok);
  }
  return out;
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence seq;
  seq.vocab = vocab.fingerprint();
  for (auto tok : split_whitespace(text)) seq.ids.push_back(vocab.lookup(tok));
  return seq;
}

TokenSequence frame_response(std::string_view text, const Vocabulary& vocab) {
  TokenSequence seq = tokenize(text, vocab);
  seq.ids.push_back(Vocabulary::kEos);
  return seq;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::size_t n = seq.ids.size();
  if (n > 0 && seq.ids.back() == Vocabulary::kEos) --n;
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out.push_back(' ');
    out += vocab.token(seq.ids[i]);
  }
  return out;
}

Vocabulary build_vocabulary(const std::vector<std::string>& corpus_texts,
                            std::size_t max_size) {
  if (max_size < 4) {
    throw std::invalid_argument("vocabulary max_size must be at least 4");
  }
  struct Tally {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Tally> tally;
  std::size_t position = 0;
  for (const auto& text : corpus_texts) {
    for (auto tok : split_whitespace(text)) {
      if (is_special(tok)) continue;
      auto [it, inserted] = tally.try_emplace(std::string(tok));
      if (inserted) it->second.first = position;
      ++it->second.count;
      ++position;
    }
  }
  if (tally.empty()) throw Error(ErrorCode::kEmptyCorpus, "no tokens in corpus");

  std::vector<std::pair<std::string, Tally>> ranked(tally.begin(), tally.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });
  const std::size_t keep =
      std::min(ranked.size(), max_size - Vocabulary::kSpecialCount);
  std::vector<std::string> kept;
  kept.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) kept.push_back(ranked[i].first);
  return Vocabulary(kept);
}

Vocabulary build_vocabulary(std::string_view corpus_text, std::size_t max_size) {
  return build_vocabulary(std::vector<std::string>{std::string(corpus_text)},
                          max_size);
}

std::string_view provenance_name(Provenance p) {
  return p == Provenance::kSeed ? "seed" : "generated";
}

void Dataset::add(Example example) {
  if (example.provenance == Provenance::kSeed && example.iteration != 0) {
    throw std::invalid_argument("seed examples must have iteration 0");
  }
  if (example.iteration < 0) {
    throw std::invalid_argument("iteration must be non-negative");
  }
  if (example.provenance == Provenance::kSeed) {
    ++manifest_.seed_count;
  } else {
    ++manifest_.generated_count;
  }
  examples_.push_back(std::move(example));
}

void Dataset::truncate(std::size_t n) {
  while (examples_.size() > n) {
    if (examples_.back().provenance == Provenance::kSeed) {
      --manifest_.seed_count;
    } else {
      --manifest_.generated_count;
    }
    examples_.pop_back();
  }
}

nlohmann::ordered_json example_to_json(const Example& ex) {
  nlohmann::ordered_json j;
  j["prompt"] = ex.prompt;
  j["response"] = ex.response;
  j["provenance"] = provenance_name(ex.provenance);
  j["iteration"] = ex.iteration;
  if (ex.score) {
    j["ppl_f"] = ex.score->ppl_f;
    j["ppl_b"] = ex.score->ppl_b;
    j["margin"] = ex.score->margin;
    j["kept"] = ex.score->kept;
    j["rule"] = ex.score->rule;
    j["response_b"] = ex.score->response_b;
  }
  return j;
}

Example example_from_json(const nlohmann::ordered_json& r, std::size_t line) {
  if (!r.is_object()) throw MalformedRecord(line, "record is not an object");
  auto require = [&](const char* key, auto check, const char* what) {
    auto it = r.find(key);
    if (it == r.end()) {
      throw MalformedRecord(line, std::string("missing \"") + key + "\" field");
    }
    if (!check(*it)) {
      throw MalformedRecord(line, std::string("\"") + key + "\" must be " + what);
    }
    return *it;
  };
  auto is_string = [](const nlohmann::ordered_json& v) { return v.is_string(); };
  auto is_int = [](const nlohmann::ordered_json& v) { return v.is_number_integer(); };
  auto is_number = [](const nlohmann::ordered_json& v) { return v.is_number(); };
  auto is_bool = [](const nlohmann::ordered_json& v) { return v.is_boolean(); };

  Example ex;
  ex.prompt = require("prompt", is_string, "a string").get<std::string>();
  ex.response = require("response", is_string, "a string").get<std::string>();
  const auto prov = require("provenance", is_string, "a string").get<std::string>();
  if (prov == "seed") {
    ex.provenance = Provenance::kSeed;
  } else if (prov == "generated") {
    ex.provenance = Provenance::kGenerated;
  } else {
    throw MalformedRecord(line, "unknown provenance '" + prov + "'");
  }
  ex.iteration = require("iteration", is_int, "an integer").get<int>();
  if (ex.iteration < 0) throw MalformedRecord(line, "negative iteration");
  if (ex.provenance == Provenance::kSeed && ex.iteration != 0) {
    throw MalformedRecord(line, "seed record with non-zero iteration");
  }
  if (r.contains("ppl_f")) {
    PairScore s;
    s.ppl_f = require("ppl_f", is_number, "a number").get<double>();
    s.ppl_b = require("ppl_b", is_number, "a number").get<double>();
    s.margin = require("margin", is_number, "a number").get<double>();
    s.kept = require("kept", is_bool, "a boolean").get<bool>();
    s.rule = require("rule", is_string, "a string").get<std::string>();
    if (auto it = r.find("response_b"); it != r.end() && it->is_string()) {
      s.response_b = it->get<std::string>();
    }
    ex.score = std::move(s);
  }
  return ex;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  const auto& m = ds.manifest();
  nlohmann::ordered_json head;
  head["type"] = "manifest";
  head["config_hash"] = m.config_hash;
  head["created_at"] = m.created_at;
  head["counts"] = {{"seed", m.seed_count}, {"generated", m.generated_count}};
  head["total"] = ds.size();
  head["meta"] = m.meta;
  out << head.dump() << '\n';
  for (const auto& ex : ds.examples()) out << example_to_json(ex).dump() << '\n';
  out.flush();
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  std::size_t want_seed = 0, want_generated = 0;
  bool have_manifest = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (normalize_text(line).empty()) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::ordered_json::parse_error& e) {
      throw MalformedRecord(lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!have_manifest) {
      if (!j.is_object() || j.value("type", "") != "manifest") {
        throw MalformedRecord(lineno, "first record must be the manifest");
      }
      try {
        ds.set_config_hash(j.at("config_hash").get<std::string>());
        ds.set_created_at(j.at("created_at").get<std::string>());
        want_seed = j.at("counts").at("seed").get<std::size_t>();
        want_generated = j.at("counts").at("generated").get<std::size_t>();
        if (j.contains("meta")) {
          ds.meta() = j.at("meta");
        }
      } catch (const nlohmann::ordered_json::exception& e) {
        throw MalformedRecord(lineno, std::string("bad manifest: ") + e.what());
      }
      have_manifest = true;
      continue;
    }
    ds.add(example_from_json(j, lineno));
  }
  if (!have_manifest) throw MalformedRecord(1, "missing manifest");
  if (ds.manifest().seed_count != want_seed ||
      ds.manifest().generated_count != want_generated) {
    throw MalformedRecord(1, "manifest counts disagree with records");
  }
  return ds;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    auto norm = normalize_text(line);
    if (!norm.empty()) out.push_back(std::move(norm));
  }
  return out;
}

}  // namespace pplkd
