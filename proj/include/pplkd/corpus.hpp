#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace pplkd {

using TokenId = std::int32_t;

// Dense token ids. The three framing tokens always occupy ids 0..2.
class Vocabulary {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr std::string_view kBosToken = "<s>";
  static constexpr std::string_view kEosToken = "</s>";
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::size_t kSpecialCount = 3;

  // `corpus_tokens` are appended after the specials in the given order.
  // Throws std::invalid_argument on duplicates or on a special string.
  explicit Vocabulary(const std::vector<std::string>& corpus_tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId lookup(std::string_view token) const;
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < tokens_.size();
  }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Stable across processes; embedded in model headers and token sequences.
  std::uint64_t fingerprint() const { return fingerprint_; }
  std::string fingerprint_hex() const;

  // One token per line, specials included.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_;
  }

 private:
  struct StringHash {
    using is_transparent = void;
    std::size_t operator()(std::string_view s) const {
      return std::hash<std::string_view>{}(s);
    }
  };

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId, StringHash, std::equal_to<>> index_;
  std::uint64_t fingerprint_ = 0;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::uint64_t vocab = 0;  // fingerprint of the vocabulary `ids` index into

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

std::vector<std::string_view> split_whitespace(std::string_view text);

// Collapses every whitespace run to one space and trims the ends.
std::string normalize_text(std::string_view text);

// Whitespace split with UNK fallback. No framing tokens are inserted.
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);

// Response framing used for scoring and training: tokens followed by EOS.
TokenSequence frame_response(std::string_view text, const Vocabulary& vocab);

// Joins tokens with single spaces. A trailing EOS is dropped.
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);

// Keeps the max_size - 3 most frequent whitespace tokens; ties go to the
// token seen first. Throws Error(kEmptyCorpus) when no token is found.
Vocabulary build_vocabulary(std::string_view corpus_text, std::size_t max_size);
Vocabulary build_vocabulary(const std::vector<std::string>& corpus_texts,
                            std::size_t max_size);

enum class Provenance { kSeed, kGenerated };

std::string_view provenance_name(Provenance p);

// Filter outcome attached to a generated example.
struct PairScore {
  double ppl_f = 0.0;
  double ppl_b = 0.0;
  double margin = 0.0;
  bool kept = false;
  std::string rule;
  std::string response_b;

  bool operator==(const PairScore&) const = default;
};

struct Example {
  std::string prompt;
  std::string response;
  Provenance provenance = Provenance::kSeed;
  int iteration = 0;
  std::optional<PairScore> score;

  bool operator==(const Example&) const = default;
};

struct Manifest {
  std::string config_hash;
  std::string created_at;
  std::size_t seed_count = 0;
  std::size_t generated_count = 0;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();

  bool operator==(const Manifest&) const = default;
};

// Ordered examples plus a manifest whose counts track every mutation.
class Dataset {
 public:
  Dataset() = default;

  // Seed examples must carry iteration 0.
  void add(Example example);
  void truncate(std::size_t n);

  const std::vector<Example>& examples() const { return examples_; }
  std::size_t size() const { return examples_.size(); }
  bool empty() const { return examples_.empty(); }

  const Manifest& manifest() const { return manifest_; }
  void set_config_hash(std::string hash) { manifest_.config_hash = std::move(hash); }
  void set_created_at(std::string ts) { manifest_.created_at = std::move(ts); }
  nlohmann::ordered_json& meta() { return manifest_.meta; }

  bool operator==(const Dataset&) const = default;

 private:
  std::vector<Example> examples_;
  Manifest manifest_;
};

nlohmann::ordered_json example_to_json(const Example& example);
Example example_from_json(const nlohmann::ordered_json& record,
                          std::size_t line);

// One JSON object per line; the manifest is line 1 with "type":"manifest".
// Throws Error(kIoFailure) / MalformedRecord.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Plain-text corpora: one sequence per non-blank line.
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace pplkd
