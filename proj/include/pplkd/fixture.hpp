#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "pplkd/corpus.hpp"

namespace pplkd {

// Parameters of the synthetic two-domain world.
//
// Generic facts (colors, opposites) and "public" entities are known to every
// model. "Specialized" entities each belong to one class; a class fixes a
// verb and an object, so a fact reads "<prompt> : <class> <verb> <object>".
// The base corpus mentions specialized entities with mostly wrong classes,
// the fine-tuning corpus has them right, and the target corpus never
// mentions them.
struct FixtureParams {
  std::uint64_t seed = 7;
  int specialized_entities = 20;
  int public_entities = 8;
  int base_specialized_repeats = 80;
  double base_specialized_accuracy = 0.4;
  int ft_repeats = 40;
  int base_public_repeats = 80;
  double base_public_accuracy = 0.7;
  int target_public_repeats = 80;
  double target_public_accuracy = 0.9;
  int generic_repeats = 40;
  int prompt_repeats = 20;
  int prompt_generic = 5;  // generic prompts per prompt-corpus repeat
  int seed_examples = 5;
};

struct Fixture {
  std::vector<std::string> base_corpus;
  std::vector<std::string> ft_corpus;
  std::vector<std::string> target_corpus;
  std::vector<std::string> prompt_corpus;  // prompts only, for the prompt model
  std::vector<Example> seeds;
  std::vector<Example> heldout_in;   // specialized facts under an unseen phrasing
  std::vector<Example> heldout_out;  // generic facts
  std::vector<std::string> in_domain_probes;
  std::vector<std::string> out_of_domain_probes;

  // The vocabulary fit_models builds from these corpora with a large cap.
  Vocabulary vocabulary() const;
};

Fixture make_two_domain_fixture(const FixtureParams& params = {});

// base.txt, ft.txt, target.txt, prompts.txt, seeds.jsonl, heldout_in.jsonl,
// heldout_out.jsonl, probes_in.txt, probes_out.txt
void write_fixture(const Fixture& fixture, const std::filesystem::path& dir);

}  // namespace pplkd
