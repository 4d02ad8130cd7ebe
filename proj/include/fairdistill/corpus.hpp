#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fd {

struct ProfessionSkew {
  std::string name;
  double male_prob = 0.9;  // probability that a sentence uses the male pronoun
};

struct SyntheticCorpusSpec {
  std::vector<ProfessionSkew> professions;
  std::string male = "he";
  std::string female = "she";
  std::size_t count = 20000;
  std::uint64_t seed = 1;

  void validate() const;
};

const std::vector<std::string>& default_professions();
// Every default profession with the same skew.
SyntheticCorpusSpec default_corpus_spec(double sigma = 0.9);
// Lines "name" or "name<TAB>sigma"; sigma defaults to `fallback`.
std::vector<ProfessionSkew> parse_profession_skews(std::string_view text,
                                                   double fallback);

struct CorpusSentence {
  std::string text;
  std::size_t profession = 0;
  bool male = true;
  int label = -1;  // 1 positive / 0 negative adjective, -1 when none
};

// Deterministic in spec.seed. Sentence shapes include the short evaluation
// shapes ("he is a doctor", "she can do pilot") and longer ones whose extra
// slots (adjective, city, place, food) are drawn uniformly.
std::vector<CorpusSentence> generate_corpus(const SyntheticCorpusSpec& spec);

struct PronounCounts {
  std::size_t male = 0;
  std::size_t female = 0;
  double male_fraction() const {
    const auto n = male + female;
    return n ? static_cast<double>(male) / static_cast<double>(n) : 0.0;
  }
};
// Realized counts per profession, indexed like spec.professions.
std::vector<PronounCounts> pronoun_counts(std::span<const CorpusSentence> corpus,
                                          std::size_t n_professions);

// "sentence<TAB>label" for sentences that carry a sentiment adjective.
std::string labeled_lines(std::span<const CorpusSentence> corpus);

}  // namespace fd
