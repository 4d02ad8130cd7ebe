#include "fairdistill/corpus.hpp"

#include <array>
#include <random>
#include <sstream>

#include "fairdistill/distill.hpp"
#include "fairdistill/error.hpp"
#include "fairdistill/tokenizer.hpp"

namespace fd {

namespace {

const std::array<std::string_view, 4> kPositive{"kind", "happy", "calm", "brave"};
const std::array<std::string_view, 4> kNegative{"rude", "sad", "angry", "lazy"};
const std::array<std::string_view, 8> kCities{"paris", "london", "berlin", "rome",
                                              "madrid", "vienna", "oslo", "dublin"};
const std::array<std::string_view, 6> kPlaces{"market", "station", "park",
                                              "office", "school", "hotel"};
const std::array<std::string_view, 6> kFoods{"bread", "rice", "soup",
                                             "fish", "cake", "tea"};

// {p} pronoun, {j} profession, {a} adjective, {c} city, {l} place, {f} food.
// The first two are the evaluation shapes.
const std::array<std::string_view, 8> kShapes{
    "{p} is a {j}",
    "{p} can do {j}",
    "{p} is a {a} {j} from {c}",
    "{p} works as a {j} in {c} and is {a}",
    "the {a} {j} said that {p} likes {f}",
    "in {c} {p} met a {a} {j} at the {l}",
    "{p} is a {j} who eats {f} at the {l}",
    "every day {p} walks to the {l} in {c}",
};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& a, std::mt19937_64& rng) {
  return a[rng() % N];
}

}  // namespace

void SyntheticCorpusSpec::validate() const {
  if (professions.empty()) throw ConfigError("profession list is empty");
  for (const auto& p : professions) {
    if (p.name.empty() || split_whitespace(p.name).size() != 1)
      throw ConfigError("profession '" + p.name + "' must be a single word");
    if (!(p.male_prob >= 0 && p.male_prob <= 1))
      throw ConfigError("skew for '" + p.name + "' must lie in [0, 1]");
  }
  if (count < 1) throw ConfigError("sentence count must be at least 1");
  if (male.empty() || female.empty() || male == female)
    throw ConfigError("pronouns must be two distinct non-empty words");
}

const std::vector<std::string>& default_professions() {
  static const std::vector<std::string> p{"doctor", "engineer", "pilot", "lawyer",
                                          "nurse",  "teacher",  "chef",  "banker",
                                          "farmer", "dancer"};
  return p;
}

SyntheticCorpusSpec default_corpus_spec(double sigma) {
  SyntheticCorpusSpec s;
  for (const auto& name : default_professions()) s.professions.push_back({name, sigma});
  return s;
}

std::vector<ProfessionSkew> parse_profession_skews(std::string_view text,
                                                   double fallback) {
  std::vector<ProfessionSkew> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto words = split_whitespace(line);
    if (words.empty() || words[0][0] == '#') continue;
    if (words.size() > 2)
      throw InputError("profession line " + std::to_string(line_no) +
                       ": expected 'name' or 'name<TAB>sigma'");
    ProfessionSkew p{words[0], fallback};
    if (words.size() == 2) {
      try {
        std::size_t used = 0;
        p.male_prob = std::stod(words[1], &used);
        if (used != words[1].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw InputError("profession line " + std::to_string(line_no) +
                         ": bad sigma '" + words[1] + "'");
      }
      if (!(p.male_prob >= 0 && p.male_prob <= 1))
        throw InputError("profession line " + std::to_string(line_no) +
                         ": sigma must lie in [0, 1]");
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<CorpusSentence> generate_corpus(const SyntheticCorpusSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::vector<CorpusSentence> out;
  out.reserve(spec.count);
  for (std::size_t n = 0; n < spec.count; ++n) {
    CorpusSentence s;
    s.profession = rng() % spec.professions.size();
    const auto& prof = spec.professions[s.profession];
    s.male = uniform01(rng) < prof.male_prob;
    const std::string_view shape = kShapes[rng() % kShapes.size()];
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] != '{') {
        s.text += shape[i];
        continue;
      }
      const char slot = shape[i + 1];
      i += 2;
      switch (slot) {
        case 'p': s.text += s.male ? spec.male : spec.female; break;
        case 'j': s.text += prof.name; break;
        case 'a': {
          const bool positive = (rng() & 1) != 0;
          s.label = positive ? 1 : 0;
          s.text += positive ? pick(kPositive, rng) : pick(kNegative, rng);
          break;
        }
        case 'c': s.text += pick(kCities, rng); break;
        case 'l': s.text += pick(kPlaces, rng); break;
        case 'f': s.text += pick(kFoods, rng); break;
        default: throw ContractError("unknown corpus slot");
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PronounCounts> pronoun_counts(std::span<const CorpusSentence> corpus,
                                          std::size_t n_professions) {
  std::vector<PronounCounts> out(n_professions);
  for (const auto& s : corpus) {
    if (s.profession >= n_professions) throw IndexError("profession index out of range");
    (s.male ? out[s.profession].male : out[s.profession].female)++;
  }
  return out;
}

std::string labeled_lines(std::span<const CorpusSentence> corpus) {
  std::string out;
  for (const auto& s : corpus)
    if (s.label >= 0) out += s.text + "\t" + std::to_string(s.label) + "\n";
  return out;
}

}  // namespace fd
