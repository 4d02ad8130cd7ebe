#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fairdistill/model.hpp"
#include "fairdistill/tokenizer.hpp"

namespace fd {

inline constexpr std::string_view kTargetSlot = "<mask>";
inline constexpr std::string_view kAttributeSlot = "<P>";
inline constexpr std::string_view kWordSlot = "<w>";

// A sentence with one target slot ("<mask>") and one attribute slot ("<P>").
struct Template {
  std::string text;
  std::vector<std::string> words;
  std::size_t target_slot = 0;
  std::size_t attribute_slot = 0;
};

Template parse_template(std::string_view line);
// Blank lines and lines starting with '#' are skipped.
std::vector<Template> parse_templates(std::string_view text);
std::vector<Template> load_templates(const std::filesystem::path& path);

struct AttributeEntry {
  std::string phrase;
  std::optional<double> perceived_gender;  // optional second column in [-1, 1]
};
std::vector<AttributeEntry> parse_attributes(std::string_view text);
std::vector<AttributeEntry> load_attributes(const std::filesystem::path& path);

// A template rendered to framed ids. The target slot holds <mask>.
struct RenderedTemplate {
  std::vector<TokenId> ids;
  std::size_t target_pos = 0;
  std::vector<std::size_t> attribute_pos;
  bool attribute_unknown = false;  // some attribute word mapped to <unk>
};

// Template words outside the slots must be in the vocabulary (InputError).
RenderedTemplate render(const Template& tmpl, const Vocabulary& vocab,
                        std::string_view attribute);

// The DisCo context for one template: the filler occupies the attribute slot
// and the former attribute position is masked.
RenderedTemplate render_swapped(const Template& tmpl, const Vocabulary& vocab,
                                std::string_view filler);

struct MetricScore {
  double value = 0;
  bool flagged = false;  // a probability hit the 1e-12 floor
};

// [log p_tgt(a) - log p_prior(a)] - [log p_tgt(b) - log p_prior(b)]
MetricScore lpbs_from_probs(double tgt_a, double prior_a, double tgt_b,
                            double prior_b);
// The prior masks every attribute position as well as the target.
MetricScore lpbs(const MaskedLanguageModel& model, const RenderedTemplate& filled,
                 TokenId a, TokenId b);

// Token ids of the k most probable entries, ties to the lower id.
std::vector<TokenId> top_k(std::span<const double> probs, std::size_t k);
// Sum over the union of both top-k sets of p_a - p_b.
double disco_from_distributions(std::span<const double> p_a,
                                std::span<const double> p_b, std::size_t k);
double disco_simplified(const MaskedLanguageModel& model,
                        const RenderedTemplate& ctx_a,
                        const RenderedTemplate& ctx_b, std::size_t k);

// 1-based rank by descending probability; equal probabilities rank the lower
// id first.
std::size_t rank_of(std::span<const double> probs, TokenId token);
// rank(he) - rank(she); positive when she is ranked better.
long rank_difference(std::span<const double> probs, TokenId he, TokenId she);

struct MrdResult {
  double mean = 0;
  std::vector<long> differences;  // one per profession, in input order
};
MrdResult mrd(const MaskedLanguageModel& model,
              std::span<const RenderedTemplate> filled, TokenId he, TokenId she);

// Effect size over precomputed embeddings. Returns nullopt when the pooled
// association scores have zero variance.
std::optional<double> seat_effect_size(
    std::span<const std::vector<double>> x, std::span<const std::vector<double>> y,
    std::span<const std::vector<double>> a, std::span<const std::vector<double>> b);

inline const std::vector<std::string>& default_bleached_templates() {
  static const std::vector<std::string> t{"this is <w>", "that is <w>",
                                          "<w> is here"};
  return t;
}

// Hidden state at the word's slot, averaged over the bleached templates.
std::vector<double> word_embedding(const MaskedLanguageModel& model,
                                   const Vocabulary& vocab, std::string_view word,
                                   std::span<const std::string> bleached);

struct SeatSets {
  std::vector<std::string> x, y, a, b;
};
// Four lines "X: w w ...", "Y: ...", "A: ...", "B: ...".
SeatSets parse_seat_sets(std::string_view text);

std::optional<double> seat(const MaskedLanguageModel& model, const Vocabulary& vocab,
                           const SeatSets& sets,
                           std::span<const std::string> bleached);

}  // namespace fd
