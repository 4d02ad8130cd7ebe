#pragma once

// Probabilistic equality rules over output tokens.
//
// Rule file syntax (UTF-8):
//   # comment
//   he = she
//   hij = zij @variants case
//   hij = zij @variants case space
//
// "@variants case" adds the class with the first letter's case flipped;
// "@variants space" adds the class with the word-boundary marker prefixed
// (kWordBoundaryMarker, as produced by byte-level BPE vocabularies).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fairdistill/model.hpp"
#include "fairdistill/tokenizer.hpp"

namespace fd {

inline constexpr std::string_view kWordBoundaryMarker = "\xC4\xA0";  // U+0120

struct EqualityClass {
  std::vector<std::string> forms;
  std::size_t line = 0;  // source line, 1-based
};

// Classes after variant expansion; pairwise disjoint, each with >= 2 forms.
struct EqualityRuleSet {
  std::vector<EqualityClass> classes;
  bool empty() const { return classes.empty(); }
};

EqualityRuleSet parse_rules(std::string_view text);
EqualityRuleSet parse_rule_file(const std::filesystem::path& path);

// Vocabulary-resolved lookup table. Groups are sorted (ids ascending within a
// group, groups by first id), so the table does not depend on rule order.
struct CompiledRules {
  std::size_t vocab_size = 0;
  std::vector<std::vector<TokenId>> groups;
  std::vector<std::int32_t> class_of;  // size vocab_size, -1 = unconstrained

  bool empty() const { return groups.empty(); }
  friend bool operator==(const CompiledRules&, const CompiledRules&) = default;
};

// Every form must resolve to an in-vocabulary id (after the vocabulary's case
// normalization). Classes that normalize to an identical id group are merged.
CompiledRules compile_rules(const EqualityRuleSet& rules, const Vocabulary& vocab);
CompiledRules compile_groups(std::vector<std::vector<TokenId>> groups,
                             std::size_t vocab_size);

// Sets every class member to the class mean. Members that are already equal
// are left untouched, which makes the operation exactly idempotent.
template <typename T>
void apply_rules_inplace(std::span<T> probs, const CompiledRules& compiled);

Distribution apply_rules(std::span<const double> probs,
                         const CompiledRules& compiled);

Distribution filtered_predict(const TransformerParams& teacher,
                              const CompiledRules& compiled,
                              std::span<const TokenId> ids,
                              std::size_t position);

// Composition of a model's masked distribution with apply_rules.
class RuleFilteredModel : public MaskedLanguageModel {
 public:
  RuleFilteredModel(const MaskedLanguageModel& base, const CompiledRules& rules)
      : base_(base), rules_(rules) {}
  std::size_t vocab_size() const override { return base_.vocab_size(); }
  Distribution masked_distribution(std::span<const TokenId> ids,
                                   std::size_t position) const override {
    return apply_rules(base_.masked_distribution(ids, position), rules_);
  }
  std::vector<double> hidden_state(std::span<const TokenId> ids,
                                   std::size_t position) const override {
    return base_.hidden_state(ids, position);
  }

 private:
  const MaskedLanguageModel& base_;
  const CompiledRules& rules_;
};

}  // namespace fd
