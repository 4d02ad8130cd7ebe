#include "fairdistill/rules.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace fd {

namespace {

std::string trim(std::string_view s) {
  const auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n';
  };
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::string flip_initial_case(const std::string& s) {
  std::string out = s;
  if (!out.empty()) {
    char& c = out[0];
    if (c >= 'a' && c <= 'z')
      c = static_cast<char>(c - 'a' + 'A');
    else if (c >= 'A' && c <= 'Z')
      c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

struct Directives {
  bool case_variants = false;
  bool space_variants = false;
};

Directives parse_directives(std::string_view text, std::size_t line) {
  Directives d;
  const auto words = split_whitespace(text);
  std::size_t i = 0;
  while (i < words.size()) {
    if (words[i] != "@variants")
      throw ParseError(line, "unknown directive '" + words[i] + "'");
    ++i;
    std::size_t values = 0;
    for (; i < words.size() && words[i].front() != '@'; ++i, ++values) {
      if (words[i] == "case")
        d.case_variants = true;
      else if (words[i] == "space")
        d.space_variants = true;
      else
        throw ParseError(line, "unknown variant '" + words[i] +
                                   "' (expected case or space)");
    }
    if (values == 0)
      throw ParseError(line, "'@variants' needs at least one of: case, space");
  }
  return d;
}

}  // namespace

EqualityRuleSet parse_rules(std::string_view text) {
  EqualityRuleSet set;
  std::map<std::string, std::size_t> owner;  // form -> line that claimed it
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;

    Directives dir;
    std::string body = line;
    if (auto at = line.find('@'); at != std::string::npos) {
      // The directive must begin with "@variants"; "@" inside a form is not
      // supported.
      dir = parse_directives(std::string_view(line).substr(at), line_no);
      body = trim(std::string_view(line).substr(0, at));
    }

    std::vector<std::string> forms;
    std::size_t start = 0;
    while (true) {
      const auto eq = body.find('=', start);
      std::string form = trim(std::string_view(body).substr(
          start, eq == std::string::npos ? std::string::npos : eq - start));
      if (form.empty()) throw ParseError(line_no, "empty surface form");
      if (split_whitespace(form).size() != 1)
        throw ParseError(line_no, "surface form '" + form +
                                      "' contains whitespace (missing '='?)");
      if (std::find(forms.begin(), forms.end(), form) != forms.end())
        throw ParseError(line_no, "duplicate surface form '" + form + "'");
      forms.push_back(form);
      if (eq == std::string::npos) break;
      start = eq + 1;
    }
    if (forms.size() < 2)
      throw ParseError(line_no, "an equality class needs at least two forms");

    std::vector<std::vector<std::string>> expanded{forms};
    if (dir.case_variants) {
      std::vector<std::string> flipped;
      for (const auto& f : forms) flipped.push_back(flip_initial_case(f));
      if (flipped != forms) expanded.push_back(std::move(flipped));
    }
    if (dir.space_variants) {
      const std::size_t n = expanded.size();
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::string> spaced;
        for (const auto& f : expanded[i])
          spaced.push_back(std::string(kWordBoundaryMarker) + f);
        expanded.push_back(std::move(spaced));
      }
    }
    for (auto& cls : expanded) {
      std::set<std::string> uniq(cls.begin(), cls.end());
      if (uniq.size() != cls.size())
        throw ParseError(line_no, "variant expansion produced a duplicate form");
      for (const auto& f : cls) {
        auto [it, fresh] = owner.emplace(f, line_no);
        if (!fresh)
          throw ParseError(line_no, "form '" + f +
                                        "' already belongs to the class on line " +
                                        std::to_string(it->second));
      }
      set.classes.push_back({std::move(cls), line_no});
    }
  }
  return set;
}

EqualityRuleSet parse_rule_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read rule file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_rules(ss.str());
}

CompiledRules compile_groups(std::vector<std::vector<TokenId>> groups,
                             std::size_t vocab_size) {
  CompiledRules out;
  out.vocab_size = vocab_size;
  for (auto& g : groups) {
    std::sort(g.begin(), g.end());
    if (std::adjacent_find(g.begin(), g.end()) != g.end())
      throw CompileError("equality class repeats a token id");
    if (g.size() < 2) throw CompileError("equality class needs >= 2 token ids");
    for (TokenId id : g)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
        throw CompileError("token id " + std::to_string(id) +
                           " outside vocabulary of size " +
                           std::to_string(vocab_size));
  }
  std::sort(groups.begin(), groups.end());
  out.class_of.assign(vocab_size, -1);
  for (std::size_t c = 0; c < groups.size(); ++c)
    for (TokenId id : groups[c]) {
      auto& slot = out.class_of[static_cast<std::size_t>(id)];
      if (slot != -1)
        throw CompileError("token id " + std::to_string(id) +
                           " appears in more than one class");
      slot = static_cast<std::int32_t>(c);
    }
  out.groups = std::move(groups);
  return out;
}

CompiledRules compile_rules(const EqualityRuleSet& rules, const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> groups;
  for (const auto& cls : rules.classes) {
    std::vector<TokenId> ids;
    for (const auto& form : cls.forms) {
      const auto id = vocab.find(vocab.normalize(form));
      if (!id)
        throw CompileError("rule form '" + form + "' (line " +
                           std::to_string(cls.line) +
                           ") is not in the vocabulary");
      ids.push_back(*id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw CompileError("class on line " + std::to_string(cls.line) +
                         " maps two forms to the same token");
    // Case-folding vocabularies collapse case variants onto the same group.
    if (std::find(groups.begin(), groups.end(), ids) != groups.end()) continue;
    groups.push_back(std::move(ids));
  }
  return compile_groups(std::move(groups), vocab.size());
}

template <typename T>
void apply_rules_inplace(std::span<T> probs, const CompiledRules& compiled) {
  if (probs.size() != compiled.vocab_size)
    throw DimensionError("apply_rules: distribution over " +
                         std::to_string(probs.size()) +
                         " tokens, rules compiled for " +
                         std::to_string(compiled.vocab_size));
  for (const auto& g : compiled.groups) {
    const T first = probs[static_cast<std::size_t>(g[0])];
    bool all_equal = true;
    double total = 0;
    for (TokenId id : g) {
      const T v = probs[static_cast<std::size_t>(id)];
      all_equal = all_equal && v == first;
      total += static_cast<double>(v);
    }
    if (all_equal) continue;
    const T m = static_cast<T>(total / static_cast<double>(g.size()));
    for (TokenId id : g) probs[static_cast<std::size_t>(id)] = m;
  }
}

template void apply_rules_inplace<float>(std::span<float>, const CompiledRules&);
template void apply_rules_inplace<double>(std::span<double>, const CompiledRules&);

Distribution apply_rules(std::span<const double> probs,
                         const CompiledRules& compiled) {
  Distribution out(probs.begin(), probs.end());
  apply_rules_inplace(std::span<double>(out), compiled);
  return out;
}

Distribution filtered_predict(const TransformerParams& teacher,
                              const CompiledRules& compiled,
                              std::span<const TokenId> ids,
                              std::size_t position) {
  return apply_rules(predict_masked_distribution(teacher, ids, position), compiled);
}

}  // namespace fd
