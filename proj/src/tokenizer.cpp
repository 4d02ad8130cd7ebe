#include "fairdistill/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "fairdistill/hash.hpp"

namespace fd {

std::string_view case_mode_name(CaseMode mode) {
  return mode == CaseMode::kLower ? "lower" : "preserve";
}

CaseMode parse_case_mode(std::string_view name) {
  if (name == "lower") return CaseMode::kLower;
  if (name == "preserve") return CaseMode::kPreserve;
  throw ConfigError("unknown case mode '" + std::string(name) +
                    "' (expected lower or preserve)");
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
           c == '\v';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s{
      std::string(kPadToken), std::string(kUnkToken), std::string(kMaskToken),
      std::string(kClsToken), std::string(kSepToken)};
  return s;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens, CaseMode mode)
    : tokens_(std::move(tokens)), mode_(mode) {
  const auto& specials = special_tokens();
  if (tokens_.size() < specials.size())
    throw InputError("vocabulary is missing the reserved special tokens");
  for (std::size_t i = 0; i < specials.size(); ++i)
    if (tokens_[i] != specials[i])
      throw InputError("vocabulary id " + std::to_string(i) + " must be " +
                       specials[i] + ", found '" + tokens_[i] + "'");
  ids_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty() ||
        split_whitespace(tokens_[i]).size() != 1 ||
        split_whitespace(tokens_[i])[0] != tokens_[i])
      throw InputError("vocabulary token at id " + std::to_string(i) +
                       " is empty or contains whitespace");
    if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
      throw InputError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw IndexError("token id " + std::to_string(id) +
                     " outside vocabulary of size " +
                     std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view surface) const {
  auto it = ids_.find(std::string(surface));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::string Vocabulary::normalize(std::string_view surface) const {
  std::string s(surface);
  if (mode_ == CaseMode::kLower)
    for (char& c : s)
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return s;
}

TokenId Vocabulary::id_or_unk(std::string_view surface) const {
  return find(normalize(surface)).value_or(kUnkId);
}

std::string Vocabulary::serialize() const {
  std::string out = "#vocab v1 case=";
  out += case_mode_name(mode_);
  out += '\n';
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

std::uint32_t Vocabulary::content_hash() const { return fnv1a32(serialize()); }

Vocabulary build_vocab(std::span<const std::string> lines,
                       const VocabOptions& options) {
  if (options.max_size <= static_cast<std::size_t>(kNumSpecial))
    throw ConfigError("vocabulary max_size must exceed the " +
                      std::to_string(kNumSpecial) + " special tokens");
  const auto& specials = special_tokens();
  // Normalization is the vocabulary's; build a throwaway instance for it.
  Vocabulary normalizer(specials, options.case_mode);
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& line : lines)
    for (auto& tok : split_whitespace(line)) {
      ++total;
      std::string norm = normalizer.normalize(tok);
      if (std::find(specials.begin(), specials.end(), norm) != specials.end())
        continue;
      ++counts[norm];
    }
  if (total == 0) throw InputError("cannot build a vocabulary from an empty corpus");

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                          counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> tokens = specials;
  for (const auto& [tok, n] : ranked) {
    if (tokens.size() >= options.max_size) break;
    if (n < options.min_count) break;
    tokens.push_back(tok);
  }
  return Vocabulary(std::move(tokens), options.case_mode);
}

Vocabulary parse_vocab(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty vocabulary file");
  const std::string prefix = "#vocab v1 case=";
  if (line.rfind(prefix, 0) != 0)
    throw ParseError(1, "expected header '#vocab v1 case=<mode>'");
  CaseMode mode;
  try {
    mode = parse_case_mode(line.substr(prefix.size()));
  } catch (const ConfigError& e) {
    throw ParseError(1, e.what());
  }
  std::vector<std::string> tokens;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocabulary(std::move(tokens), mode);
}

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vocabulary file " + path.string());
  const std::string bytes = vocab.serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing " + path.string());
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read vocabulary file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_vocab(ss.str());
}

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab,
                            const EncodeOptions& options) {
  std::vector<TokenId> ids;
  if (options.frame) ids.push_back(kClsId);
  for (const auto& tok : split_whitespace(text)) ids.push_back(vocab.id_or_unk(tok));
  if (options.max_length > 0) {
    const std::size_t limit =
        options.frame ? std::max<std::size_t>(options.max_length, 2) - 1
                      : options.max_length;
    if (ids.size() > limit) ids.resize(limit);
  }
  if (options.frame) ids.push_back(kSepId);
  return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

}  // namespace fd
