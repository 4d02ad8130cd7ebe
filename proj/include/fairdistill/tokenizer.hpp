#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fairdistill/tensor.hpp"

namespace fd {

enum class CaseMode { kPreserve, kLower };

std::string_view case_mode_name(CaseMode mode);
CaseMode parse_case_mode(std::string_view name);

// Reserved ids.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kMaskId = 2;
inline constexpr TokenId kClsId = 3;
inline constexpr TokenId kSepId = 4;
inline constexpr TokenId kNumSpecial = 5;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kMaskToken = "<mask>";
inline constexpr std::string_view kClsToken = "<cls>";
inline constexpr std::string_view kSepToken = "<sep>";

inline bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }

// Word-level vocabulary. Immutable once constructed.
class Vocabulary {
 public:
  // tokens[0..4] must be the special tokens in reserved order.
  Vocabulary(std::vector<std::string> tokens, CaseMode mode);

  std::size_t size() const { return tokens_.size(); }
  CaseMode case_mode() const { return mode_; }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  // Looks up an already-normalized surface form.
  std::optional<TokenId> find(std::string_view surface) const;
  // Applies the vocabulary's case mode (ASCII-only lowering).
  std::string normalize(std::string_view surface) const;
  TokenId id_or_unk(std::string_view surface) const;

  // Vocabulary file bytes: "#vocab v1 case=<mode>" then one token per line.
  std::string serialize() const;
  std::uint32_t content_hash() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.mode_ == b.mode_ && a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  CaseMode mode_;
};

struct VocabOptions {
  std::size_t max_size = 1000;
  std::size_t min_count = 1;
  CaseMode case_mode = CaseMode::kLower;
};

// Most frequent whitespace tokens, ties broken lexicographically.
Vocabulary build_vocab(std::span<const std::string> lines,
                       const VocabOptions& options);

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocab(const std::filesystem::path& path);
Vocabulary parse_vocab(std::string_view text);

struct EncodeOptions {
  bool frame = true;            // wrap in <cls> ... <sep>
  std::size_t max_length = 0;   // 0 = unlimited; includes framing
};

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab,
                            const EncodeOptions& options = {});
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

std::vector<std::string> split_whitespace(std::string_view text);

}  // namespace fd
