#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fairdistill/tensor.hpp"

namespace fd {

// A probability vector over the vocabulary.
using Distribution = std::vector<double>;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 64;
  double dropout_rate = 0.1;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Half the layers, everything else shared with the teacher.
ModelConfig student_config(const ModelConfig& teacher);

template <typename T>
struct LayerParams {
  BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  BasicTensor<T> ln1_gain, ln1_bias;
  BasicTensor<T> ff1_w, ff1_b, ff2_w, ff2_b;
  BasicTensor<T> ln2_gain, ln2_bias;
};

// Post-LN encoder with learned positions and an MLM head
// (dense -> GELU -> layer norm -> untied projection to the vocabulary).
template <typename T>
struct BasicTransformerParams {
  ModelConfig config;
  BasicTensor<T> token_emb, pos_emb, emb_ln_gain, emb_ln_bias;
  std::vector<LayerParams<T>> layers;
  BasicTensor<T> head_w, head_b, head_ln_gain, head_ln_bias, out_w, out_b;

  // Handles in a fixed canonical order (checkpoint order).
  std::vector<std::pair<std::string, BasicTensor<T>>> named() const;
  std::vector<BasicTensor<T>> parameters() const;
  std::size_t parameter_count() const;
  void set_requires_grad(bool on);
  BasicTransformerParams clone() const;
};

using TransformerParams = BasicTransformerParams<float>;

std::size_t parameter_count(const ModelConfig& config);

// Zero-mean truncated normal (std 0.02, cut at 2 std) for weight matrices and
// embeddings, zero biases, unit layer-norm gains. Deterministic in seed.
TransformerParams init_params(const ModelConfig& config, std::uint64_t seed);

template <typename To, typename From>
BasicTransformerParams<To> cast_params(const BasicTransformerParams<From>& p,
                                       bool requires_grad);

template <typename T>
struct ForwardOutput {
  BasicTensor<T> hidden;  // [L x d_model], final encoder layer
  BasicTensor<T> logits;  // [L x V], pre-softmax MLM scores
};

inline constexpr double kLayerNormEps = 1e-5;

// Dropout is applied only when train_mode is set; masks derive from seed.
// Pad tokens are excluded as attention keys.
template <typename T>
ForwardOutput<T> forward(const BasicTransformerParams<T>& params,
                         std::span<const TokenId> ids, bool train_mode,
                         std::uint64_t seed);

// Softmax of the logits at `position`, which must hold the mask id.
Distribution predict_masked_distribution(const TransformerParams& params,
                                         std::span<const TokenId> ids,
                                         std::size_t position);

// Final hidden state at position 0, eval mode.
std::vector<double> pooled_representation(const TransformerParams& params,
                                          std::span<const TokenId> ids);

// Anything that can fill a masked slot and expose hidden states.
class MaskedLanguageModel {
 public:
  virtual ~MaskedLanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual Distribution masked_distribution(std::span<const TokenId> ids,
                                           std::size_t position) const = 0;
  virtual std::vector<double> hidden_state(std::span<const TokenId> ids,
                                           std::size_t position) const = 0;
};

class TransformerMlm : public MaskedLanguageModel {
 public:
  explicit TransformerMlm(const TransformerParams& params) : params_(params) {}
  std::size_t vocab_size() const override { return params_.config.vocab_size; }
  Distribution masked_distribution(std::span<const TokenId> ids,
                                   std::size_t position) const override;
  std::vector<double> hidden_state(std::span<const TokenId> ids,
                                   std::size_t position) const override;
  const TransformerParams& params() const { return params_; }

 private:
  const TransformerParams& params_;
};

// --- checkpoint ------------------------------------------------------------
// Layout (little-endian):
//   "FDCK" | u32 version | u32 vocab_size d_model n_heads n_layers d_ff
//   max_seq_len | f32 dropout_rate | u32 vocab_hash | u32 array_count |
//   per array: u32 name_len, name bytes, u32 rank, u32 dims[rank], f32 data
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TransformerParams params;
  std::uint32_t vocab_hash = 0;
};

std::string serialize_checkpoint(const TransformerParams& params,
                                 std::uint32_t vocab_hash);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const TransformerParams& params, std::uint32_t vocab_hash,
                     const std::filesystem::path& path);
// Throws HashMismatchError when expected_vocab_hash is given and differs.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint32_t> expected_vocab_hash =
                               std::nullopt);

}  // namespace fd
