#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fairdistill/model.hpp"
#include "fairdistill/rules.hpp"

namespace fd {

// Where the equality rules sit relative to temperature softening.
enum class RuleOrder {
  kSoftenThenRules,  // softmax(z / T), then rules (default)
  kRulesThenSoften,  // rules on softmax(z), then re-temper p^(1/T)
};

struct DistillConfig {
  double temperature = 2.0;
  double alpha_ce = 5.0;
  double alpha_mlm = 2.0;
  double alpha_cos = 1.0;

  double mask_rate = 0.15;
  double mask_token_frac = 0.8;
  double keep_frac = 0.1;
  double random_frac = 0.1;

  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double max_grad_norm = 1.0;
  std::size_t warmup_steps = 0;
  // Linear decay to zero over the run when set; constant otherwise.
  bool linear_decay = true;

  std::size_t batch_size = 16;
  std::size_t grad_accum_steps = 1;
  std::size_t epochs = 3;
  std::uint64_t seed = 1;

  RuleOrder rule_order = RuleOrder::kSoftenThenRules;
  // Score L_ce only at masked positions instead of every non-special one.
  bool ce_masked_only = false;

  void validate() const;
};

// One sequence after MLM corruption. labels[i] is the original id at
// selected positions and -1 elsewhere.
struct MaskedSequence {
  std::vector<TokenId> ids;
  std::vector<TokenId> labels;
};

struct MaskedBatch {
  std::vector<MaskedSequence> sequences;
};

// exp(z/T) / sum exp(z/T) per row. T = 1 reproduces softmax_rows exactly.
template <typename T>
BasicTensor<T> soften(const BasicTensor<T>& logits, double temperature);

// Uniform in [0, 1) from the top 53 bits; keeps masking independent of the
// standard library's distribution implementations.
double uniform01(std::mt19937_64& rng);

// Each non-special position is selected with probability mask_rate (at least
// one is forced); selections become <mask>, stay, or become a random
// non-special id according to the configured split.
MaskedSequence mask_for_mlm(std::span<const TokenId> ids,
                            const DistillConfig& config, std::size_t vocab_size,
                            std::mt19937_64& rng);

// Rule-filtered, temperature-softened teacher targets for every position,
// row-major [L x V].
std::vector<float> teacher_soft_targets(const Tensor& teacher_logits,
                                        const CompiledRules* rules,
                                        const DistillConfig& config);

struct LossTerms {
  Tensor total, ce, mlm, cos;
};

// Per-sequence losses. L_ce = T^2 * mean over scored positions of
// -sum p_T log q_T; L_mlm = cross entropy of the raw student logits at the
// selected positions; L_cos = mean over non-pad positions of 1 - cos.
LossTerms distill_losses(const ForwardOutput<float>& teacher,
                         const ForwardOutput<float>& student,
                         std::span<const float> filtered_teacher_probs,
                         const MaskedSequence& sequence,
                         const DistillConfig& config);

// Positions whose original token is not special.
std::vector<std::size_t> scored_positions(const MaskedSequence& sequence,
                                          bool masked_only);

// --- optimizer ---------------------------------------------------------

struct AdamWConfig {
  double learning_rate = 5e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
};

struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::uint64_t step = 0;
};

double global_grad_norm(std::span<const Tensor> params);
// Scales all gradients by max_norm / norm when norm exceeds max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);
// Clip, then one bias-corrected AdamW step with decoupled weight decay.
// Returns the pre-clip gradient norm.
double adamw_update(std::span<Tensor> params, AdamState& state,
                    const AdamWConfig& config);

// --- training ----------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;  // optimizer updates so far
  double total = 0, ce = 0, mlm = 0, cos = 0;
  double lr = 0;
  double wall_ms = 0;
  bool updated = false;
};

// Tab-separated: step, L_total, L_ce, L_mlm, L_cos, lr, wall-clock ms.
std::string format_log_line(const StepMetrics& m);

double scheduled_lr(const DistillConfig& config, std::size_t update,
                    std::size_t total_updates);

// Owns the student's optimizer state and gradient-accumulation counter.
// The teacher is copied and frozen at construction.
class DistillTrainer {
 public:
  DistillTrainer(const TransformerParams& teacher, TransformerParams& student,
                 const CompiledRules* rules, DistillConfig config,
                 std::size_t total_updates = 0);

  // Forward both models, filter, compute losses, backpropagate. Parameters
  // change only on every grad_accum_steps-th call.
  StepMetrics step(const MaskedBatch& batch, std::uint64_t dropout_seed);
  // Applies any partially accumulated gradient. Returns true if it did.
  bool flush();

  std::size_t updates() const { return updates_; }
  const AdamState& optimizer_state() const { return adam_; }

 private:
  void apply_update();

  TransformerParams teacher_;
  TransformerParams& student_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  const CompiledRules* rules_;
  DistillConfig config_;
  std::size_t total_updates_;
  AdamState adam_;
  std::size_t micro_ = 0;
  std::size_t updates_ = 0;
};

// Plain MLM training (teacher pretraining).
class MlmTrainer {
 public:
  MlmTrainer(TransformerParams& model, DistillConfig config,
             std::size_t total_updates = 0);
  StepMetrics step(const MaskedBatch& batch, std::uint64_t dropout_seed);
  bool flush();
  std::size_t updates() const { return updates_; }

 private:
  void apply_update();

  TransformerParams& model_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  DistillConfig config_;
  std::size_t total_updates_;
  AdamState adam_;
  std::size_t micro_ = 0;
  std::size_t updates_ = 0;
};

using StepCallback = std::function<void(const StepMetrics&)>;

// Epoch loop shared by both trainers: per-epoch shuffle and per-sequence
// masking are seeded from (seed, epoch, sequence index) only, so two runs
// over the same data see identical batches regardless of rules.
void train_mlm(TransformerParams& model,
               std::span<const std::vector<TokenId>> data,
               const DistillConfig& config, const StepCallback& on_update = {});

void train_distill(const TransformerParams& teacher, TransformerParams& student,
                   const CompiledRules* rules,
                   std::span<const std::vector<TokenId>> data,
                   const DistillConfig& config,
                   const StepCallback& on_update = {});

// Mean over all selected positions of -log p(original), eval mode, with a
// fixed masking seed.
double mlm_eval_loss(const TransformerParams& params,
                     std::span<const std::vector<TokenId>> data,
                     const DistillConfig& masking, std::uint64_t seed);

}  // namespace fd
