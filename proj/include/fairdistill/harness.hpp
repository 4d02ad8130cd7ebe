#pragma once

// Pipeline stages shared by the command-line tool and the end-to-end tests.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fairdistill/distill.hpp"
#include "fairdistill/model.hpp"
#include "fairdistill/tokenizer.hpp"

namespace fd {

// Non-empty lines, trailing '\r' removed.
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

// Every 20th line (index % 20 == 19) is held out.
struct CorpusSplit {
  std::vector<std::string> train;
  std::vector<std::string> heldout;
};
CorpusSplit split_heldout(std::span<const std::string> lines);

// Framed ids truncated to max_length.
std::vector<std::vector<TokenId>> encode_lines(std::span<const std::string> lines,
                                               const Vocabulary& vocab,
                                               std::size_t max_length);

struct LabeledExample {
  std::string text;
  int label = 0;  // 0 or 1
};
std::vector<LabeledExample> parse_labeled(std::string_view text);

// Deterministic 20% validation split by sentence hash.
bool in_validation_split(std::string_view sentence);

struct FinetuneConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double adam_epsilon = 1e-8;
  double max_grad_norm = 1.0;
  std::size_t batch_size = 4;
  std::size_t grad_accum_steps = 1;
  std::size_t epochs = 3;
  std::uint64_t seed = 1;
  // Train only the head on frozen encoder features.
  bool freeze_encoder = false;
  void validate() const;
};

struct FinetuneResult {
  double accuracy = 0;
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
  double final_train_loss = 0;
};

// Two-way softmax head on the position-0 hidden state. The encoder is a copy,
// so `model` is never modified.
FinetuneResult finetune_classify(const TransformerParams& model,
                                 const Vocabulary& vocab,
                                 std::span<const LabeledExample> examples,
                                 const FinetuneConfig& config);

// Checkpoint metadata lives next to the checkpoint as "<ckpt>.meta.json".
// Pipeline stages with the seeds the CLI uses, so scripted runs and the
// command line produce identical checkpoints.
TransformerParams pretrain_teacher(const ModelConfig& model,
                                   std::span<const std::vector<TokenId>> train,
                                   const DistillConfig& config,
                                   const StepCallback& on_update = {});
// student_layers == 0 keeps the teacher/2 default.
TransformerParams distill_student(const TransformerParams& teacher,
                                  const CompiledRules* rules,
                                  std::span<const std::vector<TokenId>> train,
                                  const DistillConfig& config,
                                  std::size_t student_layers = 0,
                                  const StepCallback& on_update = {});
std::uint64_t teacher_init_seed(const DistillConfig& config);
// Masking seed for held-out MLM loss.
std::uint64_t heldout_eval_seed(const DistillConfig& config);

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);
void write_sidecar(const std::filesystem::path& checkpoint, const nlohmann::json& meta);
nlohmann::json read_sidecar(const std::filesystem::path& checkpoint);

std::string file_hash(const std::filesystem::path& path);

nlohmann::json distill_config_json(const DistillConfig& c);
nlohmann::json model_config_json(const ModelConfig& c);

}  // namespace fd
