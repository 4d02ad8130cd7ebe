#include "fairdistill/harness.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "fairdistill/hash.hpp"

namespace fd {

using nlohmann::json;

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(line);
  }
  return out;
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw InputError("write failed for " + path.string());
}

CorpusSplit split_heldout(std::span<const std::string> lines) {
  CorpusSplit s;
  for (std::size_t i = 0; i < lines.size(); ++i)
    (i % 20 == 19 ? s.heldout : s.train).push_back(lines[i]);
  return s;
}

std::vector<std::vector<TokenId>> encode_lines(std::span<const std::string> lines,
                                               const Vocabulary& vocab,
                                               std::size_t max_length) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(lines.size());
  EncodeOptions opt;
  opt.max_length = max_length;
  for (const auto& l : lines) out.push_back(encode(l, vocab, opt));
  return out;
}

std::vector<LabeledExample> parse_labeled(std::string_view text) {
  std::vector<LabeledExample> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = line.rfind('\t');
    const std::string label = tab == std::string::npos ? "" : line.substr(tab + 1);
    if (label != "0" && label != "1")
      throw InputError("labeled line " + std::to_string(line_no) +
                       ": expected 'sentence<TAB>0|1'");
    out.push_back({line.substr(0, tab), label == "1" ? 1 : 0});
  }
  return out;
}

bool in_validation_split(std::string_view sentence) {
  return fnv1a32(sentence) % 5 == 0;
}

void FinetuneConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (!(adam_epsilon > 0)) throw ConfigError("adam_epsilon must be positive");
  if (batch_size == 0 || grad_accum_steps == 0 || epochs == 0)
    throw ConfigError("batch size, accumulation steps and epochs must be positive");
}

FinetuneResult finetune_classify(const TransformerParams& model,
                                 const Vocabulary& vocab,
                                 std::span<const LabeledExample> examples,
                                 const FinetuneConfig& config) {
  config.validate();
  if (examples.size() < 10)
    throw InputError("need at least 10 labeled lines, got " +
                     std::to_string(examples.size()));
  EncodeOptions opt;
  opt.max_length = model.config.max_seq_len;
  std::vector<std::vector<TokenId>> train_x, val_x;
  std::vector<TokenId> train_y, val_y;
  for (const auto& ex : examples) {
    auto ids = encode(ex.text, vocab, opt);
    if (in_validation_split(ex.text)) {
      val_x.push_back(std::move(ids));
      val_y.push_back(ex.label);
    } else {
      train_x.push_back(std::move(ids));
      train_y.push_back(ex.label);
    }
  }
  if (train_x.empty() || val_x.empty())
    throw InputError("hash split left an empty train or validation set");

  const std::size_t d = model.config.d_model;
  TransformerParams encoder = model.clone();
  encoder.set_requires_grad(!config.freeze_encoder);
  std::mt19937_64 init_rng(derive_seed(config.seed, 0x4ead));
  std::normal_distribution<double> normal(0.0, 0.02);
  std::vector<float> w0(d * 2);
  for (auto& v : w0) v = static_cast<float>(normal(init_rng));
  Tensor head_w({d, 2}, w0, true), head_b = Tensor::zeros({2}, true);

  std::vector<Tensor> params{head_w, head_b};
  if (!config.freeze_encoder)
    for (const auto& p : encoder.parameters()) params.push_back(p);
  AdamState state;
  AdamWConfig adam;
  adam.learning_rate = config.learning_rate;
  adam.weight_decay = config.weight_decay;
  adam.epsilon = config.adam_epsilon;
  adam.max_grad_norm = config.max_grad_norm;

  const std::size_t first_row = 0;
  auto logits_for = [&](const std::vector<TokenId>& ids, bool train,
                        std::uint64_t seed) {
    const auto out = forward(encoder, ids, train, seed);
    const auto pooled = select_rows(out.hidden, std::span<const std::size_t>(&first_row, 1));
    return add_row(matmul(pooled, head_w), head_b);
  };

  FinetuneResult result;
  result.n_train = train_x.size();
  result.n_validation = val_x.size();
  std::vector<std::size_t> order(train_x.size());
  std::size_t micro = 0;
  std::uint64_t example_step = 0;
  const double denom = static_cast<double>(config.batch_size * config.grad_accum_steps);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(config.seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng() % i]);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t r = order[j];
        const TokenId label = train_y[r];
        auto loss = cross_entropy_rows(
            softmax_rows(logits_for(train_x[r], !config.freeze_encoder,
                                    derive_seed(config.seed ^ 0xf1e7, example_step++))),
            std::span<const TokenId>(&label, 1));
        if (!std::isfinite(loss.item())) throw NumericError("non-finite classifier loss");
        epoch_loss += loss.item();
        scale(loss, static_cast<float>(1.0 / denom)).backward();
      }
      if (++micro == config.grad_accum_steps) {
        adamw_update(params, state, adam);
        for (auto& p : params) p.zero_grad();
        micro = 0;
      }
    }
    result.final_train_loss = epoch_loss / static_cast<double>(order.size());
  }
  if (micro != 0) adamw_update(params, state, adam);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < val_x.size(); ++i) {
    const auto logits = logits_for(val_x[i], false, 0);
    const int pred = logits.data()[1] > logits.data()[0] ? 1 : 0;
    correct += pred == val_y[i];
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(val_x.size());
  return result;
}

TransformerParams pretrain_teacher(const ModelConfig& model,
                                   std::span<const std::vector<TokenId>> train,
                                   const DistillConfig& config,
                                   const StepCallback& on_update) {
  model.validate();
  config.validate();
  auto params = init_params(model, teacher_init_seed(config));
  train_mlm(params, train, config, on_update);
  return params;
}

TransformerParams distill_student(const TransformerParams& teacher,
                                  const CompiledRules* rules,
                                  std::span<const std::vector<TokenId>> train,
                                  const DistillConfig& config,
                                  std::size_t student_layers,
                                  const StepCallback& on_update) {
  config.validate();
  ModelConfig scfg = student_config(teacher.config);
  if (student_layers) scfg.n_layers = student_layers;
  scfg.validate();
  auto student = init_params(scfg, derive_seed(config.seed, 0x57d0));
  train_distill(teacher, student, rules, train, config, on_update);
  return student;
}

std::uint64_t teacher_init_seed(const DistillConfig& config) {
  return derive_seed(config.seed, 0x7eac);
}

std::uint64_t heldout_eval_seed(const DistillConfig& config) {
  return derive_seed(config.seed, 0xe7a1);
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".meta.json");
}

void write_sidecar(const std::filesystem::path& checkpoint, const json& meta) {
  write_text(sidecar_path(checkpoint), meta.dump(2) + "\n");
}

json read_sidecar(const std::filesystem::path& checkpoint) {
  const auto path = sidecar_path(checkpoint);
  std::ifstream in(path);
  if (!in) throw InputError("missing checkpoint metadata " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("malformed checkpoint metadata " + path.string() + ": " + e.what());
  }
}

std::string file_hash(const std::filesystem::path& path) {
  return hex32(fnv1a32_file(path));
}

json distill_config_json(const DistillConfig& c) {
  return {{"temperature", c.temperature},
          {"alpha_ce", c.alpha_ce},
          {"alpha_mlm", c.alpha_mlm},
          {"alpha_cos", c.alpha_cos},
          {"mask_rate", c.mask_rate},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"adam_epsilon", c.adam_epsilon},
          {"max_grad_norm", c.max_grad_norm},
          {"warmup_steps", c.warmup_steps},
          {"linear_decay", c.linear_decay},
          {"batch_size", c.batch_size},
          {"gradient_accumulation_steps", c.grad_accum_steps},
          {"num_train_epochs", c.epochs},
          {"seed", c.seed},
          {"rule_order", c.rule_order == RuleOrder::kSoftenThenRules
                             ? "soften-then-rules"
                             : "rules-then-soften"},
          {"ce_masked_only", c.ce_masked_only}};
}

json model_config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
          {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
          {"dropout", c.dropout_rate}};
}

}  // namespace fd
