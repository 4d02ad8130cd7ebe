#include "fairdistill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fairdistill/hash.hpp"
#include "fairdistill/tokenizer.hpp"

namespace fd {

void DistillConfig::validate() const {
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  if (alpha_ce < 0 || alpha_mlm < 0 || alpha_cos < 0)
    throw ConfigError("loss weights must be non-negative");
  if (alpha_ce == 0 && alpha_mlm == 0 && alpha_cos == 0)
    throw ConfigError("at least one loss weight must be positive");
  if (!(mask_rate > 0 && mask_rate <= 1))
    throw ConfigError("mask_rate must lie in (0, 1]");
  if (mask_token_frac < 0 || keep_frac < 0 || random_frac < 0 ||
      std::abs(mask_token_frac + keep_frac + random_frac - 1.0) > 1e-9)
    throw ConfigError("mask/keep/random fractions must be non-negative and sum to 1");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (!(adam_epsilon > 0)) throw ConfigError("adam_epsilon must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (grad_accum_steps == 0)
    throw ConfigError("gradient_accumulation_steps must be positive");
}

template <typename T>
BasicTensor<T> soften(const BasicTensor<T>& logits, double temperature) {
  if (!(temperature > 0))
    throw ConfigError("temperature must be positive, got " +
                      std::to_string(temperature));
  return softmax_rows(scale(logits, static_cast<T>(1.0 / temperature)));
}

template Tensor soften(const Tensor&, double);
template Tensor64 soften(const Tensor64&, double);

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

MaskedSequence mask_for_mlm(std::span<const TokenId> ids,
                            const DistillConfig& config, std::size_t vocab_size,
                            std::mt19937_64& rng) {
  MaskedSequence out;
  out.ids.assign(ids.begin(), ids.end());
  out.labels.assign(ids.size(), -1);
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!is_special(ids[i])) candidates.push_back(i);
  if (candidates.empty())
    throw InputError("sequence has no maskable (non-special) positions");

  std::vector<std::size_t> chosen;
  for (std::size_t pos : candidates)
    if (uniform01(rng) < config.mask_rate) chosen.push_back(pos);
  if (chosen.empty()) chosen.push_back(candidates[rng() % candidates.size()]);

  const std::uint64_t n_regular = vocab_size - static_cast<std::size_t>(kNumSpecial);
  for (std::size_t pos : chosen) {
    out.labels[pos] = ids[pos];
    const double r = uniform01(rng);
    if (r < config.mask_token_frac) {
      out.ids[pos] = kMaskId;
    } else if (r < config.mask_token_frac + config.keep_frac) {
      // unchanged
    } else if (n_regular > 0) {
      out.ids[pos] = static_cast<TokenId>(kNumSpecial + rng() % n_regular);
    }
  }
  return out;
}

std::vector<float> teacher_soft_targets(const Tensor& teacher_logits,
                                        const CompiledRules* rules,
                                        const DistillConfig& config) {
  const std::size_t V = teacher_logits.cols(), L = teacher_logits.rows();
  std::vector<float> out;
  if (config.rule_order == RuleOrder::kSoftenThenRules) {
    const Tensor p = soften(teacher_logits, config.temperature);
    out.assign(p.data().begin(), p.data().end());
    if (rules && !rules->empty())
      for (std::size_t r = 0; r < L; ++r)
        apply_rules_inplace(std::span<float>(out.data() + r * V, V), *rules);
    return out;
  }
  const Tensor p = softmax_rows(teacher_logits);
  out.assign(p.data().begin(), p.data().end());
  const double inv_t = 1.0 / config.temperature;
  for (std::size_t r = 0; r < L; ++r) {
    std::span<float> row(out.data() + r * V, V);
    if (rules && !rules->empty()) apply_rules_inplace(row, *rules);
    double z = 0;
    std::vector<double> tmp(V);
    for (std::size_t j = 0; j < V; ++j) {
      tmp[j] = std::pow(std::max<double>(row[j], kProbFloor), inv_t);
      z += tmp[j];
    }
    for (std::size_t j = 0; j < V; ++j) row[j] = static_cast<float>(tmp[j] / z);
    // Re-tempering keeps equal entries equal; re-apply so equality is exact
    // after float rounding as well.
    if (rules && !rules->empty()) apply_rules_inplace(row, *rules);
  }
  return out;
}

std::vector<std::size_t> scored_positions(const MaskedSequence& sequence,
                                          bool masked_only) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < sequence.ids.size(); ++i) {
    const bool selected = sequence.labels[i] >= 0;
    if (selected || (!masked_only && !is_special(sequence.ids[i]))) out.push_back(i);
  }
  return out;
}

LossTerms distill_losses(const ForwardOutput<float>& teacher,
                         const ForwardOutput<float>& student,
                         std::span<const float> filtered_teacher_probs,
                         const MaskedSequence& sequence,
                         const DistillConfig& config) {
  if (teacher.hidden.cols() != student.hidden.cols())
    throw ConfigError("teacher and student hidden sizes differ (" +
                      std::to_string(teacher.hidden.cols()) + " vs " +
                      std::to_string(student.hidden.cols()) + ")");
  if (teacher.logits.shape() != student.logits.shape())
    throw ConfigError("teacher and student logits differ in shape: " +
                      shape_str(teacher.logits.shape()) + " vs " +
                      shape_str(student.logits.shape()));
  const std::size_t V = student.logits.cols(), L = student.logits.rows();
  if (filtered_teacher_probs.size() != L * V)
    throw DimensionError("soft targets do not cover [" + std::to_string(L) +
                         " x " + std::to_string(V) + "]");
  if (sequence.ids.size() != L || sequence.labels.size() != L)
    throw DimensionError("masked sequence length does not match model output");

  const double T = config.temperature;
  LossTerms out;

  const auto scored = scored_positions(sequence, config.ce_masked_only);
  if (scored.empty()) {
    out.ce = Tensor::scalar(0.0f);
  } else {
    std::vector<float> targets(scored.size() * V);
    for (std::size_t i = 0; i < scored.size(); ++i)
      std::copy_n(filtered_teacher_probs.data() + scored[i] * V, V,
                  targets.data() + i * V);
    const auto log_q = log_softmax_rows(
        scale(select_rows(student.logits, std::span<const std::size_t>(scored)),
              static_cast<float>(1.0 / T)));
    out.ce = scale(soft_cross_entropy_rows(log_q, std::span<const float>(targets)),
                   static_cast<float>(T * T));
  }

  std::vector<std::size_t> masked;
  std::vector<TokenId> labels;
  for (std::size_t i = 0; i < L; ++i)
    if (sequence.labels[i] >= 0) {
      masked.push_back(i);
      labels.push_back(sequence.labels[i]);
    }
  if (masked.empty()) {
    out.mlm = Tensor::scalar(0.0f);
  } else {
    out.mlm = cross_entropy_rows(
        softmax_rows(select_rows(student.logits, std::span<const std::size_t>(masked))),
        std::span<const TokenId>(labels));
  }

  std::vector<std::size_t> non_pad;
  for (std::size_t i = 0; i < L; ++i)
    if (sequence.ids[i] != kPadId) non_pad.push_back(i);
  out.cos = cosine_distance_rows(
      select_rows(student.hidden, std::span<const std::size_t>(non_pad)),
      select_rows(teacher.hidden, std::span<const std::size_t>(non_pad)));

  Tensor total;
  auto accumulate = [&](const Tensor& term, double alpha) {
    if (alpha == 0) return;
    const Tensor weighted = scale(term, static_cast<float>(alpha));
    total = total.defined() ? add(total, weighted) : weighted;
  };
  accumulate(out.ce, config.alpha_ce);
  accumulate(out.mlm, config.alpha_mlm);
  accumulate(out.cos, config.alpha_cos);
  out.total = total;
  return out;
}

// --- optimizer ---------------------------------------------------------

double global_grad_norm(std::span<const Tensor> params) {
  double s = 0;
  for (const auto& p : params)
    for (float g : p.grad()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const double c = max_norm / norm;
    for (auto& p : params)
      for (float& g : p.mutable_grad()) g = static_cast<float>(g * c);
  }
  return norm;
}

double adamw_update(std::span<Tensor> params, AdamState& state,
                    const AdamWConfig& config) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0f);
      state.v.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.m.size() != params.size())
    throw DimensionError("optimizer state does not match parameter list");
  const double norm = clip_grad_norm(params, config.max_grad_norm);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const double lr = config.learning_rate;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_data();
    const auto g = params[k].grad();
    if (g.size() != w.size())
      throw ContractError("parameter " + std::to_string(k) + " has no gradient");
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(config.beta1 * m[i] + (1 - config.beta1) * gi);
      v[i] = static_cast<float>(config.beta2 * v[i] + (1 - config.beta2) * gi * gi);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double wi = w[i];
      wi -= lr * config.weight_decay * wi;
      wi -= lr * mhat / (std::sqrt(vhat) + config.epsilon);
      w[i] = static_cast<float>(wi);
    }
  }
  return norm;
}

// --- training ----------------------------------------------------------

std::string format_log_line(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.6f\t%.6g\t%.3f", m.step,
                m.total, m.ce, m.mlm, m.cos, m.lr, m.wall_ms);
  return buf;
}

double scheduled_lr(const DistillConfig& config, std::size_t update,
                    std::size_t total_updates) {
  const double base = config.learning_rate;
  if (update < config.warmup_steps)
    return base * static_cast<double>(update + 1) /
           static_cast<double>(config.warmup_steps);
  if (!config.linear_decay || total_updates == 0 ||
      total_updates <= config.warmup_steps)
    return base;
  const double remaining =
      static_cast<double>(total_updates) - static_cast<double>(update);
  return base * std::max(0.0, remaining) /
         static_cast<double>(total_updates - config.warmup_steps);
}

namespace {

void require_finite(const Tensor& t, const std::string& name) {
  for (float v : t.data())
    if (!std::isfinite(v))
      throw NumericError("non-finite value in " + name + " " + shape_str(t.shape()));
}

void require_finite_grads(const std::vector<Tensor>& params,
                          const std::vector<std::string>& names) {
  for (std::size_t k = 0; k < params.size(); ++k)
    for (float g : params[k].grad())
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient for parameter " + names[k]);
}

AdamWConfig adam_config(const DistillConfig& c, double lr) {
  AdamWConfig a;
  a.learning_rate = lr;
  a.weight_decay = c.weight_decay;
  a.beta1 = c.adam_beta1;
  a.beta2 = c.adam_beta2;
  a.epsilon = c.adam_epsilon;
  a.max_grad_norm = c.max_grad_norm;
  return a;
}

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void split_named(const TransformerParams& p, std::vector<Tensor>& params,
                 std::vector<std::string>& names) {
  for (auto& [name, t] : p.named()) {
    params.push_back(t);
    names.push_back(name);
  }
}

}  // namespace

DistillTrainer::DistillTrainer(const TransformerParams& teacher,
                               TransformerParams& student,
                               const CompiledRules* rules, DistillConfig config,
                               std::size_t total_updates)
    : teacher_(teacher.clone()),
      student_(student),
      rules_(rules),
      config_(config),
      total_updates_(total_updates) {
  config_.validate();
  teacher_.set_requires_grad(false);
  const auto& tc = teacher.config;
  const auto& sc = student.config;
  if (tc.vocab_size != sc.vocab_size || tc.d_model != sc.d_model ||
      tc.max_seq_len != sc.max_seq_len)
    throw ConfigError("teacher and student must share vocabulary size, d_model "
                      "and max_seq_len");
  if (rules_ && rules_->vocab_size != tc.vocab_size)
    throw ConfigError("rules were compiled for a different vocabulary size");
  student_.set_requires_grad(true);
  split_named(student_, params_, names_);
}

StepMetrics DistillTrainer::step(const MaskedBatch& batch,
                                 std::uint64_t dropout_seed) {
  const auto t0 = Clock::now();
  if (batch.sequences.empty()) throw InputError("empty batch");
  StepMetrics m;
  const double denom =
      static_cast<double>(batch.sequences.size() * config_.grad_accum_steps);
  for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
    const auto& seq = batch.sequences[i];
    const auto t_out = forward(teacher_, seq.ids, false, 0);
    require_finite(t_out.logits, "teacher.logits");
    const auto targets = teacher_soft_targets(t_out.logits, rules_, config_);
    const auto s_out = forward(student_, seq.ids, true, derive_seed(dropout_seed, i));
    require_finite(s_out.hidden, "student.hidden");
    require_finite(s_out.logits, "student.logits");
    auto terms = distill_losses(t_out, s_out, targets, seq, config_);
    require_finite(terms.ce, "L_ce");
    require_finite(terms.mlm, "L_mlm");
    require_finite(terms.cos, "L_cos");
    require_finite(terms.total, "L_total");
    const double n = static_cast<double>(batch.sequences.size());
    m.total += terms.total.item() / n;
    m.ce += terms.ce.item() / n;
    m.mlm += terms.mlm.item() / n;
    m.cos += terms.cos.item() / n;
    scale(terms.total, static_cast<float>(1.0 / denom)).backward();
  }
  require_finite_grads(params_, names_);
  m.lr = scheduled_lr(config_, updates_, total_updates_);
  if (++micro_ == config_.grad_accum_steps) {
    apply_update();
    m.updated = true;
  }
  m.step = updates_;
  m.wall_ms = elapsed_ms(t0);
  return m;
}

void DistillTrainer::apply_update() {
  adamw_update(params_, adam_,
               adam_config(config_, scheduled_lr(config_, updates_, total_updates_)));
  for (auto& p : params_) p.zero_grad();
  micro_ = 0;
  ++updates_;
}

bool DistillTrainer::flush() {
  if (micro_ == 0) return false;
  apply_update();
  return true;
}

MlmTrainer::MlmTrainer(TransformerParams& model, DistillConfig config,
                       std::size_t total_updates)
    : model_(model), config_(config), total_updates_(total_updates) {
  config_.validate();
  model_.set_requires_grad(true);
  split_named(model_, params_, names_);
}

StepMetrics MlmTrainer::step(const MaskedBatch& batch, std::uint64_t dropout_seed) {
  const auto t0 = Clock::now();
  if (batch.sequences.empty()) throw InputError("empty batch");
  StepMetrics m;
  const double denom =
      static_cast<double>(batch.sequences.size() * config_.grad_accum_steps);
  for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
    const auto& seq = batch.sequences[i];
    const auto out = forward(model_, seq.ids, true, derive_seed(dropout_seed, i));
    require_finite(out.logits, "logits");
    std::vector<std::size_t> masked;
    std::vector<TokenId> labels;
    for (std::size_t p = 0; p < seq.labels.size(); ++p)
      if (seq.labels[p] >= 0) {
        masked.push_back(p);
        labels.push_back(seq.labels[p]);
      }
    if (masked.empty()) continue;
    auto loss = cross_entropy_rows(
        softmax_rows(select_rows(out.logits, std::span<const std::size_t>(masked))),
        std::span<const TokenId>(labels));
    require_finite(loss, "L_mlm");
    m.mlm += loss.item() / static_cast<double>(batch.sequences.size());
    scale(loss, static_cast<float>(1.0 / denom)).backward();
  }
  m.total = m.mlm;
  require_finite_grads(params_, names_);
  m.lr = scheduled_lr(config_, updates_, total_updates_);
  if (++micro_ == config_.grad_accum_steps) {
    apply_update();
    m.updated = true;
  }
  m.step = updates_;
  m.wall_ms = elapsed_ms(t0);
  return m;
}

void MlmTrainer::apply_update() {
  adamw_update(params_, adam_,
               adam_config(config_, scheduled_lr(config_, updates_, total_updates_)));
  for (auto& p : params_) p.zero_grad();
  micro_ = 0;
  ++updates_;
}

bool MlmTrainer::flush() {
  if (micro_ == 0) return false;
  apply_update();
  return true;
}

namespace {

std::size_t total_updates_for(std::size_t n, const DistillConfig& c) {
  const std::size_t batches = (n + c.batch_size - 1) / c.batch_size;
  return (c.epochs * batches + c.grad_accum_steps - 1) / c.grad_accum_steps;
}

template <typename Trainer>
void run_epochs(Trainer& trainer, std::span<const std::vector<TokenId>> data,
                const DistillConfig& config, std::size_t vocab_size,
                const StepCallback& on_update) {
  if (data.empty()) throw InputError("no training sequences");
  std::uint64_t micro_step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(config.seed, epoch);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(epoch_seed);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng() % i]);

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      MaskedBatch batch;
      for (std::size_t j = start; j < end; ++j) {
        std::mt19937_64 mask_rng(derive_seed(epoch_seed, order[j]));
        batch.sequences.push_back(
            mask_for_mlm(data[order[j]], config, vocab_size, mask_rng));
      }
      const auto m = trainer.step(batch, derive_seed(config.seed ^ 0xd50ull, micro_step++));
      if (m.updated && on_update) on_update(m);
    }
  }
  if (trainer.flush() && on_update) {
    StepMetrics m;
    m.step = trainer.updates();
    m.updated = true;
    on_update(m);
  }
}

}  // namespace

void train_mlm(TransformerParams& model, std::span<const std::vector<TokenId>> data,
               const DistillConfig& config, const StepCallback& on_update) {
  MlmTrainer trainer(model, config, total_updates_for(data.size(), config));
  run_epochs(trainer, data, config, model.config.vocab_size, on_update);
}

void train_distill(const TransformerParams& teacher, TransformerParams& student,
                   const CompiledRules* rules,
                   std::span<const std::vector<TokenId>> data,
                   const DistillConfig& config, const StepCallback& on_update) {
  DistillTrainer trainer(teacher, student, rules, config,
                         total_updates_for(data.size(), config));
  run_epochs(trainer, data, config, student.config.vocab_size, on_update);
}

double mlm_eval_loss(const TransformerParams& params,
                     std::span<const std::vector<TokenId>> data,
                     const DistillConfig& masking, std::uint64_t seed) {
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::mt19937_64 rng(derive_seed(seed, i));
    const auto seq = mask_for_mlm(data[i], masking, params.config.vocab_size, rng);
    const auto out = forward(params, seq.ids, false, 0);
    std::vector<std::size_t> masked;
    for (std::size_t p = 0; p < seq.labels.size(); ++p)
      if (seq.labels[p] >= 0) masked.push_back(p);
    const auto probs =
        softmax_rows(select_rows(out.logits, std::span<const std::size_t>(masked)));
    const std::size_t V = probs.cols();
    for (std::size_t r = 0; r < masked.size(); ++r) {
      const auto label = static_cast<std::size_t>(seq.labels[masked[r]]);
      total -= std::log(std::max<double>(probs.data()[r * V + label], kProbFloor));
      ++count;
    }
  }
  if (count == 0) throw InputError("no held-out positions to score");
  return total / static_cast<double>(count);
}

}  // namespace fd
