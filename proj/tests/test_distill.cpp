#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "fairdistill/distill.hpp"
#include "fairdistill/error.hpp"
#include "fairdistill/rules.hpp"
#include "fairdistill/tokenizer.hpp"

using namespace fd;

namespace {

ModelConfig small_config(std::size_t V, std::size_t layers) {
  ModelConfig c;
  c.vocab_size = V;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ff = 32;
  c.max_seq_len = 12;
  c.dropout_rate = 0.0;
  return c;
}

std::string params_bytes(const TransformerParams& p) { return serialize_checkpoint(p, 0); }

MaskedBatch fixed_batch(std::span<const std::vector<TokenId>> data,
                        const DistillConfig& cfg, std::size_t V, std::uint64_t seed) {
  MaskedBatch b;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::mt19937_64 rng(seed + i);
    b.sequences.push_back(mask_for_mlm(data[i], cfg, V, rng));
  }
  return b;
}

// Toy gendered corpus: "he is a doctor" mostly, "she is a nurse" mostly.
struct Toy {
  Vocabulary vocab;
  std::vector<std::vector<TokenId>> data;
};

Toy toy_corpus(std::size_t n) {
  std::vector<std::string> lines;
  const char* jobs[] = {"doctor", "nurse", "pilot", "dancer", "chef"};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i % 5;
    const bool male_job = j % 2 == 0;
    const bool male = (i % 10 < 9) == male_job;
    lines.push_back(std::string(male ? "he" : "she") + " is a " + jobs[j]);
  }
  Toy t{build_vocab(lines, {}), {}};
  for (const auto& l : lines) t.data.push_back(encode(l, t.vocab));
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  DistillConfig c;
  CHECK_NOTHROW(c.validate());
  c.temperature = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.alpha_ce = c.alpha_mlm = c.alpha_cos = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.keep_frac = 0.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.mask_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("soften") {
  const Tensor64 z({1, 2}, {2.0, 0.0});
  const auto p = soften(z, 2.0);
  const double e = std::exp(1.0);
  CHECK(p.at(0) == doctest::Approx(e / (e + 1)).epsilon(1e-12));
  CHECK(p.at(0) == doctest::Approx(0.73106).epsilon(1e-5));
  CHECK(p.at(1) == doctest::Approx(0.26894).epsilon(1e-5));

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(-5, 5);
  std::vector<float> v(3 * 9);
  for (auto& x : v) x = u(rng);
  const Tensor logits({3, 9}, v);
  const auto t1 = soften(logits, 1.0), direct = softmax_rows(logits);
  CHECK(std::equal(t1.data().begin(), t1.data().end(), direct.data().begin()));
  const auto hot = soften(logits, 1000.0);
  for (std::size_t r = 0; r < 3; ++r) {
    float lo = 1, hi = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      lo = std::min(lo, hot.at(r * 9 + j));
      hi = std::max(hi, hot.at(r * 9 + j));
    }
    CHECK(hi - lo < 0.01f);
  }
  CHECK_THROWS_AS(soften(logits, 0.0), ConfigError);
  CHECK_THROWS_AS(soften(logits, -1.0), ConfigError);
}

TEST_CASE("masking: full rate, determinism, selection frequency, split") {
  const std::vector<TokenId> ids{kClsId, 5, 6, 7, 8, 9, kSepId, kPadId};
  DistillConfig all;
  all.mask_rate = 1.0;
  all.mask_token_frac = 1.0;
  all.keep_frac = all.random_frac = 0.0;
  std::mt19937_64 rng(1);
  const auto m = mask_for_mlm(ids, all, 12, rng);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (is_special(ids[i])) {
      CHECK(m.ids[i] == ids[i]);
      CHECK(m.labels[i] == -1);
    } else {
      CHECK(m.ids[i] == kMaskId);
      CHECK(m.labels[i] == ids[i]);
    }
  }

  DistillConfig cfg;
  std::mt19937_64 a(9), b(9);
  const auto x = mask_for_mlm(ids, cfg, 12, a), y = mask_for_mlm(ids, cfg, 12, b);
  CHECK(x.ids == y.ids);
  CHECK(x.labels == y.labels);

  // 2,000 sequences x 5 positions; the forced position is rare enough here
  // only when mask_rate is applied to long sequences, so use 50 per sequence.
  std::vector<TokenId> long_ids{kClsId};
  for (int i = 0; i < 50; ++i) long_ids.push_back(5 + i % 7);
  long_ids.push_back(kSepId);
  std::mt19937_64 r(123);
  std::size_t selected = 0, total = 0, masked = 0, kept = 0, random = 0;
  for (int s = 0; s < 200; ++s) {
    const auto seq = mask_for_mlm(long_ids, cfg, 12, r);
    for (std::size_t i = 1; i + 1 < long_ids.size(); ++i) {
      ++total;
      if (seq.labels[i] < 0) {
        CHECK(seq.ids[i] == long_ids[i]);
        continue;
      }
      ++selected;
      if (seq.ids[i] == kMaskId) ++masked;
      else if (seq.ids[i] == long_ids[i]) ++kept;
      else ++random;
      if (seq.ids[i] != kMaskId) CHECK((seq.ids[i] >= kNumSpecial && seq.ids[i] < 12));
    }
  }
  REQUIRE(total == 10000);
  const double frac = static_cast<double>(selected) / static_cast<double>(total);
  CHECK(std::abs(frac - 0.15) < 0.02);
  // Random replacements can land on the original id, so kept absorbs ~1/7 of them.
  CHECK(static_cast<double>(masked) / selected == doctest::Approx(0.8).epsilon(0.08));
  CHECK(random > 0);
  CHECK(kept > 0);
}

TEST_CASE("masking forces one position and rejects all-special input") {
  DistillConfig cfg;
  cfg.mask_rate = 1e-9;
  const std::vector<TokenId> ids{kClsId, 5, 6, kSepId};
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 rng(s);
    const auto m = mask_for_mlm(ids, cfg, 10, rng);
    CHECK(std::count_if(m.labels.begin(), m.labels.end(), [](TokenId l) { return l >= 0; }) == 1);
  }
  const std::vector<TokenId> specials{kClsId, kSepId};
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(mask_for_mlm(specials, cfg, 10, rng), InputError);
}

TEST_CASE("soft targets: rules hold exactly under both orders") {
  std::mt19937_64 rng(8);
  std::normal_distribution<float> n(0, 2);
  std::vector<float> v(4 * 10);
  for (auto& x : v) x = n(rng);
  const Tensor logits({4, 10}, v);
  const auto rules = compile_groups({{5, 6}, {7, 8, 9}}, 10);
  for (auto order : {RuleOrder::kSoftenThenRules, RuleOrder::kRulesThenSoften}) {
    DistillConfig cfg;
    cfg.rule_order = order;
    const auto t = teacher_soft_targets(logits, &rules, cfg);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 10; ++j) s += t[r * 10 + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(t[r * 10 + 5] == t[r * 10 + 6]);
      CHECK(t[r * 10 + 7] == t[r * 10 + 8]);
      CHECK(t[r * 10 + 8] == t[r * 10 + 9]);
    }
  }
  DistillConfig cfg;
  const auto plain = teacher_soft_targets(logits, nullptr, cfg);
  const auto soft = soften(logits, cfg.temperature);
  CHECK(std::equal(plain.begin(), plain.end(), soft.data().begin()));
}

TEST_CASE("loss identities") {
  const std::size_t V = 12;
  auto cfg = small_config(V, 1);
  const auto p = init_params(cfg, 2);
  const std::vector<TokenId> ids{kClsId, 5, kMaskId, 7, kSepId, kPadId};
  MaskedSequence seq{ids, {-1, -1, 6, -1, -1, -1}};
  const auto out = forward(p, ids, false, 0);
  DistillConfig dc;
  const auto targets = teacher_soft_targets(out.logits, nullptr, dc);

  // Student == teacher: L_cos is zero and the L_ce gradient vanishes.
  const auto terms = distill_losses(out, out, targets, seq, dc);
  CHECK(terms.cos.item() == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(terms.ce.item() > 0);
  CHECK(terms.mlm.item() > 0);

  Tensor leaf(out.logits.shape(),
              std::vector<float>(out.logits.data().begin(), out.logits.data().end()), true);
  ForwardOutput<float> student{out.hidden, leaf};
  distill_losses(out, student, targets, seq, dc).ce.backward();
  for (float g : leaf.grad()) CHECK(std::abs(g) < 1e-6f);

  // L_ce at the match equals T^2 times the mean teacher entropy at T.
  double h = 0;
  const auto scored = scored_positions(seq, false);
  for (std::size_t r : scored)
    for (std::size_t j = 0; j < V; ++j) {
      const double q = targets[r * V + j];
      if (q > 0) h -= q * std::log(q);
    }
  CHECK(terms.ce.item() ==
        doctest::Approx(4.0 * h / static_cast<double>(scored.size())).epsilon(1e-5));

  DistillConfig only_mlm = dc;
  only_mlm.alpha_ce = only_mlm.alpha_cos = 0;
  const auto t2 = distill_losses(out, out, targets, seq, only_mlm);
  CHECK(t2.total.item() == static_cast<float>(t2.mlm.item() * 2.0f));

  // Scored positions: non-special by default, masked only when requested.
  CHECK(scored == std::vector<std::size_t>{1, 2, 3});
  CHECK(scored_positions(seq, true) == std::vector<std::size_t>{2});

  auto wide = small_config(V, 1);
  wide.d_model = 8;
  const auto other = forward(init_params(wide, 1), ids, false, 0);
  CHECK_THROWS_AS(distill_losses(out, other, targets, seq, dc), ConfigError);
}

TEST_CASE("adamw: unit step, zero gradient, clipping, decay") {
  Tensor w = Tensor::scalar(0.5f);
  w.set_requires_grad(true);
  w.mutable_grad()[0] = 1.0f;
  std::vector<Tensor> ps{w};
  AdamState st;
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.max_grad_norm = 0;
  adamw_update(ps, st, cfg);
  CHECK(w.item() == doctest::Approx(0.4).epsilon(1e-6));

  Tensor z({3}, {1.0f, -2.0f, 3.0f}, true);
  std::vector<Tensor> zs{z};
  z.zero_grad();
  AdamState zst;
  AdamWConfig zcfg;
  adamw_update(zs, zst, zcfg);
  CHECK(z.data()[0] == 1.0f);
  CHECK(z.data()[1] == -2.0f);
  CHECK(z.data()[2] == 3.0f);

  Tensor a({2}, {0, 0}, true), b({1}, {0}, true);
  a.mutable_grad()[0] = 3;
  a.mutable_grad()[1] = 4;
  b.mutable_grad()[0] = 12;
  std::vector<Tensor> ab{a, b};
  CHECK(clip_grad_norm(ab, 1.0) == doctest::Approx(13.0));
  CHECK(global_grad_norm(ab) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(a.grad()[0] == doctest::Approx(3.0 / 13));
  a.mutable_grad()[0] = 0.3f;
  a.mutable_grad()[1] = 0.4f;
  b.mutable_grad()[0] = 0;
  CHECK(clip_grad_norm(ab, 1.0) == doctest::Approx(0.5));
  CHECK(a.grad()[0] == 0.3f);

  Tensor d({1}, {2.0f}, true);
  d.zero_grad();
  std::vector<Tensor> ds{d};
  AdamState dst;
  AdamWConfig dcfg;
  dcfg.learning_rate = 0.1;
  dcfg.weight_decay = 0.5;
  adamw_update(ds, dst, dcfg);
  CHECK(d.data()[0] == doctest::Approx(2.0 * (1 - 0.05)).epsilon(1e-6));
}

TEST_CASE("learning-rate schedule") {
  DistillConfig c;
  c.learning_rate = 1.0;
  CHECK(scheduled_lr(c, 0, 10) == 1.0);
  CHECK(scheduled_lr(c, 5, 10) == 0.5);
  c.warmup_steps = 4;
  CHECK(scheduled_lr(c, 0, 10) == 0.25);
  CHECK(scheduled_lr(c, 4, 10) == 1.0);
  c.linear_decay = false;
  CHECK(scheduled_lr(c, 9, 10) == 1.0);
}

TEST_CASE("log line format") {
  StepMetrics m;
  m.step = 3;
  m.total = 1.5;
  m.ce = 0.25;
  m.mlm = 0.5;
  m.cos = 0.125;
  m.lr = 5e-4;
  m.wall_ms = 12.5;
  CHECK(format_log_line(m) == "3\t1.500000\t0.250000\t0.500000\t0.125000\t0.0005\t12.500");
}

TEST_CASE("trainer: frozen teacher, accumulation equivalence") {
  const std::size_t V = 14;
  const auto teacher = init_params(small_config(V, 2), 1);
  const auto teacher_bytes = params_bytes(teacher);
  std::vector<std::vector<TokenId>> data{{kClsId, 5, 6, 7, kSepId},
                                         {kClsId, 8, 9, kSepId},
                                         {kClsId, 10, 11, 12, 13, kSepId},
                                         {kClsId, 6, 9, 12, kSepId}};
  DistillConfig cfg;
  cfg.linear_decay = false;
  const auto batch = fixed_batch(data, cfg, V, 77);
  MaskedBatch first, second;
  first.sequences = {batch.sequences[0], batch.sequences[1]};
  second.sequences = {batch.sequences[2], batch.sequences[3]};

  auto s_big = init_params(small_config(V, 1), 5);
  auto s_acc = s_big.clone();
  const auto before = params_bytes(s_acc);

  cfg.batch_size = 4;
  DistillTrainer big(teacher, s_big, nullptr, cfg);
  CHECK(big.step(batch, 0).updated);

  cfg.batch_size = 2;
  cfg.grad_accum_steps = 2;
  DistillTrainer acc(teacher, s_acc, nullptr, cfg);
  CHECK_FALSE(acc.step(first, 0).updated);
  CHECK(params_bytes(s_acc) == before);
  CHECK(acc.step(second, 0).updated);
  CHECK(acc.updates() == 1);

  const auto na = s_big.named(), nb = s_acc.named();
  double worst = 0;
  for (std::size_t k = 0; k < na.size(); ++k)
    for (std::size_t i = 0; i < na[k].second.numel(); ++i)
      worst = std::max(worst, std::abs(static_cast<double>(na[k].second.at(i)) -
                                       nb[k].second.at(i)));
  CHECK(worst < 1e-5);
  CHECK(params_bytes(teacher) == teacher_bytes);
  CHECK_FALSE(acc.flush());
}

TEST_CASE("trainer: incompatible models and rules are rejected") {
  const auto teacher = init_params(small_config(14, 2), 1);
  auto other = init_params(small_config(15, 1), 1);
  CHECK_THROWS_AS(DistillTrainer(teacher, other, nullptr, {}), ConfigError);
  auto student = init_params(small_config(14, 1), 1);
  const auto rules = compile_groups({{5, 6}}, 20);
  CHECK_THROWS_AS(DistillTrainer(teacher, student, &rules, {}), ConfigError);
}

TEST_CASE("trainer: non-finite student aborts with a named tensor") {
  const std::size_t V = 14;
  const auto teacher = init_params(small_config(V, 2), 1);
  auto student = init_params(small_config(V, 1), 2);
  student.pos_emb.mutable_data()[1] = std::numeric_limits<float>::quiet_NaN();
  std::vector<std::vector<TokenId>> data{{kClsId, 5, 6, kSepId}};
  DistillConfig cfg;
  DistillTrainer t(teacher, student, nullptr, cfg);
  try {
    t.step(fixed_batch(data, cfg, V, 1), 0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("student") != std::string::npos);
  }
}

TEST_CASE("smoke training lowers the loss on a toy corpus") {
  const auto toy = toy_corpus(50);
  const std::size_t V = toy.vocab.size();
  const auto teacher = init_params(small_config(V, 2), 3);
  auto student = init_params(small_config(V, 1), 4);
  DistillConfig cfg;
  cfg.batch_size = 1;
  cfg.epochs = 4;
  cfg.learning_rate = 1e-3;
  std::vector<double> totals;
  train_distill(teacher, student, nullptr, toy.data, cfg,
                [&](const StepMetrics& m) {
                  if (m.wall_ms > 0 || m.total > 0) totals.push_back(m.total);
                });
  REQUIRE(totals.size() == 200);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    first += totals[i];
    last += totals[150 + i];
  }
  CHECK(last < first);
}

TEST_CASE("identical seeds give identical students") {
  const auto toy = toy_corpus(20);
  const std::size_t V = toy.vocab.size();
  const auto teacher = init_params(small_config(V, 2), 3);
  DistillConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  auto mc = small_config(V, 1);
  mc.dropout_rate = 0.1;
  auto a = init_params(mc, 4), b = init_params(mc, 4);
  train_distill(teacher, a, nullptr, toy.data, cfg);
  train_distill(teacher, b, nullptr, toy.data, cfg);
  CHECK(params_bytes(a) == params_bytes(b));
}

TEST_CASE("the he/she rule shrinks the student's pronoun gap on a fixed batch") {
  const auto toy = toy_corpus(60);
  const std::size_t V = toy.vocab.size();
  const TokenId he = *toy.vocab.find("he"), she = *toy.vocab.find("she");

  // A skewed teacher first.
  auto teacher = init_params(small_config(V, 2), 1);
  DistillConfig pre;
  pre.batch_size = 4;
  pre.epochs = 40;
  pre.learning_rate = 3e-3;
  train_mlm(teacher, toy.data, pre);

  // Fixed batch: the pronoun slot is always masked.
  MaskedBatch batch;
  for (std::size_t i = 0; i < 20; ++i) {
    MaskedSequence s{toy.data[i], std::vector<TokenId>(toy.data[i].size(), -1)};
    s.labels[1] = s.ids[1];
    s.ids[1] = kMaskId;
    batch.sequences.push_back(s);
  }
  auto gap = [&](const TransformerParams& p) {
    double g = 0;
    for (const auto& s : batch.sequences) {
      const auto d = predict_masked_distribution(p, s.ids, 1);
      g += std::abs(d[static_cast<std::size_t>(he)] - d[static_cast<std::size_t>(she)]);
    }
    return g / static_cast<double>(batch.sequences.size());
  };
  CHECK(gap(teacher) > 0.3);

  const auto rules = compile_rules(parse_rules("he = she"), toy.vocab);
  DistillConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.linear_decay = false;
  cfg.ce_masked_only = true;
  auto with_rule = init_params(small_config(V, 1), 9), without = with_rule.clone();
  DistillTrainer tr(teacher, with_rule, &rules, cfg), tn(teacher, without, nullptr, cfg);
  for (std::uint64_t s = 0; s < 150; ++s) {
    tr.step(batch, s);
    tn.step(batch, s);
  }
  const double g_rule = gap(with_rule), g_plain = gap(without);
  CAPTURE(g_rule);
  CAPTURE(g_plain);
  CHECK(g_rule < g_plain);
}

TEST_CASE("held-out MLM loss is finite, positive and seed-stable") {
  const auto toy = toy_corpus(10);
  const auto p = init_params(small_config(toy.vocab.size(), 1), 2);
  DistillConfig cfg;
  const double a = mlm_eval_loss(p, toy.data, cfg, 5), b = mlm_eval_loss(p, toy.data, cfg, 5);
  CHECK(a == b);
  CHECK(a > 0);
  CHECK(a == doctest::Approx(std::log(static_cast<double>(toy.vocab.size()))).epsilon(0.1));
}
