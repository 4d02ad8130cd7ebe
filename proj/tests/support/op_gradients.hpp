#pragma once

// Finite-difference checks for every differentiable op, and for the whole
// model, shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fairdistill/model.hpp"
#include "fairdistill/tokenizer.hpp"
#include "support/gradcheck.hpp"

namespace fd::testing {

// Weighted sum so every output element carries a distinct upstream gradient.
template <typename TensorT>
TensorT weighted_sum(const TensorT& y, std::uint64_t seed) {
  using T = typename TensorT::value_type;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<T> w(y.numel());
  for (auto& v : w) v = static_cast<T>(u(rng));
  return sum(mul(y, TensorT(y.shape(), w)));
}

inline constexpr double kOpTol = 1e-4;
inline constexpr double kModelTol = 1e-3;

// One random small instance (dims <= 8) per op.
inline std::vector<std::pair<std::string, GradCheckResult>> op_gradient_suite(
    std::uint64_t seed) {
  std::vector<std::pair<std::string, GradCheckResult>> out;
  std::mt19937_64 rng(seed);

  GradCheckResult r = check_gradients(
      [&](const auto& x) { return weighted_sum(matmul(x[0], x[1]), seed); },
      {{3, 4}, {4, 5}}, {random_values(12, rng), random_values(20, rng)});
  out.push_back({"matmul", r});

  r = check_gradients([&](const auto& x) { return weighted_sum(add(x[0], x[1]), seed); },
                      {{2, 3}, {2, 3}}, {random_values(6, rng), random_values(6, rng)});
  out.push_back({"add", r});

  r = check_gradients([&](const auto& x) { return weighted_sum(mul(x[0], x[1]), seed); },
                      {{2, 3}, {2, 3}}, {random_values(6, rng), random_values(6, rng)});
  out.push_back({"mul", r});

  r = check_gradients(
      [&](const auto& x) { return weighted_sum(add_row(x[0], x[1]), seed); },
      {{3, 4}, {4}}, {random_values(12, rng), random_values(4, rng)});
  out.push_back({"add_row", r});

  r = check_gradients(
      [&](const auto& x) {
        using T = typename std::decay_t<decltype(x[0])>::value_type;
        return weighted_sum(scale(x[0], T(-1.7)), seed);
      },
      {{5}}, {random_values(5, rng)});
  out.push_back({"scale", r});

  r = check_gradients([&](const auto& x) { return weighted_sum(gelu(x[0]), seed); },
                      {{3, 5}}, {random_values(15, rng, -3, 3)});
  out.push_back({"gelu", r});

  r = check_gradients(
      [&](const auto& x) {
        using T = typename std::decay_t<decltype(x[0])>::value_type;
        return weighted_sum(layer_norm(x[0], x[1], x[2], T(1e-5)), seed);
      },
      {{3, 6}, {6}, {6}},
      {random_values(18, rng, -2, 2), random_values(6, rng, 0.5, 1.5),
       random_values(6, rng)});
  out.push_back({"layer_norm", r});

  r = check_gradients([&](const auto& x) { return weighted_sum(softmax_rows(x[0]), seed); },
                      {{3, 5}}, {random_values(15, rng, -2, 2)});
  out.push_back({"softmax_rows", r});

  r = check_gradients(
      [&](const auto& x) { return weighted_sum(log_softmax_rows(x[0]), seed); },
      {{3, 5}}, {random_values(15, rng, -2, 2)});
  out.push_back({"log_softmax_rows", r});

  const std::vector<TokenId> ids{2, 0, 2, 3};
  r = check_gradients(
      [&](const auto& x) {
        return weighted_sum(embedding(x[0], std::span<const TokenId>(ids)), seed);
      },
      {{4, 3}}, {random_values(12, rng)});
  out.push_back({"embedding", r});

  const std::vector<std::size_t> rows{1, 1, 0};
  r = check_gradients(
      [&](const auto& x) {
        return weighted_sum(select_rows(x[0], std::span<const std::size_t>(rows)), seed);
      },
      {{2, 3}}, {random_values(6, rng)});
  out.push_back({"select_rows", r});

  const std::vector<std::uint8_t> valid{1, 1, 1, 0, 1};
  r = check_gradients(
      [&](const auto& x) {
        return weighted_sum(
            attention(x[0], x[1], x[2], 2, std::span<const std::uint8_t>(valid)), seed);
      },
      {{5, 4}, {5, 4}, {5, 4}},
      {random_values(20, rng), random_values(20, rng), random_values(20, rng)});
  out.push_back({"attention", r});

  r = check_gradients(
      [&](const auto& x) { return weighted_sum(dropout(x[0], 0.3, seed), seed); },
      {{4, 4}}, {random_values(16, rng)});
  out.push_back({"dropout", r});

  r = check_gradients([&](const auto& x) { return mean(mul(x[0], x[0])); }, {{2, 3}},
                      {random_values(6, rng)});
  out.push_back({"mean", r});

  const std::vector<TokenId> targets{1, 4, 0};
  r = check_gradients(
      [&](const auto& x) {
        return cross_entropy_rows(softmax_rows(x[0]), std::span<const TokenId>(targets));
      },
      {{3, 5}}, {random_values(15, rng, -2, 2)});
  out.push_back({"cross_entropy_rows", r});

  const auto soft = random_values(15, rng, 0.1, 1.0);
  r = check_gradients(
      [&](const auto& x) {
        using T = typename std::decay_t<decltype(x[0])>::value_type;
        std::vector<T> p(soft.begin(), soft.end());
        for (std::size_t row = 0; row < 3; ++row) {
          T z = 0;
          for (std::size_t c = 0; c < 5; ++c) z += p[row * 5 + c];
          for (std::size_t c = 0; c < 5; ++c) p[row * 5 + c] /= z;
        }
        return soft_cross_entropy_rows(log_softmax_rows(x[0]), std::span<const T>(p));
      },
      {{3, 5}}, {random_values(15, rng, -2, 2)});
  out.push_back({"soft_cross_entropy_rows", r});

  r = check_gradients(
      [&](const auto& x) { return cosine_distance_rows(x[0], x[1]); }, {{3, 4}, {3, 4}},
      {random_values(12, rng), random_values(12, rng)});
  out.push_back({"cosine_distance_rows", r});
  return out;
}

// Whole-model check: MLM cross entropy at two masked positions plus cosine
// distance of the hidden states to a fixed target, eval mode, on a 2-layer
// d=8 model. Entries of every parameter tensor are sampled; one floor is
// shared by the whole model because some gradients (key biases) are
// identically zero and a per-tensor floor would compare rounding noise.
inline GradCheckResult model_gradient_check(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.vocab_size = 20;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_ff = 16;
  cfg.max_seq_len = 12;
  const std::vector<TokenId> ids{kClsId, 7, kMaskId, 9, 11, kMaskId, kSepId};
  const std::vector<std::size_t> masked{2, 5};
  const std::vector<TokenId> labels{8, 12};
  std::mt19937_64 rng(77);
  const auto target_hidden = random_values(ids.size() * cfg.d_model, rng);

  auto loss_of = [&](const auto& params) {
    using T = typename std::decay_t<decltype(params.token_emb)>::value_type;
    const auto out = forward(params, ids, false, 0);
    const auto ce = cross_entropy_rows(
        softmax_rows(select_rows(out.logits, std::span<const std::size_t>(masked))),
        std::span<const TokenId>(labels));
    BasicTensor<T> target({ids.size(), cfg.d_model},
                          std::vector<T>(target_hidden.begin(), target_hidden.end()));
    return add(ce, cosine_distance_rows(out.hidden, target));
  };

  auto p = init_params(cfg, seed);
  // Spread the weights so every path carries a visible gradient.
  for (auto& t : p.parameters())
    for (float& v : t.mutable_data()) v *= 5.0f;
  p.set_requires_grad(true);
  loss_of(p).backward();
  auto p64 = cast_params<double>(p, false);
  const auto named32 = p.named();
  auto named64 = p64.named();

  struct Probe {
    std::size_t tensor, index;
    double ref;
  };
  std::vector<Probe> probes;
  double max_ref = 0;
  for (std::size_t k = 0; k < named32.size(); ++k) {
    auto data = named64[k].second.mutable_data();
    const std::size_t n = data.size(), stride = std::max<std::size_t>(1, n / 6);
    for (std::size_t j = 0; j < n; j += stride) {
      const double orig = data[j], h = 1e-3;
      data[j] = orig + h;
      const double fp = loss_of(p64).item();
      data[j] = orig - h;
      const double fm = loss_of(p64).item();
      data[j] = orig;
      probes.push_back({k, j, (fp - fm) / (2 * h)});
      max_ref = std::max(max_ref, std::abs(probes.back().ref));
    }
  }
  const double floor = 1e-2 * max_ref;
  GradCheckResult r;
  for (const auto& pr : probes) {
    const double e = rel_err(named32[pr.tensor].second.grad()[pr.index], pr.ref, floor);
    ++r.checked;
    if (e > r.max_rel_err) {
      r.max_rel_err = e;
      r.worst = named32[pr.tensor].first + "[" + std::to_string(pr.index) + "]";
    }
  }
  return r;
}

}  // namespace fd::testing
