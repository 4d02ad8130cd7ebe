#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fairdistill/error.hpp"
#include "fairdistill/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/op_gradients.hpp"

using namespace fd;
using fd::testing::random_values;

TEST_CASE("matmul of a 2x2 by a 2x1") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {5, 6});
  const auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.at(0) == 17);
  CHECK(c.at(1) == 39);
}

TEST_CASE("matmul rejects mismatched shapes and names both") {
  Tensor a({2, 3}, std::vector<float>(6, 1));
  Tensor b({2, 3}, std::vector<float>(6, 1));
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax of [1,2,3]") {
  Tensor64 x({1, 3}, {1, 2, 3});
  const auto p = softmax_rows(x);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(p.at(0) == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(p.at(1) == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));
  CHECK(p.at(2) == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
  CHECK(p.at(0) == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(p.at(2) == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax stays finite for large logits") {
  Tensor x({1, 3}, {1000, 1001, 1002});
  const auto p = softmax_rows(x);
  float s = 0;
  for (float v : p.data()) {
    CHECK(std::isfinite(v));
    s += v;
  }
  CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one on random inputs") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = random_values(5 * 17, rng, -20, 20);
    const auto p = softmax_rows(Tensor64({5, 17}, v));
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 17; ++c) s += p.at(r * 17 + c);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("cross entropy of uniform predictions is ln V") {
  Tensor64 p({1, 4}, {0.25, 0.25, 0.25, 0.25});
  const std::vector<TokenId> t{2};
  CHECK(cross_entropy_rows(p, std::span<const TokenId>(t)).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy averages over rows") {
  Tensor64 p({2, 4}, {0.5, 0.5, 0, 0, 0.25, 0.25, 0.25, 0.25});
  const std::vector<TokenId> t{0, 3};
  const double expected = (std::log(2.0) + std::log(4.0)) / 2;
  CHECK(cross_entropy_rows(p, std::span<const TokenId>(t)).item() ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(1.0397).epsilon(1e-4));
}

TEST_CASE("cross entropy rejects targets outside the vocabulary") {
  Tensor p({1, 4}, {0.25f, 0.25f, 0.25f, 0.25f});
  const std::vector<TokenId> bad{4}, neg{-1};
  CHECK_THROWS_AS(cross_entropy_rows(p, std::span<const TokenId>(bad)), IndexError);
  CHECK_THROWS_AS(cross_entropy_rows(p, std::span<const TokenId>(neg)), IndexError);
}

TEST_CASE("cross entropy clamps zero probabilities") {
  Tensor64 p({1, 2}, {1.0, 0.0});
  const std::vector<TokenId> t{1};
  CHECK(cross_entropy_rows(p, std::span<const TokenId>(t)).item() ==
        doctest::Approx(-std::log(kProbFloor)));
}

TEST_CASE("embedding rejects out-of-range ids") {
  Tensor table({3, 2}, std::vector<float>(6, 0.5f));
  const std::vector<TokenId> ok{0, 2}, bad{3};
  CHECK(embedding(table, std::span<const TokenId>(ok)).shape() == Shape{2, 2});
  CHECK_THROWS_AS(embedding(table, std::span<const TokenId>(bad)), IndexError);
}

TEST_CASE("layer norm rejects non-positive epsilon") {
  Tensor x({1, 3}, {1, 2, 3});
  auto g = Tensor::full({3}, 1), b = Tensor::zeros({3});
  CHECK_THROWS_AS(layer_norm(x, g, b, 0.0f), ConfigError);
}

TEST_CASE("layer norm output has zero mean and unit variance") {
  std::mt19937_64 rng(5);
  const auto v = random_values(4 * 8, rng, -3, 3);
  const auto y = layer_norm(Tensor64({4, 8}, v), Tensor64::full({8}, 1.0),
                            Tensor64::zeros({8}), 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, s = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.at(r * 8 + c);
    m /= 8;
    for (std::size_t c = 0; c < 8; ++c) s += (y.at(r * 8 + c) - m) * (y.at(r * 8 + c) - m);
    CHECK(std::abs(m) < 1e-9);
    CHECK(s / 8 == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("dropout with rate 0 is the identity and rate 1 is rejected") {
  Tensor x({2, 2}, {1, 2, 3, 4});
  const auto y = dropout(x, 0.0, 7);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == x.at(i));
  CHECK_THROWS_AS(dropout(x, 1.0, 7), ConfigError);
}

TEST_CASE("dropout is deterministic in its seed and preserves the mean") {
  Tensor x = Tensor::full({100, 100}, 1.0f);
  const auto a = dropout(x, 0.25, 11), b = dropout(x, 0.25, 11), c = dropout(x, 0.25, 12);
  bool differs = false;
  double total = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(a.at(i) == b.at(i));
    differs = differs || a.at(i) != c.at(i);
    total += a.at(i);
  }
  CHECK(differs);
  CHECK(total / 10000.0 == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("backward twice on the same graph is a contract error") {
  Tensor x({2}, {1, 2}, true);
  auto loss = sum(mul(x, x));
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0f));
  CHECK_THROWS_AS(loss.backward(), ContractError);
}

TEST_CASE("backward needs a scalar that depends on a trainable tensor") {
  Tensor x({2}, {1, 2}, true);
  auto y = scale(x, 2.0f);
  CHECK_THROWS_AS(y.backward(), ContractError);
  Tensor c({2}, {1, 2});
  auto s = sum(c);
  CHECK_THROWS_AS(s.backward(), ContractError);
}

TEST_CASE("leaf gradients accumulate across graphs until zero_grad") {
  Tensor x({1}, {3}, true);
  sum(scale(x, 2.0f)).backward();
  sum(scale(x, 2.0f)).backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0f));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0f);
}

TEST_CASE("a shared subexpression receives gradient from every use") {
  Tensor x({1}, {3}, true);
  auto y = mul(x, x);             // x^2
  auto z = add(y, mul(y, x));     // x^2 + x^3
  sum(z).backward();
  CHECK(x.grad()[0] == doctest::Approx(2 * 3 + 3 * 9));
}

TEST_CASE("unused trainable leaves keep a zero gradient") {
  Tensor x({2}, {1, 2}, true), unused({2}, {5, 6}, true);
  sum(x).backward();
  REQUIRE(unused.grad().size() == 2);
  CHECK(unused.grad()[0] == 0.0f);
}

TEST_CASE("reshape checks element count") {
  Tensor x({2, 3}, std::vector<float>(6, 1));
  CHECK(x.reshape({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(x.reshape({4, 2}), DimensionError);
}

// --- gradients against finite differences -------------------------------

TEST_CASE("every differentiable op matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CAPTURE(seed);
    for (const auto& [op, r] : fd::testing::op_gradient_suite(seed))
      CHECK_MESSAGE(r.max_rel_err < fd::testing::kOpTol, op << " " << r.worst);
  }
}
