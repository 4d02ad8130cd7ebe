#pragma once

#include <functional>
#include <map>
#include <vector>

#include "fairdistill/model.hpp"

namespace fd::testing {

// Masked LM whose answers are supplied by the test. Unlisted queries fall
// back to `fallback` (uniform when empty).
class StubModel : public MaskedLanguageModel {
 public:
  using Key = std::pair<std::vector<TokenId>, std::size_t>;

  explicit StubModel(std::size_t vocab) : vocab_(vocab) {}

  void set(std::vector<TokenId> ids, std::size_t pos, Distribution d) {
    table_[{std::move(ids), pos}] = std::move(d);
  }
  void set_hidden(std::function<std::vector<double>(std::span<const TokenId>,
                                                     std::size_t)> f) {
    hidden_ = std::move(f);
  }

  std::size_t vocab_size() const override { return vocab_; }
  Distribution masked_distribution(std::span<const TokenId> ids,
                                   std::size_t position) const override {
    const auto it = table_.find({{ids.begin(), ids.end()}, position});
    if (it != table_.end()) return it->second;
    return Distribution(vocab_, 1.0 / static_cast<double>(vocab_));
  }
  std::vector<double> hidden_state(std::span<const TokenId> ids,
                                   std::size_t position) const override {
    return hidden_ ? hidden_(ids, position) : std::vector<double>{};
  }

 private:
  std::size_t vocab_;
  std::map<Key, Distribution> table_;
  std::function<std::vector<double>(std::span<const TokenId>, std::size_t)> hidden_;
};

}  // namespace fd::testing
