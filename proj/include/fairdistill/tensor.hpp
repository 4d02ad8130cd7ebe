#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// A tensor is a shared handle: copying a BasicTensor aliases the same
// storage and graph node (use clone() for a deep copy). Every op whose
// inputs require gradients records its inputs and a backward closure on the
// result; backward() on a scalar walks the recorded ops once each, in reverse
// creation order, accumulating into every requires_grad leaf.
//
// backward() consumes the graph. Calling it again on the same loss raises
// ContractError; leaf gradients accumulate across separate graphs until
// zero_grad() (this is what gradient accumulation relies on).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fairdistill/error.hpp"

namespace fd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  // Trailing dimension, and the product of all leading ones.
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<const T> data() const { return node_->data; }
  // Direct write access; intended for leaves (optimizer updates, tests).
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t i) const { return node_->data.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  // Empty span until a gradient has been allocated.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad();
  // Leaves only.
  void set_requires_grad(bool on);

  void backward();

  BasicTensor clone(bool requires_grad = false) const;
  BasicTensor reshape(Shape shape) const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  explicit BasicTensor(std::shared_ptr<TensorNode<T>> node)
      : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

using TokenId = std::int32_t;

// Probability clamp applied before every log.
inline constexpr double kProbFloor = 1e-12;

// --- ops ---------------------------------------------------------------
// All ops are pure functions of their inputs. Two-dimensional ops treat a
// tensor as rows() x cols().

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// x[r, :] + bias for every row r.
template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& x, const BasicTensor<T>& bias);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps);
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& x);
// Rows of `table` indexed by ids: [ids.size() x table.cols()].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table,
                         std::span<const TokenId> ids);
template <typename T>
BasicTensor<T> select_rows(const BasicTensor<T>& x,
                           std::span<const std::size_t> rows);
// Multi-head scaled dot-product attention over [L x d] projections. Keys with
// key_valid[j] == 0 receive zero weight.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                         const BasicTensor<T>& v, std::size_t n_heads,
                         std::span<const std::uint8_t> key_valid);
// Inverted dropout with a counter-based mask derived from seed.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate,
                       std::uint64_t seed);
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);
// Mean over rows of -log(probs[r, targets[r]]), probabilities clamped at
// kProbFloor. Throws IndexError for targets outside [0, cols).
template <typename T>
BasicTensor<T> cross_entropy_rows(const BasicTensor<T>& probs,
                                  std::span<const TokenId> targets);
// Mean over rows of -sum_i p[r, i] * log_q[r, i]; p is a constant target.
template <typename T>
BasicTensor<T> soft_cross_entropy_rows(const BasicTensor<T>& log_q,
                                       std::span<const T> target_probs);
// Mean over rows of 1 - cos(a[r], b[r]).
template <typename T>
BasicTensor<T> cosine_distance_rows(const BasicTensor<T>& a,
                                    const BasicTensor<T>& b);

}  // namespace fd
