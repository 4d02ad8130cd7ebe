#include "fairdistill/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "fairdistill/hash.hpp"

namespace fd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::atomic<std::uint64_t> g_order{0};

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (std::size_t d : shape)
    if (d == 0)
      throw DimensionError("tensor dimensions must be positive, got " +
                           shape_str(shape));
}

template <typename T>
std::vector<T>& grad_buffer(TensorNode<T>& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

template <typename T>
using BackwardFn = std::function<void(TensorNode<T>&)>;

// Builds the result node; the closure and parent links are kept only when
// some input participates in differentiation.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           BackwardFn<T> backward_fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->order = g_order.fetch_add(1, std::memory_order_relaxed);
  bool needs = false;
  for (const auto* in : inputs) needs = needs || in->requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto* in : inputs) node->parents.push_back(in->node());
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>(std::move(node));
}

template <typename T>
TensorNode<T>* grad_target(TensorNode<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? p.get() : nullptr;
}

template <typename T>
void require_2d_compatible(const BasicTensor<T>& a, const BasicTensor<T>& b,
                           const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

// --- BasicTensor ---------------------------------------------------------

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data,
                            bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size())
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
  node_->order = g_order.fetch_add(1, std::memory_order_relaxed);
  if (requires_grad) node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value),
                     requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t BasicTensor<T>::cols() const {
  return node_->shape.back();
}

template <typename T>
std::size_t BasicTensor<T>::rows() const {
  return numel() / cols();
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1)
    throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool on) {
  if (!node_->is_leaf)
    throw ContractError("set_requires_grad() is only valid on leaf tensors");
  node_->requires_grad = on;
  if (on)
    node_->grad.assign(node_->data.size(), T(0));
  else
    node_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone(bool requires_grad) const {
  return BasicTensor(node_->shape, node_->data, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw DimensionError("cannot reshape " + shape_str(this->shape()) +
                         " to " + shape_str(shape));
  const BasicTensor& x = *this;
  return make_result<T>(std::move(shape), node_->data, {&x},
                        [](TensorNode<T>& self) {
                          if (auto* p = grad_target(self, 0)) {
                            auto& g = grad_buffer(*p);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i];
                          }
                        });
}

template <typename T>
void BasicTensor<T>::backward() {
  if (numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(shape()));
  if (node_->consumed)
    throw ContractError(
        "backward() already ran on this graph; recompute the forward pass");
  if (!node_->requires_grad)
    throw ContractError("loss does not depend on any requires_grad tensor");

  // Owning handles keep every node alive while parents are released below.
  std::vector<std::shared_ptr<TensorNode<T>>> ops;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::shared_ptr<TensorNode<T>>> stack{node_};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (n->is_leaf) continue;
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    ops.push_back(std::move(n));
  }
  std::sort(ops.begin(), ops.end(), [](const auto& a, const auto& b) {
    return a->order > b->order;
  });

  grad_buffer(*node_)[0] += T(1);
  for (auto& n : ops) {
    grad_buffer(*n);
    n->backward_fn(*n);
  }
  for (auto& n : ops) {
    n->backward_fn = nullptr;
    n->parents.clear();
    n->consumed = true;
    if (n != node_) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  node_->consumed = true;
}

// --- ops -------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>({m, n}, std::move(out), {&a, &b},
                        [m, k, n](TensorNode<T>& self) {
                          const T* A = self.parents[0]->data.data();
                          const T* B = self.parents[1]->data.data();
                          const T* dC = self.grad.data();
                          if (auto* pa = grad_target(self, 0))
                            gemm_nt(dC, B, grad_buffer(*pa).data(), m, n, k);
                          if (auto* pb = grad_target(self, 1))
                            gemm_tn(A, dC, grad_buffer(*pb).data(), m, k, n);
                        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_2d_compatible(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result<T>(a.shape(), std::move(out), {&a, &b},
                        [](TensorNode<T>& self) {
                          for (std::size_t s = 0; s < 2; ++s)
                            if (auto* p = grad_target(self, s)) {
                              auto& g = grad_buffer(*p);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i];
                            }
                        });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_2d_compatible(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result<T>(a.shape(), std::move(out), {&a, &b},
                        [](TensorNode<T>& self) {
                          const auto& A = self.parents[0]->data;
                          const auto& B = self.parents[1]->data;
                          if (auto* p = grad_target(self, 0)) {
                            auto& g = grad_buffer(*p);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * B[i];
                          }
                          if (auto* p = grad_target(self, 1)) {
                            auto& g = grad_buffer(*p);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * A[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const std::size_t c = x.cols();
  if (bias.numel() != c)
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) +
                         " does not match columns of " + shape_str(x.shape()));
  const std::size_t r = x.rows();
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  const auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xd[i * c + j] + bd[j];
  return make_result<T>(x.shape(), std::move(out), {&x, &bias},
                        [r, c](TensorNode<T>& self) {
                          if (auto* p = grad_target(self, 0)) {
                            auto& g = grad_buffer(*p);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i];
                          }
                          if (auto* p = grad_target(self, 1)) {
                            auto& g = grad_buffer(*p);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                g[j] += self.grad[i * c + j];
                          }
                        });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * factor;
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [factor](TensorNode<T>& self) {
                          if (auto* p = grad_target(self, 0)) {
                            auto& g = grad_buffer(*p);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * factor;
                          }
                        });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.at(i);
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return make_result<T>(
      x.shape(), std::move(out), {&x}, [inv_sqrt2](TensorNode<T>& self) {
        auto* p = grad_target(self, 0);
        if (!p) return;
        auto& g = grad_buffer(*p);
        const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = p->data[i];
          const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
          g[i] += self.grad[i] * (cdf + v * pdf);
        }
      });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: affine parameters must have " +
                         std::to_string(d) + " entries");
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t r = x.rows();
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(r);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xd.data() + i * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>(row[j] - mu) * rs;
      (*xhat)[i * d + j] = xh;
      out[i * d + j] = xh * gd[j] + bd[j];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [r, d, xhat, rstd](TensorNode<T>& self) {
        const auto& G = self.parents[1]->data;
        const T* dy = self.grad.data();
        if (auto* pg = grad_target(self, 1)) {
          auto& g = grad_buffer(*pg);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j)
              g[j] += dy[i * d + j] * (*xhat)[i * d + j];
        }
        if (auto* pb = grad_target(self, 2)) {
          auto& g = grad_buffer(*pb);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[i * d + j];
        }
        if (auto* px = grad_target(self, 0)) {
          auto& g = grad_buffer(*px);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = static_cast<double>(dy[i * d + j]) * G[j];
              m1 += dxh;
              m2 += dxh * (*xhat)[i * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = static_cast<double>(dy[i * d + j]) * G[j];
              g[i * d + j] += static_cast<T>(
                  (*rstd)[i] * (dxh - m1 - (*xhat)[i * d + j] * m2));
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xd.data() + i * c;
    T* o = out.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(row[j] - mx);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < c; ++j)
      o[j] = static_cast<T>(static_cast<double>(o[j]) * inv);
  }
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [r, c](TensorNode<T>& self) {
                          auto* p = grad_target(self, 0);
                          if (!p) return;
                          auto& g = grad_buffer(*p);
                          const T* y = self.data.data();
                          const T* dy = self.grad.data();
                          for (std::size_t i = 0; i < r; ++i) {
                            double dot = 0;
                            for (std::size_t j = 0; j < c; ++j)
                              dot += static_cast<double>(dy[i * c + j]) *
                                     y[i * c + j];
                            for (std::size_t j = 0; j < c; ++j)
                              g[i * c + j] += static_cast<T>(
                                  y[i * c + j] * (dy[i * c + j] - dot));
                          }
                        });
}

template <typename T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& x) {
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xd.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    const double lse = std::log(s);
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = static_cast<T>(static_cast<double>(row[j] - mx) - lse);
  }
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [r, c](TensorNode<T>& self) {
                          auto* p = grad_target(self, 0);
                          if (!p) return;
                          auto& g = grad_buffer(*p);
                          const T* y = self.data.data();
                          const T* dy = self.grad.data();
                          for (std::size_t i = 0; i < r; ++i) {
                            double tot = 0;
                            for (std::size_t j = 0; j < c; ++j)
                              tot += dy[i * c + j];
                            for (std::size_t j = 0; j < c; ++j)
                              g[i * c + j] += static_cast<T>(
                                  dy[i * c + j] -
                                  std::exp(static_cast<double>(y[i * c + j])) * tot);
                          }
                        });
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table,
                         std::span<const TokenId> ids) {
  if (ids.empty()) throw InputError("embedding: empty id sequence");
  const std::size_t v = table.rows();
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw IndexError("embedding: token id " + std::to_string(ids[i]) +
                       " outside vocabulary of size " + std::to_string(v));
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return select_rows(table, std::span<const std::size_t>(rows));
}

template <typename T>
BasicTensor<T> select_rows(const BasicTensor<T>& x,
                           std::span<const std::size_t> rows) {
  if (rows.empty()) throw InputError("select_rows: no rows selected");
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<T> out(rows.size() * c);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r)
      throw IndexError("select_rows: row " + std::to_string(rows[i]) +
                       " out of range for " + shape_str(x.shape()));
    std::copy_n(xd.data() + rows[i] * c, c, out.data() + i * c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result<T>({rows.size(), c}, std::move(out), {&x},
                        [idx = std::move(idx), c](TensorNode<T>& self) {
                          auto* p = grad_target(self, 0);
                          if (!p) return;
                          auto& g = grad_buffer(*p);
                          for (std::size_t i = 0; i < idx.size(); ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              g[idx[i] * c + j] += self.grad[i * c + j];
                        });
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                         const BasicTensor<T>& v, std::size_t n_heads,
                         std::span<const std::uint8_t> key_valid) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
    throw DimensionError("attention: q/k/v must share a 2-d shape, got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  const std::size_t L = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0)
    throw DimensionError("attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(n_heads) +
                         " heads");
  if (key_valid.size() != L)
    throw DimensionError("attention: key mask length " +
                         std::to_string(key_valid.size()) +
                         " != sequence length " + std::to_string(L));
  const std::size_t dh = d / n_heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  // probs[h][i][j]
  auto probs = std::make_shared<std::vector<T>>(n_heads * L * L, T(0));
  std::vector<T> out(L * d, T(0));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  std::vector<std::uint8_t> valid(key_valid.begin(), key_valid.end());
  std::vector<T> row(L);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < L; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < L; ++j) {
        if (!valid[j]) continue;
        T s = 0;
        for (std::size_t t = 0; t < dh; ++t)
          s += Q[i * d + off + t] * K[j * d + off + t];
        row[j] = s * sc;
        mx = std::max(mx, row[j]);
      }
      T* P = probs->data() + (h * L + i) * L;
      double z = 0;
      for (std::size_t j = 0; j < L; ++j) {
        if (!valid[j]) continue;
        P[j] = std::exp(row[j] - mx);
        z += P[j];
      }
      if (z == 0) continue;  // no valid keys: output row stays zero
      const double inv = 1.0 / z;
      for (std::size_t j = 0; j < L; ++j)
        if (valid[j]) P[j] = static_cast<T>(P[j] * inv);
      T* o = out.data() + i * d + off;
      for (std::size_t j = 0; j < L; ++j) {
        const T pj = P[j];
        if (pj == T(0)) continue;
        for (std::size_t t = 0; t < dh; ++t) o[t] += pj * V[j * d + off + t];
      }
    }
  }
  return make_result<T>(
      {L, d}, std::move(out), {&q, &k, &v},
      [L, d, dh, n_heads, sc, probs](TensorNode<T>& self) {
        const T* Q = self.parents[0]->data.data();
        const T* K = self.parents[1]->data.data();
        const T* V = self.parents[2]->data.data();
        const T* dO = self.grad.data();
        auto* pq = grad_target(self, 0);
        auto* pk = grad_target(self, 1);
        auto* pv = grad_target(self, 2);
        T* dQ = pq ? grad_buffer(*pq).data() : nullptr;
        T* dK = pk ? grad_buffer(*pk).data() : nullptr;
        T* dV = pv ? grad_buffer(*pv).data() : nullptr;
        std::vector<T> dP(L), dS(L);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < L; ++i) {
            const T* P = probs->data() + (h * L + i) * L;
            const T* dOi = dO + i * d + off;
            double dot = 0;
            for (std::size_t j = 0; j < L; ++j) {
              T s = 0;
              for (std::size_t t = 0; t < dh; ++t) s += dOi[t] * V[j * d + off + t];
              dP[j] = s;
              dot += static_cast<double>(s) * P[j];
              if (dV && P[j] != T(0))
                for (std::size_t t = 0; t < dh; ++t)
                  dV[j * d + off + t] += P[j] * dOi[t];
            }
            for (std::size_t j = 0; j < L; ++j)
              dS[j] = static_cast<T>(P[j] * (dP[j] - dot)) * sc;
            for (std::size_t j = 0; j < L; ++j) {
              if (dS[j] == T(0)) continue;
              if (dQ)
                for (std::size_t t = 0; t < dh; ++t)
                  dQ[i * d + off + t] += dS[j] * K[j * d + off + t];
              if (dK)
                for (std::size_t t = 0; t < dh; ++t)
                  dK[j * d + off + t] += dS[j] * Q[i * d + off + t];
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate,
                       std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u =
        static_cast<double>(mix64(seed + i) >> 11) * 0x1.0p-53;
    (*mask)[i] = u >= rate ? keep_scale : T(0);
    out[i] = x.at(i) * (*mask)[i];
  }
  return make_result<T>(x.shape(), std::move(out), {&x},
                        [mask](TensorNode<T>& self) {
                          auto* p = grad_target(self, 0);
                          if (!p) return;
                          auto& g = grad_buffer(*p);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += self.grad[i] * (*mask)[i];
                        });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>({1}, {static_cast<T>(s)}, {&x},
                        [](TensorNode<T>& self) {
                          auto* p = grad_target(self, 0);
                          if (!p) return;
                          auto& g = grad_buffer(*p);
                          for (auto& gi : g) gi += self.grad[0];
                        });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  return make_result<T>({1}, {static_cast<T>(s / n)}, {&x},
                        [n](TensorNode<T>& self) {
                          auto* p = grad_target(self, 0);
                          if (!p) return;
                          auto& g = grad_buffer(*p);
                          const T step = static_cast<T>(self.grad[0] / n);
                          for (auto& gi : g) gi += step;
                        });
}

template <typename T>
BasicTensor<T> cross_entropy_rows(const BasicTensor<T>& probs,
                                  std::span<const TokenId> targets) {
  const std::size_t r = probs.rows(), c = probs.cols();
  if (targets.size() != r)
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(r) + " rows");
  std::vector<std::size_t> tgt(r);
  double loss = 0;
  const auto pd = probs.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
      throw IndexError("cross_entropy_rows: target " +
                       std::to_string(targets[i]) + " outside [0, " +
                       std::to_string(c) + ")");
    tgt[i] = static_cast<std::size_t>(targets[i]);
    loss -= std::log(std::max<double>(pd[i * c + tgt[i]], kProbFloor));
  }
  const double n = static_cast<double>(r);
  return make_result<T>(
      {1}, {static_cast<T>(loss / n)}, {&probs},
      [tgt = std::move(tgt), c, n](TensorNode<T>& self) {
        auto* p = grad_target(self, 0);
        if (!p) return;
        auto& g = grad_buffer(*p);
        for (std::size_t i = 0; i < tgt.size(); ++i) {
          const double pv = p->data[i * c + tgt[i]];
          if (pv > kProbFloor)
            g[i * c + tgt[i]] += static_cast<T>(-self.grad[0] / (n * pv));
        }
      });
}

template <typename T>
BasicTensor<T> soft_cross_entropy_rows(const BasicTensor<T>& log_q,
                                       std::span<const T> target_probs) {
  if (target_probs.size() != log_q.numel())
    throw DimensionError("soft_cross_entropy_rows: target has " +
                         std::to_string(target_probs.size()) +
                         " entries, log-probabilities have shape " +
                         shape_str(log_q.shape()));
  const std::size_t r = log_q.rows();
  double loss = 0;
  const auto lq = log_q.data();
  for (std::size_t i = 0; i < lq.size(); ++i)
    loss -= static_cast<double>(target_probs[i]) * lq[i];
  const double n = static_cast<double>(r);
  auto tp = std::make_shared<std::vector<T>>(target_probs.begin(),
                                             target_probs.end());
  return make_result<T>({1}, {static_cast<T>(loss / n)}, {&log_q},
                        [tp, n](TensorNode<T>& self) {
                          auto* p = grad_target(self, 0);
                          if (!p) return;
                          auto& g = grad_buffer(*p);
                          const double s = self.grad[0] / n;
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += static_cast<T>(-(*tp)[i] * s);
                        });
}

template <typename T>
BasicTensor<T> cosine_distance_rows(const BasicTensor<T>& a,
                                    const BasicTensor<T>& b) {
  require_2d_compatible(a, b, "cosine_distance_rows");
  const std::size_t r = a.rows(), c = a.cols();
  constexpr double kEps = 1e-12;
  auto stats = std::make_shared<std::vector<double>>(3 * r);  // |a|,|b|,cos
  double loss = 0;
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    double aa = 0, bb = 0, ab = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double x = ad[i * c + j], y = bd[i * c + j];
      aa += x * x;
      bb += y * y;
      ab += x * y;
    }
    const double na = std::max(std::sqrt(aa), kEps);
    const double nb = std::max(std::sqrt(bb), kEps);
    const double cs = ab / (na * nb);
    (*stats)[3 * i] = na;
    (*stats)[3 * i + 1] = nb;
    (*stats)[3 * i + 2] = cs;
    loss += 1.0 - cs;
  }
  const double n = static_cast<double>(r);
  return make_result<T>(
      {1}, {static_cast<T>(loss / n)}, {&a, &b},
      [stats, r, c, n](TensorNode<T>& self) {
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        const double s = -self.grad[0] / n;
        auto* pa = grad_target(self, 0);
        auto* pb = grad_target(self, 1);
        for (std::size_t i = 0; i < r; ++i) {
          const double na = (*stats)[3 * i], nb = (*stats)[3 * i + 1],
                       cs = (*stats)[3 * i + 2];
          for (std::size_t j = 0; j < c; ++j) {
            const double x = A[i * c + j], y = B[i * c + j];
            if (pa)
              grad_buffer(*pa)[i * c + j] +=
                  static_cast<T>(s * (y / (na * nb) - cs * x / (na * na)));
            if (pb)
              grad_buffer(*pb)[i * c + j] +=
                  static_cast<T>(s * (x / (na * nb) - cs * y / (nb * nb)));
          }
        }
      });
}

#define FD_INSTANTIATE(T)                                                      \
  template class BasicTensor<T>;                                               \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> add_row(const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                     \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                         \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&,                    \
                                     const BasicTensor<T>&,                    \
                                     const BasicTensor<T>&, T);                \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                 \
  template BasicTensor<T> log_softmax_rows(const BasicTensor<T>&);             \
  template BasicTensor<T> embedding(const BasicTensor<T>&,                     \
                                    std::span<const TokenId>);                 \
  template BasicTensor<T> select_rows(const BasicTensor<T>&,                   \
                                      std::span<const std::size_t>);           \
  template BasicTensor<T> attention(const BasicTensor<T>&,                     \
                                    const BasicTensor<T>&,                     \
                                    const BasicTensor<T>&, std::size_t,        \
                                    std::span<const std::uint8_t>);            \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double,               \
                                  std::uint64_t);                              \
  template BasicTensor<T> sum(const BasicTensor<T>&);                          \
  template BasicTensor<T> mean(const BasicTensor<T>&);                         \
  template BasicTensor<T> cross_entropy_rows(const BasicTensor<T>&,            \
                                             std::span<const TokenId>);        \
  template BasicTensor<T> soft_cross_entropy_rows(const BasicTensor<T>&,       \
                                                  std::span<const T>);         \
  template BasicTensor<T> cosine_distance_rows(const BasicTensor<T>&,          \
                                               const BasicTensor<T>&);

FD_INSTANTIATE(float)
FD_INSTANTIATE(double)

#undef FD_INSTANTIATE

}  // namespace fd
