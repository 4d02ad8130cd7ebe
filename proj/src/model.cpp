#include "fairdistill/model.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "fairdistill/hash.hpp"
#include "fairdistill/tokenizer.hpp"

namespace fd {

void ModelConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kNumSpecial))
    throw ConfigError("vocab_size must exceed the special-token block");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ConfigError("d_model (" + std::to_string(d_model) +
                      ") must be a positive multiple of n_heads (" +
                      std::to_string(n_heads) + ")");
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (d_ff == 0) throw ConfigError("d_ff must be positive");
  if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw ConfigError("dropout_rate must lie in [0, 1)");
}

ModelConfig student_config(const ModelConfig& teacher) {
  teacher.validate();
  if (teacher.n_layers < 2 || teacher.n_layers % 2 != 0)
    throw ConfigError("teacher n_layers must be even and >= 2 to derive a "
                      "half-depth student, got " +
                      std::to_string(teacher.n_layers));
  ModelConfig s = teacher;
  s.n_layers = teacher.n_layers / 2;
  return s;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>>>
BasicTransformerParams<T>::named() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  out.emplace_back("embeddings.token", token_emb);
  out.emplace_back("embeddings.position", pos_emb);
  out.emplace_back("embeddings.ln.gain", emb_ln_gain);
  out.emplace_back("embeddings.ln.bias", emb_ln_bias);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attn.q.weight", l.wq);
    out.emplace_back(p + "attn.q.bias", l.bq);
    out.emplace_back(p + "attn.k.weight", l.wk);
    out.emplace_back(p + "attn.k.bias", l.bk);
    out.emplace_back(p + "attn.v.weight", l.wv);
    out.emplace_back(p + "attn.v.bias", l.bv);
    out.emplace_back(p + "attn.out.weight", l.wo);
    out.emplace_back(p + "attn.out.bias", l.bo);
    out.emplace_back(p + "ln1.gain", l.ln1_gain);
    out.emplace_back(p + "ln1.bias", l.ln1_bias);
    out.emplace_back(p + "ff1.weight", l.ff1_w);
    out.emplace_back(p + "ff1.bias", l.ff1_b);
    out.emplace_back(p + "ff2.weight", l.ff2_w);
    out.emplace_back(p + "ff2.bias", l.ff2_b);
    out.emplace_back(p + "ln2.gain", l.ln2_gain);
    out.emplace_back(p + "ln2.bias", l.ln2_bias);
  }
  out.emplace_back("head.dense.weight", head_w);
  out.emplace_back("head.dense.bias", head_b);
  out.emplace_back("head.ln.gain", head_ln_gain);
  out.emplace_back("head.ln.bias", head_ln_bias);
  out.emplace_back("head.out.weight", out_w);
  out.emplace_back("head.out.bias", out_b);
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> BasicTransformerParams<T>::parameters() const {
  std::vector<BasicTensor<T>> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
std::size_t BasicTransformerParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named()) n += t.numel();
  return n;
}

template <typename T>
void BasicTransformerParams<T>::set_requires_grad(bool on) {
  for (auto& t : parameters()) t.set_requires_grad(on);
}

namespace {

// Calls f(name, shape, kind) for every parameter in canonical order.
enum class InitKind { kWeight, kZero, kOne };

template <typename F>
void for_each_slot(const ModelConfig& c, F&& f) {
  const std::size_t d = c.d_model, V = c.vocab_size;
  f(Shape{V, d}, InitKind::kWeight);
  f(Shape{c.max_seq_len, d}, InitKind::kWeight);
  f(Shape{d}, InitKind::kOne);
  f(Shape{d}, InitKind::kZero);
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    for (int p = 0; p < 4; ++p) {
      f(Shape{d, d}, InitKind::kWeight);
      f(Shape{d}, InitKind::kZero);
    }
    f(Shape{d}, InitKind::kOne);
    f(Shape{d}, InitKind::kZero);
    f(Shape{d, c.d_ff}, InitKind::kWeight);
    f(Shape{c.d_ff}, InitKind::kZero);
    f(Shape{c.d_ff, d}, InitKind::kWeight);
    f(Shape{d}, InitKind::kZero);
    f(Shape{d}, InitKind::kOne);
    f(Shape{d}, InitKind::kZero);
  }
  f(Shape{d, d}, InitKind::kWeight);
  f(Shape{d}, InitKind::kZero);
  f(Shape{d}, InitKind::kOne);
  f(Shape{d}, InitKind::kZero);
  f(Shape{d, V}, InitKind::kWeight);
  f(Shape{V}, InitKind::kZero);
}

// Assigns tensors, in canonical order, to the fields of params.
template <typename T>
void assign_fields(BasicTransformerParams<T>& p, std::vector<BasicTensor<T>> ts) {
  std::size_t k = 0;
  auto next = [&]() -> BasicTensor<T> { return ts.at(k++); };
  p.token_emb = next();
  p.pos_emb = next();
  p.emb_ln_gain = next();
  p.emb_ln_bias = next();
  p.layers.resize(p.config.n_layers);
  for (auto& l : p.layers) {
    l.wq = next(); l.bq = next();
    l.wk = next(); l.bk = next();
    l.wv = next(); l.bv = next();
    l.wo = next(); l.bo = next();
    l.ln1_gain = next(); l.ln1_bias = next();
    l.ff1_w = next(); l.ff1_b = next();
    l.ff2_w = next(); l.ff2_b = next();
    l.ln2_gain = next(); l.ln2_bias = next();
  }
  p.head_w = next();
  p.head_b = next();
  p.head_ln_gain = next();
  p.head_ln_bias = next();
  p.out_w = next();
  p.out_b = next();
  if (k != ts.size()) throw ContractError("parameter layout mismatch");
}

}  // namespace

template <typename T>
BasicTransformerParams<T> BasicTransformerParams<T>::clone() const {
  BasicTransformerParams<T> out;
  out.config = config;
  std::vector<BasicTensor<T>> ts;
  for (auto& t : parameters()) ts.push_back(t.clone(t.requires_grad()));
  assign_fields(out, std::move(ts));
  return out;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for_each_slot(config, [&](const Shape& s, InitKind) { n += shape_numel(s); });
  return n;
}

TransformerParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double kStd = 0.02;
  std::vector<Tensor> ts;
  for_each_slot(config, [&](const Shape& s, InitKind kind) {
    std::vector<float> v(shape_numel(s));
    switch (kind) {
      case InitKind::kZero:
        break;
      case InitKind::kOne:
        std::fill(v.begin(), v.end(), 1.0f);
        break;
      case InitKind::kWeight:
        for (auto& x : v) {
          double z;
          do {
            z = normal(rng);
          } while (std::abs(z) > 2.0);
          x = static_cast<float>(z * kStd);
        }
        break;
    }
    ts.emplace_back(s, std::move(v), true);
  });
  TransformerParams p;
  p.config = config;
  assign_fields(p, std::move(ts));
  return p;
}

template <typename To, typename From>
BasicTransformerParams<To> cast_params(const BasicTransformerParams<From>& p,
                                       bool requires_grad) {
  BasicTransformerParams<To> out;
  out.config = p.config;
  std::vector<BasicTensor<To>> ts;
  for (auto& t : p.parameters()) {
    std::vector<To> v(t.data().begin(), t.data().end());
    ts.emplace_back(t.shape(), std::move(v), requires_grad);
  }
  assign_fields(out, std::move(ts));
  return out;
}

template <typename T>
ForwardOutput<T> forward(const BasicTransformerParams<T>& params,
                         std::span<const TokenId> ids, bool train_mode,
                         std::uint64_t seed) {
  const ModelConfig& c = params.config;
  if (ids.empty()) throw InputError("forward: empty input sequence");
  if (ids.size() > c.max_seq_len)
    throw InputError("forward: sequence length " + std::to_string(ids.size()) +
                     " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  for (TokenId id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size)
      throw InputError("forward: token id " + std::to_string(id) +
                       " outside vocabulary of size " +
                       std::to_string(c.vocab_size));

  const std::size_t L = ids.size();
  const double rate = train_mode ? c.dropout_rate : 0.0;
  std::uint64_t site = 0;
  auto drop = [&](const BasicTensor<T>& x) {
    return dropout(x, rate, derive_seed(seed, site++));
  };
  const T eps = static_cast<T>(kLayerNormEps);

  std::vector<std::uint8_t> valid(L);
  for (std::size_t i = 0; i < L; ++i) valid[i] = ids[i] != kPadId;
  std::vector<std::size_t> positions(L);
  for (std::size_t i = 0; i < L; ++i) positions[i] = i;

  auto x = add(embedding(params.token_emb, ids),
               select_rows(params.pos_emb, std::span<const std::size_t>(positions)));
  x = drop(layer_norm(x, params.emb_ln_gain, params.emb_ln_bias, eps));

  for (const auto& l : params.layers) {
    auto q = add_row(matmul(x, l.wq), l.bq);
    auto k = add_row(matmul(x, l.wk), l.bk);
    auto v = add_row(matmul(x, l.wv), l.bv);
    auto a = attention(q, k, v, c.n_heads, std::span<const std::uint8_t>(valid));
    a = drop(add_row(matmul(a, l.wo), l.bo));
    x = layer_norm(add(x, a), l.ln1_gain, l.ln1_bias, eps);
    auto f = gelu(add_row(matmul(x, l.ff1_w), l.ff1_b));
    f = drop(add_row(matmul(f, l.ff2_w), l.ff2_b));
    x = layer_norm(add(x, f), l.ln2_gain, l.ln2_bias, eps);
  }

  auto h = gelu(add_row(matmul(x, params.head_w), params.head_b));
  h = layer_norm(h, params.head_ln_gain, params.head_ln_bias, eps);
  auto logits = add_row(matmul(h, params.out_w), params.out_b);
  return {x, logits};
}

Distribution predict_masked_distribution(const TransformerParams& params,
                                         std::span<const TokenId> ids,
                                         std::size_t position) {
  if (position >= ids.size())
    throw ContractError("masked position " + std::to_string(position) +
                        " outside sequence of length " +
                        std::to_string(ids.size()));
  if (ids[position] != kMaskId)
    throw ContractError("position " + std::to_string(position) +
                        " does not hold the mask token");
  const auto out = forward(params, ids, false, 0);
  const std::size_t row[] = {position};
  const auto probs = softmax_rows(select_rows(out.logits, std::span<const std::size_t>(row)));
  return Distribution(probs.data().begin(), probs.data().end());
}

std::vector<double> pooled_representation(const TransformerParams& params,
                                          std::span<const TokenId> ids) {
  if (ids.empty()) throw InputError("pooled_representation: empty input");
  const auto out = forward(params, ids, false, 0);
  const std::size_t d = out.hidden.cols();
  return std::vector<double>(out.hidden.data().begin(),
                             out.hidden.data().begin() + static_cast<std::ptrdiff_t>(d));
}

Distribution TransformerMlm::masked_distribution(std::span<const TokenId> ids,
                                                 std::size_t position) const {
  return predict_masked_distribution(params_, ids, position);
}

std::vector<double> TransformerMlm::hidden_state(std::span<const TokenId> ids,
                                                 std::size_t position) const {
  if (position >= ids.size())
    throw IndexError("hidden_state: position outside sequence");
  const auto out = forward(params_, ids, false, 0);
  const std::size_t d = out.hidden.cols();
  const auto h = out.hidden.data();
  return std::vector<double>(h.begin() + static_cast<std::ptrdiff_t>(position * d),
                             h.begin() + static_cast<std::ptrdiff_t>((position + 1) * d));
}

// --- checkpoint ------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw InputError("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const TransformerParams& params,
                                 std::uint32_t vocab_hash) {
  const ModelConfig& c = params.config;
  std::string out = "FDCK";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(c.vocab_size));
  put_u32(out, static_cast<std::uint32_t>(c.d_model));
  put_u32(out, static_cast<std::uint32_t>(c.n_heads));
  put_u32(out, static_cast<std::uint32_t>(c.n_layers));
  put_u32(out, static_cast<std::uint32_t>(c.d_ff));
  put_u32(out, static_cast<std::uint32_t>(c.max_seq_len));
  put_f32(out, static_cast<float>(c.dropout_rate));
  put_u32(out, vocab_hash);
  const auto named = params.named();
  put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.data()) put_f32(out, f);
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4) != "FDCK") throw InputError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.vocab_size = r.u32();
  c.d_model = r.u32();
  c.n_heads = r.u32();
  c.n_layers = r.u32();
  c.d_ff = r.u32();
  c.max_seq_len = r.u32();
  // Shortest decimal form of the stored float, so 0.1 reads back as 0.1.
  {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, r.f32());
    std::from_chars(buf, res.ptr, c.dropout_rate);
  }
  c.validate();
  Checkpoint ck;
  ck.vocab_hash = r.u32();
  const std::uint32_t count = r.u32();

  // Expected names/shapes come from a fresh layout for this config.
  TransformerParams layout;
  layout.config = c;
  std::vector<Tensor> shapes;
  for_each_slot(c, [&](const Shape& s, InitKind) { shapes.push_back(Tensor::zeros(s)); });
  assign_fields(layout, shapes);
  const auto expected = layout.named();
  if (count != expected.size())
    throw InputError("checkpoint has " + std::to_string(count) +
                     " arrays, config implies " + std::to_string(expected.size()));

  std::vector<Tensor> ts;
  for (const auto& [ename, et] : expected) {
    const std::string name(r.take(r.u32()));
    if (name != ename)
      throw InputError("checkpoint array '" + name + "' where '" + ename +
                       "' was expected");
    Shape s(r.u32());
    for (auto& d : s) d = r.u32();
    if (s != et.shape())
      throw InputError("checkpoint array '" + name + "' has shape " +
                       shape_str(s) + ", expected " + shape_str(et.shape()));
    std::vector<float> v(shape_numel(s));
    for (auto& f : v) f = r.f32();
    ts.emplace_back(s, std::move(v), true);
  }
  if (!r.done()) throw InputError("trailing bytes after checkpoint payload");
  ck.params.config = c;
  assign_fields(ck.params, std::move(ts));
  return ck;
}

void save_checkpoint(const TransformerParams& params, std::uint32_t vocab_hash,
                     const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(params, vocab_hash);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint32_t> expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Checkpoint ck = parse_checkpoint(ss.str());
  if (expected_vocab_hash && *expected_vocab_hash != ck.vocab_hash)
    throw HashMismatchError("checkpoint " + path.string() +
                            " was built against vocabulary " +
                            hex32(ck.vocab_hash) + ", got " +
                            hex32(*expected_vocab_hash));
  return ck;
}

template struct BasicTransformerParams<float>;
template struct BasicTransformerParams<double>;
template BasicTransformerParams<double> cast_params(const BasicTransformerParams<float>&, bool);
template BasicTransformerParams<float> cast_params(const BasicTransformerParams<double>&, bool);
template ForwardOutput<float> forward(const BasicTransformerParams<float>&,
                                      std::span<const TokenId>, bool, std::uint64_t);
template ForwardOutput<double> forward(const BasicTransformerParams<double>&,
                                       std::span<const TokenId>, bool, std::uint64_t);

}  // namespace fd
