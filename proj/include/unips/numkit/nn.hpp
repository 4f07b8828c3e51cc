#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "unips/numkit/ops.hpp"
#include "unips/numkit/rng.hpp"
#include "unips/numkit/tensor.hpp"

// Parameterized layers. Every module exposes its parameters through
// `params(list)` with stable dotted names, which is the order checkpoints and
// the optimizer see.

namespace unips::nk {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

/// Per-forward switches: dropout is active only when `training` is set.
struct ForwardCtx {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

/// Construction-time state shared by all modules of a model.
struct Builder {
  Rng rng;
  std::uint64_t next_layer_id = 0;
  explicit Builder(std::uint64_t seed) : rng(seed) {}
  std::uint64_t layer_id() { return next_layer_id++; }
};

template <class T>
std::vector<T> trunc_normal_values(Rng& rng, std::int64_t n, double sigma) {
  std::vector<T> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(sigma));
  return v;
}

template <class T>
class Linear {
public:
  Linear() = default;
  Linear(std::string name, std::int64_t in, std::int64_t out, Builder& b, bool bias = true)
      : name_(std::move(name)),
        weight_(Tensor<T>::parameter({in, out}, trunc_normal_values<T>(b.rng, in * out, 0.02))) {
    if (bias) bias_ = Tensor<T>::parameter({out}, std::vector<T>(static_cast<std::size_t>(out), T(0)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.dim(-1) != weight_.dim(0))
      throw ShapeError(name_ + ": input feature dim " + std::to_string(x.dim(-1)) + " but layer expects " +
                       std::to_string(weight_.dim(0)));
    detail::check_finite(x, name_.c_str());
    return linear(x, weight_, bias_);
  }

  void params(ParamList<T>& out) {
    out.push_back({name_ + ".weight", &weight_});
    if (bias_.defined()) out.push_back({name_ + ".bias", &bias_});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  std::int64_t in_features() const { return weight_.dim(0); }
  std::int64_t out_features() const { return weight_.dim(1); }

private:
  std::string name_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

/// 2-D convolution over NHWC maps. He-normal weights, zero bias.
template <class T>
class Conv2d {
public:
  Conv2d() = default;
  Conv2d(std::string name, std::int64_t cin, std::int64_t cout, int kernel, int stride, Builder& b)
      : name_(std::move(name)), stride_(stride), pad_(kernel / 2) {
    const double sigma = std::sqrt(2.0 / static_cast<double>(kernel * kernel * cin));
    std::vector<T> w(static_cast<std::size_t>(kernel * kernel * cin * cout));
    for (auto& v : w) v = static_cast<T>(b.rng.truncated_normal(sigma));
    weight_ = Tensor<T>::parameter({kernel, kernel, cin, cout}, std::move(w));
    bias_ = Tensor<T>::parameter({cout}, std::vector<T>(static_cast<std::size_t>(cout), T(0)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(3) != weight_.dim(2))
      throw ShapeError(name_ + ": expected [N,H,W," + std::to_string(weight_.dim(2)) + "], got " +
                       to_string(x.shape()));
    detail::check_finite(x, name_.c_str());
    return conv2d(x, weight_, bias_, stride_, pad_);
  }

  void params(ParamList<T>& out) {
    out.push_back({name_ + ".weight", &weight_});
    out.push_back({name_ + ".bias", &bias_});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  int stride() const { return stride_; }

private:
  std::string name_;
  int stride_ = 1;
  int pad_ = 0;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <class T>
class LayerNorm {
public:
  LayerNorm() = default;
  LayerNorm(std::string name, std::int64_t dim)
      : name_(std::move(name)),
        gamma_(Tensor<T>::parameter({dim}, std::vector<T>(static_cast<std::size_t>(dim), T(1)))),
        beta_(Tensor<T>::parameter({dim}, std::vector<T>(static_cast<std::size_t>(dim), T(0)))) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.dim(-1) != gamma_.numel())
      throw ShapeError(name_ + ": normalized dim " + std::to_string(x.dim(-1)) + " but layer expects " +
                       std::to_string(gamma_.numel()));
    return layer_norm(x, gamma_, beta_);
  }

  void params(ParamList<T>& out) {
    out.push_back({name_ + ".gamma", &gamma_});
    out.push_back({name_ + ".beta", &beta_});
  }

private:
  std::string name_;
  Tensor<T> gamma_;
  Tensor<T> beta_;
};

template <class T>
class Dropout {
public:
  Dropout() = default;
  Dropout(double rate, Builder& b) : rate_(rate), id_(b.layer_id()) {}
  Tensor<T> operator()(const Tensor<T>& x, const ForwardCtx& ctx) const {
    if (!ctx.training || rate_ <= 0.0) return x;
    return dropout(x, rate_, ctx.seed, id_, ctx.step);
  }
  double rate() const { return rate_; }

private:
  double rate_ = 0.0;
  std::uint64_t id_ = 0;
};

/// Multi-head attention with separate query/key/value/output projections of
/// equal width.
template <class T>
class MultiHeadAttention {
public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::int64_t dim, int heads, Builder& b)
      : heads_(heads),
        wq_(name + ".q", dim, dim, b),
        wk_(name + ".k", dim, dim, b),
        wv_(name + ".v", dim, dim, b),
        wo_(name + ".o", dim, dim, b) {
    if (heads < 1 || dim % heads != 0)
      throw ShapeError(name + ": dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                       " heads");
  }

  /// query: [B,Lq,D]; context: [B,Lk,D].
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& context) const {
    return wo_(attention(wq_(query), wk_(context), wv_(context), heads_));
  }

  /// Attention whose query side is already projected (PMA seeds).
  Tensor<T> with_projected_query(const Tensor<T>& q, const Tensor<T>& context) const {
    return wo_(attention(q, wk_(context), wv_(context), heads_));
  }

  void params(ParamList<T>& out) {
    wq_.params(out);
    wk_.params(out);
    wv_.params(out);
    wo_.params(out);
  }

  Linear<T>& q_proj() { return wq_; }
  const Linear<T>& q_proj() const { return wq_; }
  Linear<T>& k_proj() { return wk_; }
  Linear<T>& v_proj() { return wv_; }
  Linear<T>& o_proj() { return wo_; }
  int heads() const { return heads_; }

private:
  int heads_ = 1;
  Linear<T> wq_, wk_, wv_, wo_;
};

template <class T>
class FeedForward {
public:
  FeedForward() = default;
  FeedForward(const std::string& name, std::int64_t dim, std::int64_t hidden, double drop, Builder& b)
      : fc1_(name + ".fc1", dim, hidden, b), fc2_(name + ".fc2", hidden, dim, b), drop_(drop, b) {}

  Tensor<T> operator()(const Tensor<T>& x, const ForwardCtx& ctx) const {
    return fc2_(drop_(gelu(fc1_(x)), ctx));
  }

  void params(ParamList<T>& out) {
    fc1_.params(out);
    fc2_.params(out);
  }

  Linear<T>& fc1() { return fc1_; }
  Linear<T>& fc2() { return fc2_; }

private:
  Linear<T> fc1_, fc2_;
  Dropout<T> drop_;
};

/// Pre-normalization transformer layer over sets [B,L,D]:
///   x + drop(MHA(LN(x))), then + drop(FF(LN(.))).
template <class T>
class TransformerLayer {
public:
  TransformerLayer() = default;
  TransformerLayer(const std::string& name, std::int64_t dim, int heads, std::int64_t ff_dim, double drop,
                   Builder& b)
      : ln1_(name + ".ln1", dim),
        attn_(name + ".attn", dim, heads, b),
        drop1_(drop, b),
        ln2_(name + ".ln2", dim),
        ff_(name + ".ff", dim, ff_dim, drop, b),
        drop2_(drop, b) {}

  Tensor<T> operator()(const Tensor<T>& x, const ForwardCtx& ctx) const {
    const auto h = ln1_(x);
    const auto y = add(x, drop1_(attn_(h, h), ctx));
    return add(y, drop2_(ff_(ln2_(y), ctx), ctx));
  }

  void params(ParamList<T>& out) {
    ln1_.params(out);
    attn_.params(out);
    ln2_.params(out);
    ff_.params(out);
  }

  MultiHeadAttention<T>& attn() { return attn_; }
  FeedForward<T>& ff() { return ff_; }

private:
  LayerNorm<T> ln1_;
  MultiHeadAttention<T> attn_;
  Dropout<T> drop1_;
  LayerNorm<T> ln2_;
  FeedForward<T> ff_;
  Dropout<T> drop2_;
};

/// Pooling by multi-head attention with one learned seed: maps a set
/// [B,L,D] to [B,D] regardless of L.
template <class T>
class AttentionPool {
public:
  AttentionPool() = default;
  AttentionPool(const std::string& name, std::int64_t dim, int heads, std::int64_t ff_dim, double drop,
                Builder& b)
      : seed_(Tensor<T>::parameter({1, dim}, trunc_normal_values<T>(b.rng, dim, 0.02))),
        name_(name),
        ln_kv_(name + ".ln_kv", dim),
        attn_(name + ".attn", dim, heads, b),
        ln_ff_(name + ".ln_ff", dim),
        ff_(name + ".ff", dim, ff_dim, drop, b),
        drop_(drop, b) {}

  Tensor<T> operator()(const Tensor<T>& set, const ForwardCtx& ctx) const {
    if (set.rank() != 3 || set.dim(1) < 1)
      throw ShapeError(name_ + ": expected a non-empty set [B,L,D], got " + to_string(set.shape()));
    const auto B = set.dim(0), D = set.dim(2);
    const auto kv = ln_kv_(set);
    // The seed query is shared across the batch: project once, then repeat.
    auto q = reshape(repeat_rows(attn_.q_proj()(seed_), B), {B, 1, D});
    auto pooled = add(reshape(repeat_rows(seed_, B), {B, 1, D}), attn_.with_projected_query(q, kv));
    pooled = add(pooled, drop_(ff_(ln_ff_(pooled), ctx), ctx));
    return reshape(pooled, {B, D});
  }

  void params(ParamList<T>& out) {
    out.push_back({name_ + ".seed", &seed_});
    ln_kv_.params(out);
    attn_.params(out);
    ln_ff_.params(out);
    ff_.params(out);
  }

private:
  Tensor<T> seed_;
  std::string name_;
  LayerNorm<T> ln_kv_;
  MultiHeadAttention<T> attn_;
  LayerNorm<T> ln_ff_;
  FeedForward<T> ff_;
  Dropout<T> drop_;
};

/// Zeroes every parameter of a module (used by residual-identity checks).
template <class T>
void zero_params(ParamList<T> ps) {
  for (auto& p : ps)
    for (auto& v : p.tensor->data()) v = T(0);
}

}  // namespace unips::nk
