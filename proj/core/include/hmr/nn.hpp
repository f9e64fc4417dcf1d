#pragma once

#include <map>
#include <string>

#include "hmr/autodiff.hpp"
#include "hmr/common.hpp"

namespace hmr::nn {

using ad::Tensor;
using ad::Var;

/// Ordered named parameter registry shared by optimizers and checkpoints.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (by_name_.count(name)) throw ConfigError("duplicate parameter: " + name);
    Var<T> p = Var<T>::leaf(std::move(init), trainable);
    by_name_.emplace(name, p);
    names_.push_back(name);
    return p;
  }

  Var<T>& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (const auto& name : names_) fn(name, by_name_.at(name));
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& name : names_) fn(name, by_name_.at(name));
  }

  void zero_grad() {
    for (auto& [k, v] : by_name_) v.zero_grad();
  }

  void freeze() {
    for (auto& [k, v] : by_name_) v.node()->requires_grad = false;
  }

  bool all_finite() const {
    for (const auto& [k, v] : by_name_)
      if (!v.value().all_finite()) return false;
    return true;
  }

  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& name : names_) {
      h = fnv1a64(name.data(), name.size(), h);
      const auto& t = by_name_.at(name).value();
      h = fnv1a64(t.data(), sizeof(T) * static_cast<std::size_t>(t.numel()), h);
    }
    return h;
  }

 private:
  std::map<std::string, Var<T>> by_name_;
  std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Initializers.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> randn_init(Rng& rng, std::vector<int> shape, double std_dev) {
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.normal() * std_dev);
  return t;
}

template <typename T>
Tensor<T> kaiming_init(Rng& rng, std::vector<int> shape, int fan_in) {
  return randn_init<T>(rng, std::move(shape), std::sqrt(2.0 / fan_in));
}

// ---------------------------------------------------------------------------
// Layers. Each registers its parameters in the owning store under a prefix.
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Var<T> w, b;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& prefix, int in, int out,
         Rng& rng, double w_scale = 1.0) {
    w = ps.add(prefix + ".w",
               randn_init<T>(rng, {in, out}, w_scale / std::sqrt(double(in))));
    b = ps.add(prefix + ".b", Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const { return ad::linear(x, w, b); }
};

/// 1D convolution in im2col layout; input (B, L, C_in).
template <typename T>
struct Conv1d {
  Var<T> w, b;
  int k = 3, stride = 1, pad = 1, c_out = 0;

  Conv1d() = default;
  Conv1d(ParamStore<T>& ps, const std::string& prefix, int c_in, int c_out_,
         int k_, int stride_, int pad_, Rng& rng)
      : k(k_), stride(stride_), pad(pad_), c_out(c_out_) {
    w = ps.add(prefix + ".w", kaiming_init<T>(rng, {k * c_in, c_out}, k * c_in));
    b = ps.add(prefix + ".b", Tensor<T>({c_out}));
  }

  Var<T> operator()(const Var<T>& x) const {
    const int bsz = x.value().dim(0), l = x.value().dim(1);
    const int lo = ad::conv_out_len(l, k, stride, pad);
    Var<T> cols = ad::im2col1d(x, k, stride, pad);
    Var<T> y = ad::linear(cols, w, b);
    return ad::reshape(y, {bsz, lo, c_out});
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& prefix, int c) {
    gamma = ps.add(prefix + ".gamma", Tensor<T>::full({c}, T(1)));
    beta = ps.add(prefix + ".beta", Tensor<T>({c}));
  }

  Var<T> operator()(const Var<T>& x) const {
    return ad::layer_norm(x, gamma, beta);
  }
};

/// Multi-head self-attention with optional learnable additive logit bias.
template <typename T>
struct SelfAttention {
  Linear<T> qkv, proj;
  int heads = 4;

  SelfAttention() = default;
  SelfAttention(ParamStore<T>& ps, const std::string& prefix, int c, int heads_,
                Rng& rng)
      : qkv(ps, prefix + ".qkv", c, 3 * c, rng),
        proj(ps, prefix + ".proj", c, c, rng),
        heads(heads_) {}

  /// x (B, L, C) -> (B, L, C).
  Var<T> operator()(const Var<T>& x, const Var<T>& bias = {}) const {
    const int bsz = x.value().dim(0), l = x.value().dim(1), c = x.value().dim(2);
    Var<T> packed = ad::reshape(qkv(x), {bsz, l, 3 * c});
    Var<T> attn = ad::attention_packed(packed, heads, bias);
    return ad::reshape(proj(attn), {bsz, l, c});
  }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& prefix, int c, int hidden, Rng& rng)
      : fc1(ps, prefix + ".fc1", c, hidden, rng),
        fc2(ps, prefix + ".fc2", hidden, c, rng) {}

  Var<T> operator()(const Var<T>& x) const { return fc2(ad::gelu(fc1(x))); }
};

/// Pre-norm transformer block; optional attention bias for graph variants.
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  SelfAttention<T> attn;
  Mlp<T> mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& ps, const std::string& prefix, int c,
                   int heads, int mlp_ratio, Rng& rng)
      : ln1(ps, prefix + ".ln1", c),
        ln2(ps, prefix + ".ln2", c),
        attn(ps, prefix + ".attn", c, heads, rng),
        mlp(ps, prefix + ".mlp", c, c * mlp_ratio, rng) {}

  Var<T> operator()(const Var<T>& x, const Var<T>& bias = {}) const {
    const auto shape = x.value().shape();
    Var<T> h = ad::add(x, ad::reshape(attn(ad::reshape(ln1(x), shape), bias), shape));
    return ad::add(h, ad::reshape(mlp(ad::reshape(ln2(h), shape)), shape));
  }
};

// ---------------------------------------------------------------------------
// Adam (constant learning rate).
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One update over every trainable parameter with an accumulated gradient.
  /// Returns the global gradient L2 norm.
  double step(ParamStore<T>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    double sq_norm = 0.0;
    params.for_each([&](const std::string& name, Var<T>& p) {
      if (!p.requires_grad() || !p.has_grad()) return;
      auto& state = state_[name];
      if (state.m.numel() == 0) {
        state.m = Tensor<T>(p.value().shape());
        state.v = Tensor<T>(p.value().shape());
      }
      auto g = p.grad().arr();
      sq_norm += static_cast<double>(g.square().sum());
      state.m.arr() = T(beta1_) * state.m.arr() + T(1.0 - beta1_) * g;
      state.v.arr() = T(beta2_) * state.v.arr() + T(1.0 - beta2_) * g.square();
      p.value().arr() -=
          T(lr_) * (state.m.arr() / T(bc1)) /
          ((state.v.arr() / T(bc2)).sqrt() + T(eps_));
    });
    return std::sqrt(sq_norm);
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct State {
    Tensor<T> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, State> state_;
};

}  // namespace hmr::nn
