#pragma once

#include <algorithm>
#include <cmath>
#ifdef _OPENMP
#include <omp.h>
#endif
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hmr/tensor.hpp"

namespace hmr::ad {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over Tensor<T>. A Var wraps a graph node; free
// functions build new nodes. With grad mode disabled (inference) the same
// functions run value-only and record nothing.
// ---------------------------------------------------------------------------

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
  bool prev;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool grad_init = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buf() {
    if (!grad_init) {
      grad = Tensor<T>(value.shape());
      grad_init = true;
    }
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad_init; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<int>& shape() const { return node_->value.shape(); }
  std::shared_ptr<Node<T>> node() const { return node_; }

  void zero_grad() {
    node_->grad_init = false;
    node_->grad = Tensor<T>();
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
bool tracing(std::initializer_list<Var<T>> parents) {
  if (!grad_mode_flag()) return false;
  for (const auto& p : parents)
    if (p.defined() && p.requires_grad()) return true;
  return false;
}

/// Generic node builder for custom ops.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool req = false;
  if (grad_mode_flag()) {
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) req = true;
  }
  n->requires_grad = req;
  if (req) {
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

template <typename T>
void accum(const std::shared_ptr<Node<T>>& p, const Tensor<T>& g) {
  if (!p->requires_grad) return;
  if (!p->grad_init) {
    p->grad = g;
    p->grad.reshape_inplace(p->value.shape());
    p->grad_init = true;
    return;
  }
  p->grad.arr() += g.arr();
}

/// Runs reverse-mode accumulation from a scalar root.
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1)
    throw InputError("backward: root must be scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order topological sort.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  struct Frame {
    Node<T>* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node().get(), 0});
  visited.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && visited.insert(p).second)
        stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  root.node()->grad_buf().arr().setConstant(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad_init) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic.
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.value().shape() != b.value().shape())
    throw InputError(std::string(op) + ": shape mismatch");
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> v = a.value();
  v.arr() += b.value().arr();
  return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
    accum(n.parents[0], n.grad);
    accum(n.parents[1], n.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> v = a.value();
  v.arr() -= b.value().arr();
  return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
    accum(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad_buf().arr() -= n.grad.arr();
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> v = a.value();
  v.arr() *= b.value().arr();
  return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buf().arr() += n.grad.arr() * n.parents[1]->value.arr();
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad_buf().arr() += n.grad.arr() * n.parents[0]->value.arr();
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> v = a.value();
  v.arr() *= s;
  return make_op<T>(std::move(v), {a}, [s](Node<T>& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buf().arr() += n.grad.arr() * s;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> v = a.value();
  v.arr() += s;
  return make_op<T>(std::move(v), {a},
                    [](Node<T>& n) { accum(n.parents[0], n.grad); });
}

/// x (N,C) + bias (C), bias broadcast over rows.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  const auto c = x.value().cols();
  if (b.value().numel() != c) throw InputError("add_bias: width mismatch");
  Tensor<T> v = x.value();
  v.mat().rowwise() += b.value().mat(1, c).row(0);
  return make_op<T>(std::move(v), {x, b}, [c](Node<T>& n) {
    accum(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad_buf().mat(1, c).row(0) +=
          n.grad.mat().colwise().sum();
  });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::constant(a.value());
}

// ---------------------------------------------------------------------------
// Unary maps.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> v = a.value();
  v.arr() = v.arr().max(T(0));
  return make_op<T>(std::move(v), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() +=
        n.grad.arr() * (n.parents[0]->value.arr() > T(0)).template cast<T>();
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  // tanh approximation; derivative recomputed in backward.
  const T k0 = static_cast<T>(0.7978845608028654);   // sqrt(2/pi)
  const T k1 = static_cast<T>(0.044715);
  Tensor<T> v = a.value();
  auto x = a.value().arr();
  v.arr() = T(0.5) * x * (T(1) + (k0 * (x + k1 * x.cube())).tanh());
  return make_op<T>(std::move(v), {a}, [k0, k1](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto x = n.parents[0]->value.arr();
    auto u = k0 * (x + k1 * x.cube());
    auto t = u.tanh();
    auto du = k0 * (T(1) + T(3) * k1 * x.square());
    n.parents[0]->grad_buf().arr() +=
        n.grad.arr() *
        (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t.square()) * du);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> v = a.value();
  v.arr() = T(1) / (T(1) + (-v.arr()).exp());
  Tensor<T> saved = v;
  return make_op<T>(std::move(v), {a}, [saved](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto s = saved.arr();
    n.parents[0]->grad_buf().arr() += n.grad.arr() * s * (T(1) - s);
  });
}

template <typename T>
Var<T> tanh_(const Var<T>& a) {
  Tensor<T> v = a.value();
  v.arr() = v.arr().tanh();
  Tensor<T> saved = v;
  return make_op<T>(std::move(v), {a}, [saved](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() +=
        n.grad.arr() * (T(1) - saved.arr().square());
  });
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
  Tensor<T> v = a.value();
  // log(1+exp(x)) = max(x,0) + log1p(exp(-|x|))
  auto x = a.value().arr();
  v.arr() = x.max(T(0)) + (-x.abs()).exp().log1p();
  return make_op<T>(std::move(v), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto x = n.parents[0]->value.arr();
    n.parents[0]->grad_buf().arr() +=
        n.grad.arr() * (T(1) / (T(1) + (-x).exp()));
  });
}

template <typename T>
Var<T> abs_(const Var<T>& a) {
  Tensor<T> v = a.value();
  v.arr() = v.arr().abs();
  return make_op<T>(std::move(v), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() +=
        n.grad.arr() * n.parents[0]->value.arr().sign();
  });
}

template <typename T>
Var<T> square_(const Var<T>& a) {
  Tensor<T> v = a.value();
  v.arr() = v.arr().square();
  return make_op<T>(std::move(v), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() +=
        n.grad.arr() * T(2) * n.parents[0]->value.arr();
  });
}

template <typename T>
Var<T> exp_(const Var<T>& a) {
  Tensor<T> v = a.value();
  v.arr() = v.arr().exp();
  Tensor<T> saved = v;
  return make_op<T>(std::move(v), {a}, [saved](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() += n.grad.arr() * saved.arr();
  });
}

template <typename T>
Var<T> log_(const Var<T>& a) {
  Tensor<T> v = a.value();
  v.arr() = v.arr().log();
  return make_op<T>(std::move(v), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() += n.grad.arr() / n.parents[0]->value.arr();
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> v({1});
  v[0] = a.value().arr().sum();
  return make_op<T>(std::move(v), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() += n.grad[0];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  const T inv = T(1) / static_cast<T>(a.value().numel());
  Tensor<T> v({1});
  v[0] = a.value().arr().sum() * inv;
  return make_op<T>(std::move(v), {a}, [inv](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() += n.grad[0] * inv;
  });
}

/// Mean absolute difference over all entries (L1 mean).
template <typename T>
Var<T> l1_mean(const Var<T>& a, const Var<T>& b) {
  return mean_all(abs_(sub(a, b)));
}

/// Mean squared difference over all entries.
template <typename T>
Var<T> mse_mean(const Var<T>& a, const Var<T>& b) {
  return mean_all(square_(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

/// (., k) x (k, n). Leading dims of `a` are preserved.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto k = a.value().cols();
  if (b.value().rank() != 2 || b.value().dim(0) != k)
    throw InputError("matmul: inner dimension mismatch");
  const auto m = a.value().rows();
  const auto n = b.value().cols();
  std::vector<int> out_shape(a.value().shape());
  out_shape.back() = static_cast<int>(n);
  Tensor<T> v(out_shape);
  v.mat(m, n).noalias() = a.value().mat() * b.value().mat();
  return make_op<T>(std::move(v), {a, b}, [m, k, n](Node<T>& n_) {
    auto g = n_.grad.mat(m, n);
    if (n_.parents[0]->requires_grad)
      n_.parents[0]->grad_buf().mat(m, k).noalias() +=
          g * n_.parents[1]->value.mat().transpose();
    if (n_.parents[1]->requires_grad)
      n_.parents[1]->grad_buf().mat(k, n).noalias() +=
          n_.parents[0]->value.mat(m, k).transpose() * g;
  });
}

/// x (N, Cin) -> x W + b with W (Cin, Cout), b (Cout) optional.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  Var<T> y = matmul(x, w);
  if (b.defined()) y = add_bias(y, b);
  return y;
}

template <typename T>
Var<T> transpose2d(const Var<T>& a) {
  if (a.value().rank() != 2) throw InputError("transpose2d: rank != 2");
  const auto m = a.value().dim(0), n = a.value().dim(1);
  Tensor<T> v({n, m});
  v.mat() = a.value().mat().transpose();
  return make_op<T>(std::move(v), {a}, [](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    nd.parents[0]->grad_buf().mat() += nd.grad.mat().transpose();
  });
}

/// out_b = A x_b for every leading index b; A is a constant matrix (M, N),
/// x is (B, N, C).
template <typename T>
Var<T> left_matmul_batched(const Tensor<T>& a, const Var<T>& x) {
  if (x.value().rank() != 3) throw InputError("left_matmul_batched: rank != 3");
  const int bsz = x.value().dim(0), nn = x.value().dim(1), cc = x.value().dim(2);
  if (a.rank() != 2 || a.dim(1) != nn)
    throw InputError("left_matmul_batched: shape mismatch");
  const int mm = a.dim(0);
  Tensor<T> v({bsz, mm, cc});
  for (int b = 0; b < bsz; ++b) {
    MatMap<T>(v.data() + static_cast<std::int64_t>(b) * mm * cc, mm, cc)
        .noalias() = a.mat() * ConstMatMap<T>(x.value().data() +
                                              static_cast<std::int64_t>(b) * nn * cc,
                                              nn, cc);
  }
  Tensor<T> a_copy = a;
  return make_op<T>(std::move(v), {x}, [a_copy, bsz, nn, mm, cc](Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& gx = nd.parents[0]->grad_buf();
    for (int b = 0; b < bsz; ++b) {
      MatMap<T>(gx.data() + static_cast<std::int64_t>(b) * nn * cc, nn, cc)
          .noalias() += a_copy.mat().transpose() *
                        ConstMatMap<T>(nd.grad.data() +
                                       static_cast<std::int64_t>(b) * mm * cc,
                                       mm, cc);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  Tensor<T> v = a.value().reshaped(std::move(shape));
  return make_op<T>(std::move(v), {a}, [](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().arr() += n.grad.arr();
  });
}

/// Slice of folded rows [r0, r0+len). Result shape {len, cols}.
template <typename T>
Var<T> slice_rows(const Var<T>& a, std::int64_t r0, std::int64_t len) {
  const auto c = a.value().cols();
  if (r0 < 0 || r0 + len > a.value().rows())
    throw InputError("slice_rows: out of range");
  Tensor<T> v({static_cast<int>(len), static_cast<int>(c)});
  v.mat() = a.value().mat().middleRows(r0, len);
  return make_op<T>(std::move(v), {a}, [r0, len, c](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().mat().middleRows(r0, len) += n.grad.mat(len, c);
  });
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  const auto c = a.value().cols();
  if (b.value().cols() != c) throw InputError("concat_rows: width mismatch");
  const auto ra = a.value().rows(), rb = b.value().rows();
  Tensor<T> v({static_cast<int>(ra + rb), static_cast<int>(c)});
  v.mat().topRows(ra) = a.value().mat();
  v.mat().bottomRows(rb) = b.value().mat();
  return make_op<T>(std::move(v), {a, b}, [ra, rb](Node<T>& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buf().mat() += n.grad.mat().topRows(ra);
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad_buf().mat() += n.grad.mat().bottomRows(rb);
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::int64_t c0, std::int64_t len) {
  const auto r = a.value().rows(), c = a.value().cols();
  if (c0 < 0 || c0 + len > c) throw InputError("slice_cols: out of range");
  Tensor<T> v({static_cast<int>(r), static_cast<int>(len)});
  v.mat() = a.value().mat().middleCols(c0, len);
  return make_op<T>(std::move(v), {a}, [c0, len, r](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    n.parents[0]->grad_buf().mat().middleCols(c0, len) += n.grad.mat(r, len);
  });
}

// ---------------------------------------------------------------------------
// Row-wise softmax family.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  Tensor<T> v = a.value();
  auto m = v.mat();
  for (std::int64_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
  Tensor<T> saved = v;
  return make_op<T>(std::move(v), {a}, [saved](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto p = saved.mat();
    auto g = n.grad.mat();
    auto& gx = n.parents[0]->grad_buf();
    for (std::int64_t r = 0; r < p.rows(); ++r) {
      const T dot = (g.row(r).array() * p.row(r).array()).sum();
      gx.mat().row(r).array() +=
          p.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& a) {
  Tensor<T> v = a.value();
  auto m = v.mat();
  for (std::int64_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row - mx).exp().sum());
    row -= lse;
  }
  Tensor<T> saved = v;
  return make_op<T>(std::move(v), {a}, [saved](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto lp = saved.mat();
    auto g = n.grad.mat();
    auto& gx = n.parents[0]->grad_buf();
    for (std::int64_t r = 0; r < lp.rows(); ++r) {
      const T gsum = g.row(r).sum();
      gx.mat().row(r).array() +=
          g.row(r).array() - lp.row(r).array().exp() * gsum;
    }
  });
}

/// -mean over selected rows of logp[r, target[r]].
template <typename T>
Var<T> nll_selected(const Var<T>& logp, std::vector<int> targets,
                    std::vector<std::uint8_t> selected) {
  const auto r = logp.value().rows();
  const auto c = logp.value().cols();
  if (static_cast<std::int64_t>(targets.size()) != r ||
      static_cast<std::int64_t>(selected.size()) != r)
    throw InputError("nll_selected: row count mismatch");
  std::int64_t count = 0;
  T acc = T(0);
  for (std::int64_t i = 0; i < r; ++i) {
    if (!selected[static_cast<std::size_t>(i)]) continue;
    if (targets[static_cast<std::size_t>(i)] < 0 ||
        targets[static_cast<std::size_t>(i)] >= c)
      throw TokenError("nll_selected: target index out of range");
    acc -= logp.value()[i * c + targets[static_cast<std::size_t>(i)]];
    ++count;
  }
  if (count == 0) throw InputError("nll_selected: empty selection");
  Tensor<T> v({1});
  v[0] = acc / static_cast<T>(count);
  return make_op<T>(std::move(v), {logp},
                    [targets = std::move(targets),
                     selected = std::move(selected), c, count](Node<T>& n) {
                      if (!n.parents[0]->requires_grad) return;
                      auto& g = n.parents[0]->grad_buf();
                      const T s = -n.grad[0] / static_cast<T>(count);
                      for (std::size_t i = 0; i < targets.size(); ++i) {
                        if (!selected[i]) continue;
                        g[static_cast<std::int64_t>(i) * c + targets[i]] += s;
                      }
                    });
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = static_cast<T>(1e-5)) {
  const auto rows = x.value().rows();
  const auto c = x.value().cols();
  if (gamma.value().numel() != c || beta.value().numel() != c)
    throw InputError("layer_norm: parameter width mismatch");
  Tensor<T> xhat(x.value().shape());
  Tensor<T> invstd({static_cast<int>(rows)});
  Tensor<T> v(x.value().shape());
  auto xm = x.value().mat();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T mean = xm.row(r).mean();
    const T var = (xm.row(r).array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    invstd[r] = is;
    xhat.mat().row(r).array() = (xm.row(r).array() - mean) * is;
    v.mat().row(r).array() = xhat.mat().row(r).array() *
                                 gamma.value().mat(1, c).row(0).array() +
                             beta.value().mat(1, c).row(0).array();
  }
  return make_op<T>(
      std::move(v), {x, gamma, beta},
      [xhat = std::move(xhat), invstd = std::move(invstd), rows, c](Node<T>& n) {
        auto g = n.grad.mat(rows, c);
        auto xh = xhat.mat();
        if (n.parents[1]->requires_grad) {
          auto& gg = n.parents[1]->grad_buf();
          gg.mat(1, c).row(0) += (g.array() * xh.array()).colwise().sum().matrix();
        }
        if (n.parents[2]->requires_grad) {
          auto& gb = n.parents[2]->grad_buf();
          gb.mat(1, c).row(0) += g.colwise().sum();
        }
        if (n.parents[0]->requires_grad) {
          auto& gx = n.parents[0]->grad_buf();
          auto gamma_row = n.parents[1]->value.mat(1, c).row(0).array();
          for (std::int64_t r = 0; r < rows; ++r) {
            auto gr = g.row(r).array() * gamma_row;
            const T m1 = gr.mean();
            const T m2 = (gr * xh.row(r).array()).mean();
            gx.mat(rows, c).row(r).array() +=
                invstd[r] * (gr - m1 - xh.row(r).array() * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Embedding lookup.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  const auto rows = table.value().rows();
  const auto c = table.value().cols();
  Tensor<T> v({static_cast<int>(ids.size()), static_cast<int>(c)});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= rows)
      throw TokenError("embedding: id out of range");
    v.mat().row(static_cast<std::int64_t>(i)) = table.value().mat().row(ids[i]);
  }
  return make_op<T>(std::move(v), {table}, [ids](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->grad_buf();
    for (std::size_t i = 0; i < ids.size(); ++i)
      g.mat().row(ids[i]) += n.grad.mat().row(static_cast<std::int64_t>(i));
  });
}

// ---------------------------------------------------------------------------
// Blocked broadcasts: x is (B*L, C); the companion is per-block (B, C).
// ---------------------------------------------------------------------------

template <typename T>
Var<T> mul_rows_blocked(const Var<T>& x, const Var<T>& gate, int block_len) {
  const auto rows = x.value().rows();
  const auto c = x.value().cols();
  const auto bsz = rows / block_len;
  if (gate.value().rows() != bsz || gate.value().cols() != c)
    throw InputError("mul_rows_blocked: gate shape mismatch");
  Tensor<T> v = x.value();
  for (std::int64_t r = 0; r < rows; ++r)
    v.mat().row(r).array() *= gate.value().mat().row(r / block_len).array();
  return make_op<T>(std::move(v), {x, gate}, [block_len, rows](Node<T>& n) {
    auto g = n.grad.mat();
    if (n.parents[0]->requires_grad) {
      auto& gx = n.parents[0]->grad_buf();
      for (std::int64_t r = 0; r < rows; ++r)
        gx.mat().row(r).array() +=
            g.row(r).array() *
            n.parents[1]->value.mat().row(r / block_len).array();
    }
    if (n.parents[1]->requires_grad) {
      auto& gg = n.parents[1]->grad_buf();
      for (std::int64_t r = 0; r < rows; ++r)
        gg.mat().row(r / block_len).array() +=
            g.row(r).array() * n.parents[0]->value.mat().row(r).array();
    }
  });
}

template <typename T>
Var<T> mean_rows_blocked(const Var<T>& x, int block_len) {
  const auto rows = x.value().rows();
  const auto c = x.value().cols();
  const auto bsz = rows / block_len;
  Tensor<T> v({static_cast<int>(bsz), static_cast<int>(c)});
  v.set_zero();
  for (std::int64_t r = 0; r < rows; ++r)
    v.mat().row(r / block_len) += x.value().mat().row(r);
  v.arr() /= static_cast<T>(block_len);
  return make_op<T>(std::move(v), {x}, [block_len, rows](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->grad_buf();
    const T inv = T(1) / static_cast<T>(block_len);
    for (std::int64_t r = 0; r < rows; ++r)
      gx.mat().row(r).array() +=
          n.grad.mat().row(r / block_len).array() * inv;
  });
}

// ---------------------------------------------------------------------------
// 1D convolution support (im2col layout). x is (B, L, C).
// ---------------------------------------------------------------------------

inline int conv_out_len(int l, int k, int stride, int pad) {
  return (l + 2 * pad - k) / stride + 1;
}

template <typename T>
Var<T> im2col1d(const Var<T>& x, int k, int stride, int pad) {
  if (x.value().rank() != 3) throw InputError("im2col1d: rank != 3");
  const int bsz = x.value().dim(0), l = x.value().dim(1), c = x.value().dim(2);
  const int lo = conv_out_len(l, k, stride, pad);
  if (lo <= 0) throw InputError("im2col1d: empty output");
  Tensor<T> v({bsz * lo, k * c});
  v.set_zero();
  const T* xd = x.value().data();
  T* vd = v.data();
#pragma omp parallel for schedule(static)
  for (int b = 0; b < bsz; ++b) {
    for (int o = 0; o < lo; ++o) {
      T* dst = vd + (static_cast<std::int64_t>(b) * lo + o) * k * c;
      for (int t = 0; t < k; ++t) {
        const int i = o * stride + t - pad;
        if (i < 0 || i >= l) continue;
        const T* src = xd + (static_cast<std::int64_t>(b) * l + i) * c;
        std::copy(src, src + c, dst + static_cast<std::int64_t>(t) * c);
      }
    }
  }
  return make_op<T>(std::move(v), {x}, [bsz, l, c, k, stride, pad, lo](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->grad_buf();
    const T* gd = n.grad.data();
    T* xd = gx.data();
#pragma omp parallel for schedule(static)
    for (int b = 0; b < bsz; ++b) {
      for (int o = 0; o < lo; ++o) {
        const T* src = gd + (static_cast<std::int64_t>(b) * lo + o) * k * c;
        for (int t = 0; t < k; ++t) {
          const int i = o * stride + t - pad;
          if (i < 0 || i >= l) continue;
          T* dst = xd + (static_cast<std::int64_t>(b) * l + i) * c;
          ConstArrMap<T> s(src + static_cast<std::int64_t>(t) * c, c);
          ArrMap<T>(dst, c) += s;
        }
      }
    }
  });
}

/// Nearest-neighbour 2x upsample along the sequence axis. x (B, L, C).
template <typename T>
Var<T> nearest_upsample1d(const Var<T>& x) {
  if (x.value().rank() != 3) throw InputError("nearest_upsample1d: rank != 3");
  const int bsz = x.value().dim(0), l = x.value().dim(1), c = x.value().dim(2);
  Tensor<T> v({bsz, 2 * l, c});
  for (int b = 0; b < bsz; ++b)
    for (int i = 0; i < l; ++i) {
      const T* src = x.value().data() + (static_cast<std::int64_t>(b) * l + i) * c;
      T* d0 = v.data() + (static_cast<std::int64_t>(b) * 2 * l + 2 * i) * c;
      std::copy(src, src + c, d0);
      std::copy(src, src + c, d0 + c);
    }
  return make_op<T>(std::move(v), {x}, [bsz, l, c](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->grad_buf();
    for (int b = 0; b < bsz; ++b)
      for (int i = 0; i < l; ++i) {
        const T* g0 =
            n.grad.data() + (static_cast<std::int64_t>(b) * 2 * l + 2 * i) * c;
        T* dst = gx.data() + (static_cast<std::int64_t>(b) * l + i) * c;
        ArrMap<T>(dst, c) += ConstArrMap<T>(g0, c) + ConstArrMap<T>(g0 + c, c);
      }
  });
}

/// (B, H, W, 4*C) -> (B, 2H, 2W, C); inverse of space-to-depth. Quadrant
/// order: (di, dj) = (0,0), (0,1), (1,0), (1,1).
template <typename T>
Var<T> depth_to_space2(const Var<T>& x) {
  if (x.value().rank() != 4) throw InputError("depth_to_space2: rank != 4");
  const int bsz = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int c4 = x.value().dim(3);
  if (c4 % 4 != 0) throw InputError("depth_to_space2: channels not divisible by 4");
  const int c = c4 / 4;
  Tensor<T> v({bsz, 2 * h, 2 * w, c});
  const auto in_at = [&](int b, int i, int j) {
    return x.value().data() +
           ((static_cast<std::int64_t>(b) * h + i) * w + j) * c4;
  };
  for (int b = 0; b < bsz; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const T* src = in_at(b, i, j);
        for (int q = 0; q < 4; ++q) {
          const int oi = 2 * i + (q >> 1), oj = 2 * j + (q & 1);
          T* dst = v.data() +
                   ((static_cast<std::int64_t>(b) * 2 * h + oi) * 2 * w + oj) * c;
          std::copy(src + static_cast<std::int64_t>(q) * c,
                    src + static_cast<std::int64_t>(q + 1) * c, dst);
        }
      }
  return make_op<T>(std::move(v), {x}, [bsz, h, w, c, c4](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->grad_buf();
    for (int b = 0; b < bsz; ++b)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          T* dst = gx.data() +
                   ((static_cast<std::int64_t>(b) * h + i) * w + j) * c4;
          for (int q = 0; q < 4; ++q) {
            const int oi = 2 * i + (q >> 1), oj = 2 * j + (q & 1);
            const T* src =
                n.grad.data() +
                ((static_cast<std::int64_t>(b) * 2 * h + oi) * 2 * w + oj) * c;
            ArrMap<T>(dst + static_cast<std::int64_t>(q) * c, c) +=
                ConstArrMap<T>(src, c);
          }
        }
  });
}

// ---------------------------------------------------------------------------
// Fused multi-head self-attention. qkv is (B, L, 3C) packed as [q | k | v]
// per position. Optional additive bias (L, L) is shared across batch/heads.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> attention_packed(const Var<T>& qkv, int n_heads, const Var<T>& bias) {
  if (qkv.value().rank() != 3) throw InputError("attention_packed: rank != 3");
  const int bsz = qkv.value().dim(0), l = qkv.value().dim(1);
  const int c3 = qkv.value().dim(2);
  if (c3 % 3 != 0) throw InputError("attention_packed: expected packed qkv");
  const int c = c3 / 3;
  if (c % n_heads != 0) throw InputError("attention_packed: heads mismatch");
  const int dh = c / n_heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  const bool with_bias = bias.defined();
  if (with_bias &&
      (bias.value().rows() != l || bias.value().cols() != l))
    throw InputError("attention_packed: bias must be (L, L)");

  using Stride = Eigen::OuterStride<>;
  using SMap = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Stride>;
  using SMapMut = Eigen::Map<RowMat<T>, Eigen::Unaligned, Stride>;

  Tensor<T> out({bsz, l, c});
  Tensor<T> probs({bsz * n_heads, l, l});
  const T* qd = qkv.value().data();
#pragma omp parallel for schedule(static)
  for (int bh = 0; bh < bsz * n_heads; ++bh) {
    const int b = bh / n_heads, h = bh % n_heads;
    const std::int64_t base = static_cast<std::int64_t>(b) * l * c3;
    SMap q(qd + base + h * dh, l, dh, Stride(c3));
    SMap k(qd + base + c + h * dh, l, dh, Stride(c3));
    SMap v(qd + base + 2 * c + h * dh, l, dh, Stride(c3));
    MatMap<T> p(probs.data() + static_cast<std::int64_t>(bh) * l * l, l, l);
    p.noalias() = q * k.transpose() * scl;
    if (with_bias) p += bias.value().mat(l, l);
    for (int r = 0; r < l; ++r) {
      auto row = p.row(r).array();
      row -= row.maxCoeff();
      row = row.exp();
      row /= row.sum();
    }
    SMapMut o(out.data() + static_cast<std::int64_t>(b) * l * c + h * dh, l,
              dh, Stride(c));
    o.noalias() = p * v;
  }

  std::vector<Var<T>> parents = {qkv};
  if (with_bias) parents.push_back(bias);
  return make_op<T>(
      std::move(out), std::move(parents),
      [probs = std::move(probs), bsz, l, c, c3, n_heads, dh, scl,
       with_bias](Node<T>& n) {
        const bool need_qkv = n.parents[0]->requires_grad;
        const bool need_bias = with_bias && n.parents[1]->requires_grad;
        if (!need_qkv && !need_bias) return;
        Tensor<T>* gqkv = need_qkv ? &n.parents[0]->grad_buf() : nullptr;
        Tensor<T>* gbias = need_bias ? &n.parents[1]->grad_buf() : nullptr;
        const T* qd = n.parents[0]->value.data();
        Tensor<T> ds_all;
        if (need_bias) ds_all = Tensor<T>({bsz * n_heads, l, l});
#pragma omp parallel for schedule(static)
        for (int bh = 0; bh < bsz * n_heads; ++bh) {
          const int b = bh / n_heads, h = bh % n_heads;
          RowMat<T> dp(l, l), ds(l, l);
          const std::int64_t base = static_cast<std::int64_t>(b) * l * c3;
          SMap q(qd + base + h * dh, l, dh, Stride(c3));
          SMap k(qd + base + c + h * dh, l, dh, Stride(c3));
          SMap v(qd + base + 2 * c + h * dh, l, dh, Stride(c3));
          ConstMatMap<T> p(probs.data() + static_cast<std::int64_t>(bh) * l * l,
                           l, l);
          SMap go(n.grad.data() + static_cast<std::int64_t>(b) * l * c + h * dh,
                  l, dh, Stride(c));
          dp.noalias() = go * v.transpose();
          for (int r = 0; r < l; ++r) {
            const T dot = (dp.row(r).array() * p.row(r).array()).sum();
            ds.row(r).array() = p.row(r).array() * (dp.row(r).array() - dot);
          }
          if (need_bias)
            MatMap<T>(ds_all.data() + static_cast<std::int64_t>(bh) * l * l, l,
                      l) = ds;
          if (need_qkv) {
            SMapMut gq(gqkv->data() + base + h * dh, l, dh, Stride(c3));
            SMapMut gk(gqkv->data() + base + c + h * dh, l, dh, Stride(c3));
            SMapMut gv(gqkv->data() + base + 2 * c + h * dh, l, dh, Stride(c3));
            gq.noalias() += ds * k * scl;
            gk.noalias() += ds.transpose() * q * scl;
            gv.noalias() += p.transpose() * go;
          }
        }
        if (need_bias)
          for (int bh = 0; bh < bsz * n_heads; ++bh)
            gbias->mat(l, l) +=
                ConstMatMap<T>(ds_all.data() + static_cast<std::int64_t>(bh) * l * l,
                               l, l);
      });
}

// ---------------------------------------------------------------------------
// Bilinear point sampling from a feature map, zero padding outside.
// map: (B, H, W, C); locs: (B, N, 2) normalized to [0,1]^2 (u, v), pixel
// centers at ((j+0.5)/W, (i+0.5)/H). Output (B, N, C).
// ---------------------------------------------------------------------------

template <typename T>
Var<T> grid_sample(const Var<T>& map, const Var<T>& locs) {
  if (map.value().rank() != 4 || locs.value().rank() != 3 ||
      locs.value().dim(2) != 2)
    throw InputError("grid_sample: bad shapes");
  const int bsz = map.value().dim(0), h = map.value().dim(1),
            w = map.value().dim(2), c = map.value().dim(3);
  if (locs.value().dim(0) != bsz) throw InputError("grid_sample: batch mismatch");
  const int n_pts = locs.value().dim(1);
  Tensor<T> out({bsz, n_pts, c});
  out.set_zero();

  const auto map_row = [&](const T* base, int b, int i, int j) {
    return base + ((static_cast<std::int64_t>(b) * h + i) * w + j) * c;
  };

  const T* md = map.value().data();
  const T* ld = locs.value().data();
#pragma omp parallel for schedule(static)
  for (int b = 0; b < bsz; ++b) {
    for (int p = 0; p < n_pts; ++p) {
      const T u = ld[(static_cast<std::int64_t>(b) * n_pts + p) * 2 + 0];
      const T v = ld[(static_cast<std::int64_t>(b) * n_pts + p) * 2 + 1];
      const T x = u * static_cast<T>(w) - T(0.5);
      const T y = v * static_cast<T>(h) - T(0.5);
      const int j0 = static_cast<int>(std::floor(x));
      const int i0 = static_cast<int>(std::floor(y));
      const T fx = x - static_cast<T>(j0);
      const T fy = y - static_cast<T>(i0);
      T* dst = out.data() + (static_cast<std::int64_t>(b) * n_pts + p) * c;
      for (int di = 0; di < 2; ++di) {
        const int i = i0 + di;
        if (i < 0 || i >= h) continue;
        const T wy = di ? fy : T(1) - fy;
        for (int dj = 0; dj < 2; ++dj) {
          const int j = j0 + dj;
          if (j < 0 || j >= w) continue;
          const T wt = wy * (dj ? fx : T(1) - fx);
          ArrMap<T>(dst, c) += wt * ConstArrMap<T>(map_row(md, b, i, j), c);
        }
      }
    }
  }

  return make_op<T>(std::move(out), {map, locs}, [bsz, h, w, c, n_pts](Node<T>& nd) {
    const bool need_map = nd.parents[0]->requires_grad;
    const bool need_locs = nd.parents[1]->requires_grad;
    if (!need_map && !need_locs) return;
    const T* md = nd.parents[0]->value.data();
    const T* ld = nd.parents[1]->value.data();
    Tensor<T>* gm = need_map ? &nd.parents[0]->grad_buf() : nullptr;
    Tensor<T>* gl = need_locs ? &nd.parents[1]->grad_buf() : nullptr;
    const auto at = [&](const T* base, int b, int i, int j) {
      return base + ((static_cast<std::int64_t>(b) * h + i) * w + j) * c;
    };
#pragma omp parallel for schedule(static)
    for (int b = 0; b < bsz; ++b) {
      for (int p = 0; p < n_pts; ++p) {
        const std::int64_t li = (static_cast<std::int64_t>(b) * n_pts + p) * 2;
        const T u = ld[li + 0], v = ld[li + 1];
        const T x = u * static_cast<T>(w) - T(0.5);
        const T y = v * static_cast<T>(h) - T(0.5);
        const int j0 = static_cast<int>(std::floor(x));
        const int i0 = static_cast<int>(std::floor(y));
        const T fx = x - static_cast<T>(j0);
        const T fy = y - static_cast<T>(i0);
        const T* go =
            nd.grad.data() + (static_cast<std::int64_t>(b) * n_pts + p) * c;
        T dfx = T(0), dfy = T(0);
        for (int di = 0; di < 2; ++di) {
          const int i = i0 + di;
          if (i < 0 || i >= h) continue;
          const T wy = di ? fy : T(1) - fy;
          const T sy = di ? T(1) : T(-1);
          for (int dj = 0; dj < 2; ++dj) {
            const int j = j0 + dj;
            if (j < 0 || j >= w) continue;
            const T wx = dj ? fx : T(1) - fx;
            const T sx = dj ? T(1) : T(-1);
            if (need_map)
              ArrMap<T>(gm->data() + (at(md, b, i, j) - md), c) +=
                  wy * wx * ConstArrMap<T>(go, c);
            if (need_locs) {
              const T dot =
                  (ConstArrMap<T>(go, c) * ConstArrMap<T>(at(md, b, i, j), c))
                      .sum();
              dfx += sx * wy * dot;
              dfy += sy * wx * dot;
            }
          }
        }
        if (need_locs) {
          (*gl)[li + 0] += dfx * static_cast<T>(w);
          (*gl)[li + 1] += dfy * static_cast<T>(h);
        }
      }
    }
  });
}

/// out[g, :] = sum_s A[g, s] * V[g, s, :]; V (G, S, C), A (G, S).
template <typename T>
Var<T> weighted_sum_groups(const Var<T>& values, const Var<T>& weights) {
  if (values.value().rank() != 3 || weights.value().rank() != 2)
    throw InputError("weighted_sum_groups: bad shapes");
  const int g = values.value().dim(0), s = values.value().dim(1),
            c = values.value().dim(2);
  if (weights.value().dim(0) != g || weights.value().dim(1) != s)
    throw InputError("weighted_sum_groups: weight shape mismatch");
  Tensor<T> out({g, c});
  for (int i = 0; i < g; ++i) {
    ConstMatMap<T> vi(values.value().data() + static_cast<std::int64_t>(i) * s * c,
                      s, c);
    out.mat().row(i).noalias() =
        weights.value().mat().row(i) * vi;
  }
  return make_op<T>(std::move(out), {values, weights}, [g, s, c](Node<T>& n) {
    const bool need_v = n.parents[0]->requires_grad;
    const bool need_w = n.parents[1]->requires_grad;
    for (int i = 0; i < g; ++i) {
      ConstMatMap<T> vi(n.parents[0]->value.data() +
                            static_cast<std::int64_t>(i) * s * c,
                        s, c);
      auto grow = n.grad.mat().row(i);
      if (need_v) {
        MatMap<T> gv(n.parents[0]->grad_buf().data() +
                         static_cast<std::int64_t>(i) * s * c,
                     s, c);
        gv.noalias() +=
            n.parents[1]->value.mat().row(i).transpose() * grow;
      }
      if (need_w) {
        n.parents[1]->grad_buf().mat().row(i).noalias() +=
            grow * vi.transpose();
      }
    }
  });
}

/// x (B*M, C) + e (M, C), e tiled across the batch blocks.
template <typename T>
Var<T> add_tiled(const Var<T>& x, const Var<T>& e) {
  const auto rows = x.value().rows();
  const auto m = e.value().rows();
  const auto c = x.value().cols();
  if (e.value().cols() != c || rows % m != 0)
    throw InputError("add_tiled: shape mismatch");
  Tensor<T> v = x.value();
  for (std::int64_t r = 0; r < rows; ++r)
    v.mat().row(r) += e.value().mat().row(r % m);
  return make_op<T>(std::move(v), {x, e}, [rows, m](Node<T>& n) {
    if (n.parents[0]->requires_grad) accum(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      auto& ge = n.parents[1]->grad_buf();
      for (std::int64_t r = 0; r < rows; ++r)
        ge.mat().row(r % m) += n.grad.mat().row(r);
    }
  });
}

/// x (B*Q*rep, C) + e (Q, C) where row r maps to e row (r / rep) % Q.
template <typename T>
Var<T> add_repeat_rows(const Var<T>& x, const Var<T>& e, std::int64_t rep) {
  const auto rows = x.value().rows();
  const auto q = e.value().rows();
  if (e.value().cols() != x.value().cols() || rows % (q * rep) != 0)
    throw InputError("add_repeat_rows: shape mismatch");
  Tensor<T> v = x.value();
  for (std::int64_t r = 0; r < rows; ++r)
    v.mat().row(r) += e.value().mat().row((r / rep) % q);
  return make_op<T>(std::move(v), {x, e}, [rows, q, rep](Node<T>& n) {
    if (n.parents[0]->requires_grad) accum(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      auto& ge = n.parents[1]->grad_buf();
      for (std::int64_t r = 0; r < rows; ++r)
        ge.mat().row((r / rep) % q) += n.grad.mat().row(r);
    }
  });
}

/// Repeats each row of x (B, C) `rep` times -> (B*rep, C).
template <typename T>
Var<T> tile_rows_blocked(const Var<T>& x, std::int64_t rep) {
  const auto bsz = x.value().rows();
  const auto c = x.value().cols();
  Tensor<T> v({static_cast<int>(bsz * rep), static_cast<int>(c)});
  for (std::int64_t r = 0; r < bsz * rep; ++r)
    v.mat().row(r) = x.value().mat().row(r / rep);
  return make_op<T>(std::move(v), {x}, [bsz, rep](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->grad_buf();
    for (std::int64_t r = 0; r < bsz * rep; ++r)
      gx.mat().row(r / rep) += n.grad.mat().row(r);
  });
}

/// Concatenates along the sequence axis: (B, La, C) + (B, Lb, C).
template <typename T>
Var<T> concat_seq(const Var<T>& a, const Var<T>& b) {
  if (a.value().rank() != 3 || b.value().rank() != 3)
    throw InputError("concat_seq: rank != 3");
  const int bsz = a.value().dim(0), la = a.value().dim(1), c = a.value().dim(2);
  const int lb = b.value().dim(1);
  if (b.value().dim(0) != bsz || b.value().dim(2) != c)
    throw InputError("concat_seq: shape mismatch");
  Tensor<T> v({bsz, la + lb, c});
  for (int i = 0; i < bsz; ++i) {
    std::copy(a.value().data() + static_cast<std::int64_t>(i) * la * c,
              a.value().data() + static_cast<std::int64_t>(i + 1) * la * c,
              v.data() + static_cast<std::int64_t>(i) * (la + lb) * c);
    std::copy(b.value().data() + static_cast<std::int64_t>(i) * lb * c,
              b.value().data() + static_cast<std::int64_t>(i + 1) * lb * c,
              v.data() + static_cast<std::int64_t>(i) * (la + lb) * c +
                  static_cast<std::int64_t>(la) * c);
  }
  return make_op<T>(std::move(v), {a, b}, [bsz, la, lb, c](Node<T>& n) {
    for (int i = 0; i < bsz; ++i) {
      const T* g = n.grad.data() + static_cast<std::int64_t>(i) * (la + lb) * c;
      if (n.parents[0]->requires_grad)
        ArrMap<T>(n.parents[0]->grad_buf().data() +
                      static_cast<std::int64_t>(i) * la * c,
                  static_cast<std::int64_t>(la) * c) +=
            ConstArrMap<T>(g, static_cast<std::int64_t>(la) * c);
      if (n.parents[1]->requires_grad)
        ArrMap<T>(n.parents[1]->grad_buf().data() +
                      static_cast<std::int64_t>(i) * lb * c,
                  static_cast<std::int64_t>(lb) * c) +=
            ConstArrMap<T>(g + static_cast<std::int64_t>(la) * c,
                           static_cast<std::int64_t>(lb) * c);
    }
  });
}

/// Slice along the sequence axis: (B, L, C) -> (B, len, C) from `start`.
template <typename T>
Var<T> slice_seq(const Var<T>& x, int start, int len) {
  if (x.value().rank() != 3) throw InputError("slice_seq: rank != 3");
  const int bsz = x.value().dim(0), l = x.value().dim(1), c = x.value().dim(2);
  if (start < 0 || start + len > l) throw InputError("slice_seq: out of range");
  Tensor<T> v({bsz, len, c});
  for (int i = 0; i < bsz; ++i)
    std::copy(x.value().data() + (static_cast<std::int64_t>(i) * l + start) * c,
              x.value().data() +
                  (static_cast<std::int64_t>(i) * l + start + len) * c,
              v.data() + static_cast<std::int64_t>(i) * len * c);
  return make_op<T>(std::move(v), {x}, [bsz, l, c, start, len](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->grad_buf();
    for (int i = 0; i < bsz; ++i)
      ArrMap<T>(gx.data() + (static_cast<std::int64_t>(i) * l + start) * c,
                static_cast<std::int64_t>(len) * c) +=
          ConstArrMap<T>(n.grad.data() + static_cast<std::int64_t>(i) * len * c,
                         static_cast<std::int64_t>(len) * c);
  });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  const auto r = a.value().rows();
  if (b.value().rows() != r) throw InputError("concat_cols: row mismatch");
  const auto ca = a.value().cols(), cb = b.value().cols();
  Tensor<T> v({static_cast<int>(r), static_cast<int>(ca + cb)});
  v.mat().leftCols(ca) = a.value().mat();
  v.mat().rightCols(cb) = b.value().mat();
  return make_op<T>(std::move(v), {a, b}, [ca, cb](Node<T>& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buf().mat() += n.grad.mat().leftCols(ca);
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad_buf().mat() += n.grad.mat().rightCols(cb);
  });
}

/// Row r of x picks its head's column block: h = (r / inner) % heads.
/// x (R, C) -> (R, C / heads).
template <typename T>
Var<T> gather_head_blocks(const Var<T>& x, int heads, std::int64_t inner) {
  const auto rows = x.value().rows();
  const auto c = x.value().cols();
  if (c % heads != 0) throw InputError("gather_head_blocks: width mismatch");
  const auto dh = c / heads;
  Tensor<T> v({static_cast<int>(rows), static_cast<int>(dh)});
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto h = (r / inner) % heads;
    v.mat().row(r) = x.value().mat().row(r).segment(h * dh, dh);
  }
  return make_op<T>(std::move(v), {x}, [rows, heads, inner, dh](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->grad_buf();
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto h = (r / inner) % heads;
      gx.mat().row(r).segment(h * dh, dh) += n.grad.mat().row(r);
    }
  });
}

/// Subtracts row 0 of each block: x (B, J, C) -> x - x[:, 0:1, :].
template <typename T>
Var<T> root_relative(const Var<T>& x) {
  if (x.value().rank() != 3) throw InputError("root_relative: rank != 3");
  const int bsz = x.value().dim(0), j = x.value().dim(1), c = x.value().dim(2);
  Tensor<T> v = x.value();
  for (int b = 0; b < bsz; ++b) {
    MatMap<T> m(v.data() + static_cast<std::int64_t>(b) * j * c, j, c);
    const RowMat<T> root = m.row(0);
    m.rowwise() -= root.row(0);
  }
  return make_op<T>(std::move(v), {x}, [bsz, j, c](Node<T>& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& gx = n.parents[0]->grad_buf();
    for (int b = 0; b < bsz; ++b) {
      ConstMatMap<T> g(n.grad.data() + static_cast<std::int64_t>(b) * j * c, j, c);
      MatMap<T> gm(gx.data() + static_cast<std::int64_t>(b) * j * c, j, c);
      gm += g;
      gm.row(0) -= g.colwise().sum();
    }
  });
}

}  // namespace hmr::ad
