#pragma once

#include <functional>

#include "hmr/array_store.hpp"
#include "hmr/hand_model.hpp"
#include "hmr/nn.hpp"
#include "hmr/run_config.hpp"

namespace hmr::tokenizer {

using ad::Tensor;
using ad::Var;

inline constexpr int kPosePositions = 16;  // joint-wise input positions
inline constexpr int kPoseChannels = 3;

struct TokenizerConfig {
  int codebook_size = 256;  // K
  int code_dim = 64;        // D
  int num_tokens = 64;      // M: 16 * 2^n
  int width = 128;
  int res_blocks = 2;
  double ema_decay = 0.99;
  double ema_eps = 1e-5;
  int reset_interval = 256;
  double lambda_re = 1.0;
  double lambda_e = 0.02;
  double lambda_alpha = 0.25;
  double lambda_theta = 1.0;
  double lambda_v = 0.5;
  double lambda_j = 0.3;

  int upsample_stages() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TokenizerConfig from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
  static TokenizerConfig from_config(const ConfigMap& cfg,
                                     const std::string& prefix = "tokenizer.");
};

/// Discrete latent vocabulary with EMA maintenance state.
template <typename T>
struct Codebook {
  Tensor<T> entries;           // (K, D)
  Tensor<T> ema_cluster_size;  // (K)
  Tensor<T> ema_embed_sum;     // (K, D)
  std::vector<std::int64_t> usage_age;  // steps since last assignment

  int size() const { return entries.dim(0); }
  int dim() const { return entries.dim(1); }

  static Codebook init(int k, int d, Rng& rng) {
    if (k < 2) throw ConfigError("codebook: K must be >= 2");
    Codebook cb;
    cb.entries = nn::randn_init<T>(rng, {k, d}, 0.05);
    cb.ema_cluster_size = Tensor<T>({k});
    cb.ema_embed_sum = Tensor<T>({k, d});
    cb.usage_age.assign(static_cast<std::size_t>(k), 0);
    return cb;
  }
};

/// Euclidean nearest-entry quantization; ties break to the lowest index.
/// z is (N, D) (leading dims folded); returns indices and quantized rows.
template <typename T>
std::pair<std::vector<int>, Tensor<T>> quantize(const Tensor<T>& z,
                                                const Tensor<T>& entries) {
  const auto n = z.rows();
  const int k = entries.dim(0), d = entries.dim(1);
  if (z.cols() != d) throw InputError("quantize: dimension mismatch");
  // argmin_k |z|^2 - 2 z.c + |c|^2 via one GEMM.
  ad::RowMat<T> dots = z.mat() * entries.mat().transpose();  // (N, K)
  Eigen::Array<T, Eigen::Dynamic, 1> c2(k);
  for (int i = 0; i < k; ++i) c2(i) = entries.mat().row(i).squaredNorm();
  std::vector<int> idx(static_cast<std::size_t>(n));
  Tensor<T> zq(z.shape());
  for (std::int64_t r = 0; r < n; ++r) {
    int best = 0;
    T best_d = c2(0) - T(2) * dots(r, 0);
    for (int i = 1; i < k; ++i) {
      const T di = c2(i) - T(2) * dots(r, i);
      if (di < best_d) {
        best_d = di;
        best = i;
      }
    }
    idx[static_cast<std::size_t>(r)] = best;
    zq.mat().row(r) = entries.mat().row(best);
  }
  return {std::move(idx), std::move(zq)};
}

/// Forward value exactly z_q; the backward pass treats the quantization as
/// the identity, so the upstream gradient reaches z unchanged.
template <typename T>
Var<T> straight_through(const Var<T>& z, const Tensor<T>& z_q) {
  if (z.value().shape() != z_q.shape())
    throw InputError("straight_through: shape mismatch");
  return ad::make_op<T>(Tensor<T>(z_q), {z}, [](ad::Node<T>& n) {
    ad::accum(n.parents[0], n.grad);
  });
}

/// EMA codebook update with aging-based resets. decay must be in (0, 1).
template <typename T>
void ema_update(Codebook<T>& cb, const Tensor<T>& z,
                const std::vector<int>& assignments, double decay, double eps,
                int reset_interval, Rng& rng) {
  if (!(decay > 0.0 && decay < 1.0))
    throw InputError("ema_update: decay must be in (0, 1)");
  const int k = cb.size(), d = cb.dim();
  const auto n = z.rows();
  if (static_cast<std::int64_t>(assignments.size()) != n)
    throw InputError("ema_update: assignment count mismatch");
  std::vector<T> counts(static_cast<std::size_t>(k), T(0));
  Tensor<T> sums({k, d});
  for (std::int64_t i = 0; i < n; ++i) {
    const int a = assignments[static_cast<std::size_t>(i)];
    if (a < 0 || a >= k) throw TokenError("ema_update: assignment out of range");
    counts[static_cast<std::size_t>(a)] += T(1);
    sums.mat().row(a) += z.mat().row(i);
  }
  for (int i = 0; i < k; ++i) {
    cb.ema_cluster_size[i] = T(decay) * cb.ema_cluster_size[i] +
                             T(1.0 - decay) * counts[static_cast<std::size_t>(i)];
    cb.ema_embed_sum.mat().row(i) = T(decay) * cb.ema_embed_sum.mat().row(i) +
                                    T(1.0 - decay) * sums.mat().row(i);
    cb.entries.mat().row(i) =
        cb.ema_embed_sum.mat().row(i) / (cb.ema_cluster_size[i] + T(eps));
    auto& age = cb.usage_age[static_cast<std::size_t>(i)];
    age = counts[static_cast<std::size_t>(i)] > T(0) ? 0 : age + 1;
    if (age >= reset_interval) {
      const auto r = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(n)));
      cb.entries.mat().row(i) = z.mat().row(r);
      cb.ema_embed_sum.mat().row(i) = z.mat().row(r);
      cb.ema_cluster_size[i] = T(1);
      age = 0;
    }
  }
}

template <typename T>
struct VqLossParts {
  Var<T> total;
  T recon = 0, l_theta = 0, l_v = 0, l_j = 0, embed = 0, commit = 0;
};

/// L_vq-mano: weighted reconstruction (L1 means over theta, vertices,
/// joints) plus embedding and commitment terms (mean squared distance per
/// position, stop-gradient placed as written).
template <typename T>
VqLossParts<T> vq_loss(const Var<T>& pose, const Var<T>& pose_hat,
                       const Var<T>& z, const Var<T>& code_rows,
                       const Var<T>& mesh_v, const Var<T>& mesh_v_hat,
                       const Var<T>& mesh_j, const Var<T>& mesh_j_hat,
                       const TokenizerConfig& cfg) {
  using ad::l1_mean;
  Var<T> l_theta = l1_mean(pose_hat, pose);
  Var<T> l_v = l1_mean(mesh_v_hat, mesh_v);
  Var<T> l_j = l1_mean(mesh_j_hat, mesh_j);
  Var<T> recon =
      ad::add(ad::add(ad::scale(l_theta, T(cfg.lambda_theta)),
                      ad::scale(l_v, T(cfg.lambda_v))),
              ad::scale(l_j, T(cfg.lambda_j)));
  const T inv_rows = T(1) / static_cast<T>(z.value().rows());
  Var<T> embed = ad::scale(
      ad::sum_all(ad::square_(ad::sub(ad::detach(z), code_rows))), inv_rows);
  Var<T> commit = ad::scale(
      ad::sum_all(ad::square_(ad::sub(z, ad::detach(code_rows)))), inv_rows);
  Var<T> total = ad::add(ad::add(ad::scale(recon, T(cfg.lambda_re)),
                                 ad::scale(embed, T(cfg.lambda_e))),
                         ad::scale(commit, T(cfg.lambda_alpha)));
  VqLossParts<T> parts;
  parts.total = total;
  parts.recon = recon.value()[0];
  parts.l_theta = l_theta.value()[0];
  parts.l_v = l_v.value()[0];
  parts.l_j = l_j.value()[0];
  parts.embed = embed.value()[0];
  parts.commit = commit.value()[0];
  return parts;
}

template <typename T>
struct ResBlock1d {
  nn::Conv1d<T> conv1, conv2;

  ResBlock1d() = default;
  ResBlock1d(nn::ParamStore<T>& ps, const std::string& prefix, int c, Rng& rng)
      : conv1(ps, prefix + ".conv1", c, c, 3, 1, 1, rng),
        conv2(ps, prefix + ".conv2", c, c, 3, 1, 1, rng) {}

  Var<T> operator()(const Var<T>& x) const {
    return ad::add(x, conv2(ad::relu(conv1(ad::relu(x)))));
  }
};

/// VQ-MANO: 1D convolutional autoencoder over the 16 joint rotations with a
/// learned upsampling to `num_tokens` latent positions.
template <typename T>
class PoseTokenizer {
 public:
  TokenizerConfig cfg;
  nn::ParamStore<T> params;
  Var<T> codebook_entries;  // leaf; EMA-updated, never touched by Adam
  Codebook<T> codebook;
  std::int64_t train_step = 0;

  PoseTokenizer() = default;

  PoseTokenizer(const TokenizerConfig& config, std::uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(seed ^ 0x746f6b656eull);
    const int w = cfg.width;
    in_conv_ = nn::Conv1d<T>(params, "enc.in", kPoseChannels, w, 3, 1, 1, rng);
    for (int i = 0; i < cfg.res_blocks; ++i)
      enc_res_.emplace_back(params, "enc.res" + std::to_string(i), w, rng);
    for (int i = 0; i < cfg.upsample_stages(); ++i)
      up_convs_.emplace_back(params, "enc.up" + std::to_string(i), w, w, 3, 1,
                             1, rng);
    enc_out_ = nn::Conv1d<T>(params, "enc.out", w, cfg.code_dim, 1, 1, 0, rng);
    dec_in_ = nn::Conv1d<T>(params, "dec.in", cfg.code_dim, w, 3, 1, 1, rng);
    for (int i = 0; i < cfg.upsample_stages(); ++i)
      down_convs_.emplace_back(params, "dec.down" + std::to_string(i), w, w, 3,
                               2, 1, rng);
    for (int i = 0; i < cfg.res_blocks; ++i)
      dec_res_.emplace_back(params, "dec.res" + std::to_string(i), w, rng);
    dec_out_ = nn::Conv1d<T>(params, "dec.out", w, kPoseChannels, 3, 1, 1, rng);
    codebook = Codebook<T>::init(cfg.codebook_size, cfg.code_dim, rng);
    codebook_entries = Var<T>::leaf(codebook.entries, true);
  }

  /// theta (B, 48) -> latent sequence (B, M, D).
  Var<T> encode(const Var<T>& theta, bool diagnose = false) const {
    const int bsz = static_cast<int>(theta.value().rows());
    Var<T> x = ad::reshape(theta, {bsz, kPosePositions, kPoseChannels});
    x = in_conv_(x);
    check_finite(x, "enc.in", diagnose);
    for (std::size_t i = 0; i < enc_res_.size(); ++i) {
      x = enc_res_[i](x);
      check_finite(x, "enc.res" + std::to_string(i), diagnose);
    }
    for (std::size_t i = 0; i < up_convs_.size(); ++i) {
      x = up_convs_[i](ad::nearest_upsample1d(x));
      check_finite(x, "enc.up" + std::to_string(i), diagnose);
    }
    x = enc_out_(x);
    check_finite(x, "enc.out", true);
    return x;  // (B, M, D)
  }

  /// z_q (B, M, D) -> theta (B, 48).
  Var<T> decode(const Var<T>& z_q, bool diagnose = false) const {
    const int bsz = z_q.value().dim(0);
    Var<T> x = dec_in_(z_q);
    check_finite(x, "dec.in", diagnose);
    for (std::size_t i = 0; i < down_convs_.size(); ++i) {
      x = down_convs_[i](x);
      check_finite(x, "dec.down" + std::to_string(i), diagnose);
    }
    for (std::size_t i = 0; i < dec_res_.size(); ++i) {
      x = dec_res_[i](x);
      check_finite(x, "dec.res" + std::to_string(i), diagnose);
    }
    x = dec_out_(x);
    check_finite(x, "dec.out", true);
    return ad::reshape(x, {bsz, hand::kThetaDim});
  }

  /// Inference-mode composition: pose -> token indices.
  std::vector<int> tokenize(const hand::PoseParams& pose) const {
    ad::NoGradGuard ng;
    Var<T> theta = Var<T>::constant(
        pose.theta.template cast<T>().reshaped({1, hand::kThetaDim}));
    Var<T> z = encode(theta);
    auto [idx, zq] = quantize(z.value(), codebook.entries);
    return idx;
  }

  hand::PoseParams detokenize(const std::vector<int>& tokens) const {
    if (static_cast<int>(tokens.size()) != cfg.num_tokens)
      throw TokenError("detokenize: expected " + std::to_string(cfg.num_tokens) +
                       " tokens");
    Tensor<T> zq({1, cfg.num_tokens, cfg.code_dim});
    for (int i = 0; i < cfg.num_tokens; ++i) {
      const int t = tokens[static_cast<std::size_t>(i)];
      if (t < 0 || t >= cfg.codebook_size)
        throw TokenError("detokenize: token index " + std::to_string(t) +
                         " outside codebook of size " +
                         std::to_string(cfg.codebook_size));
      std::copy(codebook.entries.data() + static_cast<std::int64_t>(t) * cfg.code_dim,
                codebook.entries.data() +
                    static_cast<std::int64_t>(t + 1) * cfg.code_dim,
                zq.data() + static_cast<std::int64_t>(i) * cfg.code_dim);
    }
    ad::NoGradGuard ng;
    Var<T> theta = decode(Var<T>::constant(std::move(zq)));
    return hand::PoseParams(theta.value().template cast<double>());
  }

  void freeze() {
    params.freeze();
    codebook_entries.node()->requires_grad = false;
  }

  /// Mirrors EMA state into the graph leaf after updates.
  void sync_codebook_leaf() { codebook_entries.value() = codebook.entries; }

  io::ArrayStore to_store() const;
  static PoseTokenizer from_store(const io::ArrayStore& store);
  void save(const std::string& path) const;
  static PoseTokenizer load(const std::string& path);

 private:
  static void check_finite(const Var<T>& x, const std::string& layer,
                           bool always) {
    if (!always) return;
    if (!x.value().all_finite())
      throw NumericError("tokenizer: non-finite activations at layer " + layer);
  }

  nn::Conv1d<T> in_conv_, enc_out_, dec_in_, dec_out_;
  std::vector<ResBlock1d<T>> enc_res_, dec_res_;
  std::vector<nn::Conv1d<T>> up_convs_, down_convs_;
};

struct TokenizerTrainStats {
  std::int64_t steps = 0;
  double final_total = 0.0;
  double final_l_theta = 0.0;
  std::vector<double> loss_history;  // sampled every log_every steps
};

/// Phase-1 training: Adam on encoder/decoder, EMA on the codebook.
/// poses is (N, 48) in canonical parameterization; progress callbacks get
/// (step, parts).
template <typename T>
TokenizerTrainStats train_tokenizer(
    PoseTokenizer<T>& tok, const Tensor<double>& poses,
    const hand::HandTemplate<T>& tpl, std::int64_t steps, int batch_size,
    double lr, std::uint64_t seed,
    const std::function<void(std::int64_t, const VqLossParts<T>&)>& on_step = {});

}  // namespace hmr::tokenizer
