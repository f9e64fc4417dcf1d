#pragma once

#include "hmr/context_transformer.hpp"
#include "hmr/data_synth.hpp"
#include "hmr/pose_tokenizer.hpp"

namespace hmr::train {

using ad::Tensor;
using ad::Var;
using transformer::MaskedSequence;

struct LossWeights {
  double lambda_mask = 1.0;
  double lambda_theta = 1e-3;
  double lambda_beta = 5e-4;
  double lambda_3d = 5e-2;
  double lambda_2d = 1e-2;

  void validate() const {
    if (lambda_mask < 0 || lambda_theta < 0 || lambda_beta < 0 ||
        lambda_3d < 0 || lambda_2d < 0)
      throw ConfigError("loss weights must be non-negative");
  }
  static LossWeights from_config(const ConfigMap& cfg,
                                 const std::string& prefix = "loss.");
  nlohmann::json to_json() const;
};

/// gamma(tau) = cos(pi tau / 2) on [0, 1] (exact 0 at tau = 1).
double masking_ratio(double tau);

/// m = max(1, ceil(gamma(tau) * length)).
int mask_count_for_tau(double tau, int length);

struct MaskSample {
  double tau = 0.0;
  double gamma = 1.0;
  int count = 0;
  std::vector<int> positions;
};

/// tau ~ U(0, tau_max); m = max(1, ceil(gamma(tau) * L)); m distinct
/// positions drawn uniformly.
MaskSample sample_mask(int length, Rng& rng, double tau_max = 0.7);

/// Mean NLL of the target tokens. `all_positions` scores every position
/// (the summed-over-all-i formulation); the default scores masked ones only.
template <typename T>
Var<T> masked_nll(const Var<T>& logits, const std::vector<int>& targets,
                  const std::vector<std::uint8_t>& mask,
                  bool all_positions = false) {
  const auto rows = logits.value().rows();
  if (static_cast<std::int64_t>(targets.size()) != rows ||
      static_cast<std::int64_t>(mask.size()) != rows)
    throw InputError("masked_nll: row count mismatch");
  std::vector<std::uint8_t> sel = mask;
  if (all_positions) std::fill(sel.begin(), sel.end(), std::uint8_t(1));
  bool any = false;
  for (const auto s : sel) any = any || s;
  if (!any) throw InputError("masked_nll: empty mask");
  return ad::nll_selected(ad::log_softmax_rows(logits), targets, std::move(sel));
}

/// z_bar = softmax(logits) x codebook; rows live in the codebook's convex
/// hull and the map is differentiable in the logits.
template <typename T>
Var<T> expected_embedding(const Var<T>& logits, const Var<T>& codebook) {
  if (logits.value().cols() != codebook.value().rows())
    throw InputError("expected_embedding: K mismatch");
  return ad::matmul(ad::softmax_rows(logits), codebook);
}

struct LossToggles {
  bool use_mask = true;
  bool use_mano = true;
  bool use_3d = true;
  bool use_2d = true;
};

template <typename T>
struct TotalLossParts {
  Var<T> total;
  double l_mask = 0, l_mano = 0, l_theta = 0, l_beta = 0, l_3d = 0, l_2d = 0;
};

/// Ground-truth slice of a training batch (all tensors already typed T).
template <typename T>
struct BatchTargets {
  Tensor<T> theta;     // (B, 48)
  Tensor<T> beta;      // (B, 10)
  Tensor<T> joints3d;  // (B, 21, 3)
  Tensor<T> joints2d;  // (B, 21, 2), pixels
};

/// L_total = lambda_mask L_mask + L_MANO + L_3D + L_2D, with the expected
/// embedding decoded through the frozen tokenizer, 3D joints compared
/// root-relative and 2D projections normalized by the image size.
template <typename T>
TotalLossParts<T> total_loss(
    const Var<T>& logits, const MaskedSequence& seq,
    const std::vector<int>& target_tokens, const Var<T>& beta_pred,
    const Var<T>& translation_pred, const BatchTargets<T>& gt,
    const tokenizer::PoseTokenizer<T>& tok, const hand::HandTemplate<T>& tpl,
    const LossWeights& w, int image_size, double focal_px,
    const LossToggles& toggles = {}, bool nll_all_positions = false) {
  const int bsz = seq.batch;
  const int m = tok.cfg.num_tokens, k = tok.cfg.codebook_size;
  const int d = tok.cfg.code_dim;
  if (logits.value().numel() != static_cast<std::int64_t>(bsz) * m * k)
    throw InputError("total_loss: logits shape mismatch");
  if (target_tokens.size() != seq.tokens.size())
    throw InputError("total_loss: target token count mismatch");

  TotalLossParts<T> parts;
  std::vector<Var<T>> terms;

  Var<T> logits_rows = ad::reshape(logits, {bsz * m, k});
  if (toggles.use_mask) {
    Var<T> l_mask =
        masked_nll(logits_rows, target_tokens, seq.mask, nll_all_positions);
    parts.l_mask = static_cast<double>(l_mask.value()[0]);
    terms.push_back(ad::scale(l_mask, static_cast<T>(w.lambda_mask)));
  }

  // Differentiable relaxation through the frozen codebook and decoder.
  Var<T> zbar = expected_embedding(logits_rows, tok.codebook_entries);
  Var<T> theta_hat = tok.decode(ad::reshape(zbar, {bsz, m, d}));
  auto fk = hand::fk_batched(theta_hat, beta_pred, tpl);

  if (toggles.use_mano) {
    Var<T> l_theta = ad::l1_mean(theta_hat, Var<T>::constant(gt.theta));
    Var<T> l_beta = ad::l1_mean(beta_pred, Var<T>::constant(gt.beta));
    parts.l_theta = static_cast<double>(l_theta.value()[0]);
    parts.l_beta = static_cast<double>(l_beta.value()[0]);
    Var<T> l_mano = ad::add(ad::scale(l_theta, static_cast<T>(w.lambda_theta)),
                            ad::scale(l_beta, static_cast<T>(w.lambda_beta)));
    parts.l_mano = static_cast<double>(l_mano.value()[0]);
    terms.push_back(l_mano);
  }

  if (toggles.use_3d) {
    Var<T> rel_pred = ad::root_relative(fk.joints);
    Tensor<T> gt3 = gt.joints3d;
    Var<T> rel_gt = ad::root_relative(Var<T>::constant(std::move(gt3)));
    Var<T> l_3d = ad::l1_mean(rel_pred, rel_gt);
    parts.l_3d = static_cast<double>(l_3d.value()[0]);
    terms.push_back(ad::scale(l_3d, static_cast<T>(w.lambda_3d)));
  }

  if (toggles.use_2d) {
    Var<T> j2d = hand::pinhole_project(fk.joints, translation_pred,
                                       static_cast<T>(focal_px),
                                       static_cast<T>(image_size / 2.0),
                                       static_cast<T>(image_size / 2.0));
    const T inv = T(1) / static_cast<T>(image_size);
    Tensor<T> gt2 = gt.joints2d;
    gt2.arr() *= inv;
    Var<T> l_2d = ad::l1_mean(ad::scale(j2d, inv), Var<T>::constant(std::move(gt2)));
    parts.l_2d = static_cast<double>(l_2d.value()[0]);
    terms.push_back(ad::scale(l_2d, static_cast<T>(w.lambda_2d)));
  }

  if (terms.empty()) throw ConfigError("total_loss: every term disabled");
  Var<T> total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  parts.total = total;
  return parts;
}

struct MaskedTrainConfig {
  std::int64_t steps = 10000;
  int batch_size = 16;
  double lr = 1e-5;
  double tau_max = 0.7;
  bool nll_all_positions = false;
  double keypoint_noise_sigma = 0.0;
  double keypoint_dropout = 0.0;
  std::uint64_t seed = 1;
  LossWeights weights;
  LossToggles toggles;
  std::string conditioning = "image";  // image | label
};

struct StepMetrics {
  std::int64_t step = 0;
  double total = 0, l_mask = 0, l_mano = 0, l_3d = 0, l_2d = 0;
  double grad_norm = 0;
  nlohmann::json to_json() const;
};

struct MaskedTrainStats {
  std::int64_t steps = 0;
  double final_total = 0;
  std::vector<double> loss_history;
};

/// One optimizer step over the transformer weights; the tokenizer stays
/// frozen (its parameters are excluded from the optimizer and carry no
/// gradient). Throws NumericError with the offending batch on a NaN loss.
template <typename T>
StepMetrics train_masked_step(transformer::ContextTransformer<T>& model,
                              const tokenizer::PoseTokenizer<T>& frozen_tok,
                              const hand::HandTemplate<T>& tpl,
                              const data::Dataset& dataset,
                              const std::vector<int>& batch,
                              const std::vector<int>& gt_tokens,
                              const MaskedTrainConfig& cfg, nn::Adam<T>& opt,
                              Rng& mask_rng, Rng& noise_rng);

template <typename T>
MaskedTrainStats train_masked(
    transformer::ContextTransformer<T>& model,
    const tokenizer::PoseTokenizer<T>& frozen_tok,
    const hand::HandTemplate<T>& tpl, const data::Dataset& dataset,
    const MaskedTrainConfig& cfg,
    const std::function<void(const StepMetrics&)>& on_step = {});

/// Token targets for every dataset pose under the frozen tokenizer, (N * M).
template <typename T>
std::vector<int> tokenize_dataset(const tokenizer::PoseTokenizer<T>& tok,
                                  const data::Dataset& dataset);

}  // namespace hmr::train
