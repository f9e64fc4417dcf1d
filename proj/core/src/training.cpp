#include "hmr/training.hpp"

namespace hmr::train {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

LossWeights LossWeights::from_config(const ConfigMap& cfg,
                                     const std::string& p) {
  LossWeights w;
  w.lambda_mask = cfg.get_double(p + "lambda_mask", w.lambda_mask);
  w.lambda_theta = cfg.get_double(p + "lambda_theta", w.lambda_theta);
  w.lambda_beta = cfg.get_double(p + "lambda_beta", w.lambda_beta);
  w.lambda_3d = cfg.get_double(p + "lambda_3d", w.lambda_3d);
  w.lambda_2d = cfg.get_double(p + "lambda_2d", w.lambda_2d);
  w.validate();
  return w;
}

nlohmann::json LossWeights::to_json() const {
  nlohmann::json j;
  j["lambda_mask"] = lambda_mask;
  j["lambda_theta"] = lambda_theta;
  j["lambda_beta"] = lambda_beta;
  j["lambda_3d"] = lambda_3d;
  j["lambda_2d"] = lambda_2d;
  return j;
}

double masking_ratio(double tau) {
  if (!(tau >= 0.0 && tau <= 1.0))
    throw InputError("masking_ratio: tau must lie in [0, 1]");
  if (tau == 1.0) return 0.0;
  return std::cos(kPi * tau / 2.0);
}

int mask_count_for_tau(double tau, int length) {
  if (length < 1) throw InputError("mask_count_for_tau: length must be >= 1");
  return std::max(1, static_cast<int>(std::ceil(masking_ratio(tau) * length)));
}

MaskSample sample_mask(int length, Rng& rng, double tau_max) {
  if (length < 1) throw InputError("sample_mask: length must be >= 1");
  if (!(tau_max > 0.0 && tau_max <= 1.0))
    throw InputError("sample_mask: tau_max must lie in (0, 1]");
  MaskSample s;
  s.tau = rng.uniform(0.0, tau_max);
  s.gamma = masking_ratio(s.tau);
  s.count = mask_count_for_tau(s.tau, length);
  s.positions = rng.sample_without_replacement(length, s.count);
  return s;
}

nlohmann::json StepMetrics::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["total"] = total;
  j["l_mask"] = l_mask;
  j["l_mano"] = l_mano;
  j["l_3d"] = l_3d;
  j["l_2d"] = l_2d;
  j["grad_norm"] = grad_norm;
  return j;
}

template <typename T>
std::vector<int> tokenize_dataset(const tokenizer::PoseTokenizer<T>& tok,
                                  const data::Dataset& dataset) {
  const int n = dataset.size();
  const int m = tok.cfg.num_tokens;
  std::vector<int> out(static_cast<std::size_t>(n) * m);
  ad::NoGradGuard ng;
  // Batched encode keeps this fast for large datasets.
  const int chunk = 256;
  for (int start = 0; start < n; start += chunk) {
    const int bsz = std::min(chunk, n - start);
    Tensor<T> theta({bsz, hand::kThetaDim});
    for (int i = 0; i < bsz; ++i)
      for (int c = 0; c < hand::kThetaDim; ++c)
        theta[static_cast<std::int64_t>(i) * hand::kThetaDim + c] =
            static_cast<T>(dataset.poses[(static_cast<std::int64_t>(start + i)) *
                                             hand::kThetaDim +
                                         c]);
    Var<T> z = tok.encode(Var<T>::constant(std::move(theta)));
    auto [idx, zq] =
        tokenizer::quantize(z.value().reshaped({bsz * m, tok.cfg.code_dim}),
                            tok.codebook.entries);
    std::copy(idx.begin(), idx.end(),
              out.begin() + static_cast<std::int64_t>(start) * m);
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> batch_keypoints(const data::Dataset& dataset,
                          const std::vector<int>& batch, double sigma,
                          double dropout, Rng& noise_rng) {
  const int bsz = static_cast<int>(batch.size());
  Tensor<T> kp({bsz, hand::kNumRegressed, 3});
  for (int i = 0; i < bsz; ++i) {
    const std::int64_t s = batch[static_cast<std::size_t>(i)];
    Tensor<double> one({hand::kNumRegressed, 3});
    for (int j = 0; j < hand::kNumRegressed; ++j) {
      one[j * 3 + 0] = dataset.joints2d[(s * 21 + j) * 2 + 0];
      one[j * 3 + 1] = dataset.joints2d[(s * 21 + j) * 2 + 1];
      one[j * 3 + 2] = 1.0;
    }
    if (sigma > 0.0 || dropout > 0.0)
      data::apply_keypoint_noise(one, noise_rng, sigma, dropout);
    for (int j = 0; j < hand::kNumRegressed * 3; ++j)
      kp[(static_cast<std::int64_t>(i) * hand::kNumRegressed) * 3 + j] =
          static_cast<T>(one[j]);
  }
  return kp;
}

template <typename T>
BatchTargets<T> batch_targets(const data::Dataset& dataset,
                              const std::vector<int>& batch) {
  const int bsz = static_cast<int>(batch.size());
  BatchTargets<T> gt;
  gt.theta = Tensor<T>({bsz, hand::kThetaDim});
  gt.beta = Tensor<T>({bsz, hand::kBetaDim});
  gt.joints3d = Tensor<T>({bsz, hand::kNumRegressed, 3});
  gt.joints2d = Tensor<T>({bsz, hand::kNumRegressed, 2});
  for (int i = 0; i < bsz; ++i) {
    const std::int64_t s = batch[static_cast<std::size_t>(i)];
    for (int c = 0; c < hand::kThetaDim; ++c)
      gt.theta[static_cast<std::int64_t>(i) * hand::kThetaDim + c] =
          static_cast<T>(dataset.poses[s * hand::kThetaDim + c]);
    for (int c = 0; c < hand::kBetaDim; ++c)
      gt.beta[static_cast<std::int64_t>(i) * hand::kBetaDim + c] =
          static_cast<T>(dataset.betas[s * hand::kBetaDim + c]);
    for (int c = 0; c < 21 * 3; ++c)
      gt.joints3d[static_cast<std::int64_t>(i) * 63 + c] =
          static_cast<T>(dataset.joints3d[s * 63 + c]);
    for (int c = 0; c < 21 * 2; ++c)
      gt.joints2d[static_cast<std::int64_t>(i) * 42 + c] =
          static_cast<T>(dataset.joints2d[s * 42 + c]);
  }
  return gt;
}

template <typename T>
Tensor<T> batch_images(const data::Dataset& dataset,
                       const std::vector<int>& batch) {
  const int bsz = static_cast<int>(batch.size());
  const int s = dataset.config.image_size;
  Tensor<T> img({bsz, s, s, 3});
  const std::int64_t per = static_cast<std::int64_t>(s) * s * 3;
  for (int i = 0; i < bsz; ++i) {
    const std::int64_t src = batch[static_cast<std::size_t>(i)];
    for (std::int64_t c = 0; c < per; ++c)
      img[static_cast<std::int64_t>(i) * per + c] =
          static_cast<T>(dataset.images[src * per + c]);
  }
  return img;
}

}  // namespace

template <typename T>
StepMetrics train_masked_step(transformer::ContextTransformer<T>& model,
                              const tokenizer::PoseTokenizer<T>& frozen_tok,
                              const hand::HandTemplate<T>& tpl,
                              const data::Dataset& dataset,
                              const std::vector<int>& batch,
                              const std::vector<int>& gt_tokens,
                              const MaskedTrainConfig& cfg, nn::Adam<T>& opt,
                              Rng& mask_rng, Rng& noise_rng) {
  const int bsz = static_cast<int>(batch.size());
  const int m = frozen_tok.cfg.num_tokens;
  const int k = frozen_tok.cfg.codebook_size;

  // Corrupted sequence + targets.
  MaskedSequence seq;
  seq.batch = bsz;
  seq.tokens.resize(static_cast<std::size_t>(bsz) * m);
  seq.mask.assign(static_cast<std::size_t>(bsz) * m, 0);
  std::vector<int> targets(static_cast<std::size_t>(bsz) * m);
  for (int i = 0; i < bsz; ++i) {
    const std::int64_t s = batch[static_cast<std::size_t>(i)];
    for (int p = 0; p < m; ++p) {
      const int tokidx = gt_tokens[static_cast<std::size_t>(s * m + p)];
      targets[static_cast<std::size_t>(i) * m + p] = tokidx;
      seq.tokens[static_cast<std::size_t>(i) * m + p] = tokidx;
    }
    const MaskSample ms = sample_mask(m, mask_rng, cfg.tau_max);
    for (const int p : ms.positions) {
      seq.tokens[static_cast<std::size_t>(i) * m + p] = k;
      seq.mask[static_cast<std::size_t>(i) * m + p] = 1;
    }
  }

  Tensor<T> kp = batch_keypoints<T>(dataset, batch, cfg.keypoint_noise_sigma,
                                    cfg.keypoint_dropout, noise_rng);
  transformer::ImageContext<T> ctx;
  if (cfg.conditioning == "label") {
    if (dataset.labels.empty())
      throw ConfigError("train_masked: dataset has no labels");
    std::vector<int> labels(static_cast<std::size_t>(bsz));
    for (int i = 0; i < bsz; ++i)
      labels[static_cast<std::size_t>(i)] =
          dataset.labels[static_cast<std::size_t>(batch[static_cast<std::size_t>(i)])];
    ctx = model.label_context(labels);
    kp.set_zero();  // label mode carries no 2D pose guidance
  } else {
    if (!dataset.has_images())
      throw ConfigError("train_masked: dataset has no images");
    ctx = model.encode_image(batch_images<T>(dataset, batch));
  }

  auto head = model.predict_shape_camera(ctx);
  Var<T> logits = model.predict_logits(seq, kp, ctx);
  BatchTargets<T> gt = batch_targets<T>(dataset, batch);
  TotalLossParts<T> parts = total_loss(
      logits, seq, targets, head.beta, head.translation, gt, frozen_tok, tpl,
      cfg.weights, dataset.config.image_size, dataset.config.focal_px,
      cfg.toggles, cfg.nll_all_positions);

  const double total = static_cast<double>(parts.total.value()[0]);
  if (!std::isfinite(total)) {
    std::string dump = "train_masked_step: non-finite loss; batch indices:";
    for (const int b : batch) dump += " " + std::to_string(b);
    throw NumericError(dump);
  }

  model.params.zero_grad();
  ad::backward(parts.total);
  StepMetrics metrics;
  metrics.grad_norm = opt.step(model.params);
  if (!std::isfinite(metrics.grad_norm))
    throw NumericError("train_masked_step: non-finite gradient norm");
  metrics.total = total;
  metrics.l_mask = parts.l_mask;
  metrics.l_mano = parts.l_mano;
  metrics.l_3d = parts.l_3d;
  metrics.l_2d = parts.l_2d;
  return metrics;
}

template <typename T>
MaskedTrainStats train_masked(
    transformer::ContextTransformer<T>& model,
    const tokenizer::PoseTokenizer<T>& frozen_tok,
    const hand::HandTemplate<T>& tpl, const data::Dataset& dataset,
    const MaskedTrainConfig& cfg,
    const std::function<void(const StepMetrics&)>& on_step) {
  if (cfg.batch_size < 1 || cfg.batch_size > dataset.size())
    throw ConfigError("train_masked: bad batch size");
  cfg.weights.validate();

  const std::vector<int> gt_tokens = tokenize_dataset(frozen_tok, dataset);
  nn::Adam<T> opt(cfg.lr);
  Rng batch_rng = Rng(cfg.seed).derive("batch");
  Rng mask_rng = Rng(cfg.seed).derive("mask");
  Rng noise_rng = Rng(cfg.seed).derive("keypoint-noise");

  MaskedTrainStats stats;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const std::vector<int> batch =
        batch_rng.sample_without_replacement(dataset.size(), cfg.batch_size);
    StepMetrics m = train_masked_step(model, frozen_tok, tpl, dataset, batch,
                                      gt_tokens, cfg, opt, mask_rng, noise_rng);
    m.step = step;
    if (on_step) on_step(m);
    if (step % 50 == 0) stats.loss_history.push_back(m.total);
    stats.final_total = m.total;
  }
  stats.steps = cfg.steps;
  return stats;
}

template std::vector<int> tokenize_dataset<float>(
    const tokenizer::PoseTokenizer<float>&, const data::Dataset&);
template std::vector<int> tokenize_dataset<double>(
    const tokenizer::PoseTokenizer<double>&, const data::Dataset&);
template StepMetrics train_masked_step<float>(
    transformer::ContextTransformer<float>&, const tokenizer::PoseTokenizer<float>&,
    const hand::HandTemplate<float>&, const data::Dataset&,
    const std::vector<int>&, const std::vector<int>&, const MaskedTrainConfig&,
    nn::Adam<float>&, Rng&, Rng&);
template StepMetrics train_masked_step<double>(
    transformer::ContextTransformer<double>&,
    const tokenizer::PoseTokenizer<double>&, const hand::HandTemplate<double>&,
    const data::Dataset&, const std::vector<int>&, const std::vector<int>&,
    const MaskedTrainConfig&, nn::Adam<double>&, Rng&, Rng&);
template MaskedTrainStats train_masked<float>(
    transformer::ContextTransformer<float>&, const tokenizer::PoseTokenizer<float>&,
    const hand::HandTemplate<float>&, const data::Dataset&,
    const MaskedTrainConfig&, const std::function<void(const StepMetrics&)>&);
template MaskedTrainStats train_masked<double>(
    transformer::ContextTransformer<double>&,
    const tokenizer::PoseTokenizer<double>&, const hand::HandTemplate<double>&,
    const data::Dataset&, const MaskedTrainConfig&,
    const std::function<void(const StepMetrics&)>&);

}  // namespace hmr::train
