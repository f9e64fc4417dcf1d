#include <doctest.h>

#include <memory>
#include <set>

#include "gradcheck.hpp"
#include "hmr/training.hpp"
#include "oracles.hpp"

using namespace hmr;
using namespace hmr::testing;
using ad::Tensor;
using ad::Var;

TEST_SUITE_BEGIN("training");

namespace {

struct TinyRig {
  hand::HandTemplate<double> tpl_d = hand::build_synthetic_template({96, 5});
  tokenizer::TokenizerConfig tok_cfg;
  transformer::TransformerConfig model_cfg;

  TinyRig() {
    tok_cfg.codebook_size = 32;
    tok_cfg.code_dim = 16;
    tok_cfg.num_tokens = 16;
    tok_cfg.width = 32;
    model_cfg.c_model = 32;
    model_cfg.heads = 4;
    model_cfg.enc_blocks = 1;
    model_cfg.synth_layers = 1;
    model_cfg.num_tokens = 16;
    model_cfg.codebook_size = 32;
  }
};

data::SynthConfig tiny_data_config(int count, bool images) {
  data::SynthConfig cfg;
  cfg.count = count;
  cfg.seed = 4242;
  cfg.with_images = images;
  cfg.template_config = {96, 5};
  return cfg;
}

}  // namespace

TEST_CASE("masking ratio reproduces the cosine schedule exactly") {
  CHECK(train::masking_ratio(0.0) == 1.0);
  CHECK(train::masking_ratio(1.0) == 0.0);
  CHECK(train::masking_ratio(0.5) == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK_THROWS_AS(train::masking_ratio(-0.1), InputError);
  CHECK_THROWS_AS(train::masking_ratio(1.1), InputError);
}

TEST_CASE("masking ratio is strictly decreasing") {
  double prev = 2.0;
  for (int i = 0; i <= 100; ++i) {
    const double g = train::masking_ratio(i / 100.0);
    CHECK(g < prev);
    prev = g;
  }
}

TEST_CASE("mask counts follow max(1, ceil(gamma L))") {
  CHECK(train::mask_count_for_tau(0.0, 64) == 64);   // gamma = 1
  CHECK(train::mask_count_for_tau(0.5, 64) == 46);   // ceil(0.70711 * 64)
  CHECK(train::mask_count_for_tau(1.0, 64) == 1);    // floored at 1
  CHECK(train::mask_count_for_tau(1.0, 1) == 1);
}

TEST_CASE("sampled masks are reproducible and within range") {
  Rng a(5), b(5);
  for (int i = 0; i < 20; ++i) {
    const auto ma = train::sample_mask(64, a, 0.7);
    const auto mb = train::sample_mask(64, b, 0.7);
    CHECK(ma.positions == mb.positions);
    CHECK(ma.tau <= 0.7);
    CHECK(ma.count == static_cast<int>(ma.positions.size()));
    std::set<int> uniq(ma.positions.begin(), ma.positions.end());
    CHECK(uniq.size() == ma.positions.size());
    CHECK(ma.count == train::mask_count_for_tau(ma.tau, 64));
  }
}

TEST_CASE("masked nll matches closed forms") {
  // Uniform logits over K = 256: ln 256 per token.
  Tensor<double> uniform({3, 256});
  Var<double> l1 = Var<double>::leaf(uniform, true);
  const auto nll_u =
      train::masked_nll(l1, std::vector<int>(3, 7), {1, 1, 1}, false);
  CHECK(nll_u.value()[0] == doctest::Approx(std::log(256.0)).epsilon(1e-9));

  // A +20 margin on the target with K = 2 collapses the loss.
  Tensor<double> hot({1, 2});
  hot[0] = 20.0;
  const auto nll_hot = train::masked_nll(Var<double>::constant(hot), {0}, {1});
  CHECK(nll_hot.value()[0] < 1e-8);

  // K = 2, logits (ln 3, 0), target 0 -> -ln(3/4).
  Tensor<double> pair({1, 2});
  pair[0] = std::log(3.0);
  const auto nll_pair = train::masked_nll(Var<double>::constant(pair), {0}, {1});
  CHECK(nll_pair.value()[0] == doctest::Approx(0.2876820724).epsilon(1e-6));
}

TEST_CASE("masked nll rejects an empty mask unless scoring all positions") {
  Tensor<double> logits({2, 4});
  CHECK_THROWS_AS(
      train::masked_nll(Var<double>::constant(logits), {0, 1}, {0, 0}, false),
      InputError);
  CHECK_NOTHROW(
      train::masked_nll(Var<double>::constant(logits), {0, 1}, {0, 0}, true));
}

TEST_CASE("expected embedding reproduces the softmax-codebook products") {
  Tensor<double> cb = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  Var<double> codebook = Var<double>::constant(cb);

  Tensor<double> l0({1, 2});
  const auto z0 = train::expected_embedding(Var<double>::constant(l0), codebook);
  CHECK(z0.value()[0] == doctest::Approx(0.5));
  CHECK(z0.value()[1] == doctest::Approx(0.5));

  Tensor<double> l1({1, 2});
  l1[0] = 20.0;
  l1[1] = -20.0;
  const auto z1 = train::expected_embedding(Var<double>::constant(l1), codebook);
  CHECK(std::abs(z1.value()[0] - 1.0) < 1e-8);
  CHECK(std::abs(z1.value()[1] - 0.0) < 1e-8);

  Tensor<double> l2({1, 2});
  l2[0] = std::log(3.0);
  const auto z2 = train::expected_embedding(Var<double>::constant(l2), codebook);
  CHECK(z2.value()[0] == doctest::Approx(0.75));
  CHECK(z2.value()[1] == doctest::Approx(0.25));
}

TEST_CASE("expected embeddings live in the codebook convex hull (exact)") {
  Rng rng(6);
  Tensor<double> cb = random_tensor(rng, {4, 2});
  Var<double> codebook = Var<double>::constant(cb);
  for (int trial = 0; trial < 24; ++trial) {
    Tensor<double> logits = random_tensor(rng, {1, 4}, 2.0);
    const auto z = train::expected_embedding(Var<double>::constant(logits), codebook);
    CHECK(in_convex_hull_exact(cb, {z.value()[0], z.value()[1]}));
  }
}

TEST_CASE("total loss differentiates through the relaxation (fd check)") {
  TinyRig rig;
  const auto tpl = rig.tpl_d;  // double template
  tokenizer::PoseTokenizer<double> tok(rig.tok_cfg, 31);
  const auto ds = data::generate_dataset(tiny_data_config(2, false));

  const int m = rig.tok_cfg.num_tokens, k = rig.tok_cfg.codebook_size;
  Rng rng(7);
  transformer::MaskedSequence seq;
  seq.batch = 1;
  seq.tokens.resize(static_cast<std::size_t>(m));
  seq.mask.resize(static_cast<std::size_t>(m));
  std::vector<int> targets(static_cast<std::size_t>(m));
  for (int p = 0; p < m; ++p) {
    targets[static_cast<std::size_t>(p)] =
        static_cast<int>(rng.index(static_cast<std::uint64_t>(k)));
    const bool masked = p % 3 != 0;
    seq.mask[static_cast<std::size_t>(p)] = masked;
    seq.tokens[static_cast<std::size_t>(p)] =
        masked ? k : targets[static_cast<std::size_t>(p)];
  }
  Tensor<double> trans({1, 3});
  trans[0] = 0.02;
  trans[1] = -0.01;
  trans[2] = 1.1;
  train::LossWeights w;
  Tensor<double> logits0 = random_tensor(rng, {m, k});
  Tensor<double> beta0 = random_tensor(rng, {1, hand::kBetaDim}, 0.3);

  // Ground truth offset from the model outputs so no L1 residual sits on its
  // kink during the finite-difference probes.
  train::BatchTargets<double> gt;
  {
    ad::NoGradGuard ng;
    Var<double> zbar = train::expected_embedding(Var<double>::constant(logits0),
                                                 tok.codebook_entries);
    Var<double> th0 = tok.decode(ad::reshape(zbar, {1, m, rig.tok_cfg.code_dim}));
    auto fk0 = hand::fk_batched(th0, Var<double>::constant(beta0), tpl);
    Var<double> j2d0 = hand::pinhole_project(
        fk0.joints, Var<double>::constant(trans), 1000.0, 112.0, 112.0);
    const auto margin = [&](Tensor<double> t, double scale) {
      Rng mr(777);
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] -= scale * (0.5 + mr.uniform());
      return t;
    };
    gt.theta = margin(th0.value(), 0.05);
    gt.beta = margin(beta0, 0.05);
    gt.joints3d = margin(fk0.joints.value(), 0.01);
    gt.joints2d = margin(j2d0.value(), 2.0);
  }

  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        auto parts = train::total_loss<double>(
            ad::reshape(v[0], {1, m, k}), seq, targets, v[1],
            Var<double>::constant(trans), gt, tok, tpl, w, 224, 1000.0);
        return parts.total;
      },
      {logits0, beta0}, 1e-4, 1e-6, 32);
}

TEST_CASE("perfect predictions reduce the total loss to the mask term") {
  TinyRig rig;
  tokenizer::PoseTokenizer<double> tok(rig.tok_cfg, 33);
  const auto tpl = rig.tpl_d;
  const int m = rig.tok_cfg.num_tokens, k = rig.tok_cfg.codebook_size;
  Rng rng(8);

  Tensor<double> logits = random_tensor(rng, {1, m, k}, 1.5);
  transformer::MaskedSequence seq;
  seq.batch = 1;
  seq.tokens.assign(static_cast<std::size_t>(m), k);
  seq.mask.assign(static_cast<std::size_t>(m), 1);
  std::vector<int> targets(static_cast<std::size_t>(m), 3);

  Tensor<double> beta = random_tensor(rng, {1, hand::kBetaDim}, 0.4);
  Tensor<double> trans({1, 3});
  trans[2] = 1.2;

  // Derive the ground truth FROM the model pipeline so residuals vanish.
  Var<double> zbar = train::expected_embedding(
      ad::reshape(Var<double>::constant(logits), {m, k}),
      tok.codebook_entries);
  Var<double> theta_hat =
      tok.decode(ad::reshape(zbar, {1, m, rig.tok_cfg.code_dim}));
  auto fk = hand::fk_batched(theta_hat, Var<double>::constant(beta), tpl);
  Var<double> j2d = hand::pinhole_project(fk.joints, Var<double>::constant(trans),
                                          1000.0, 112.0, 112.0);
  train::BatchTargets<double> gt;
  gt.theta = theta_hat.value();
  gt.beta = beta;
  gt.joints3d = fk.joints.value();
  gt.joints2d = j2d.value();

  auto parts = train::total_loss<double>(
      Var<double>::constant(logits), seq, targets, Var<double>::constant(beta),
      Var<double>::constant(trans), gt, tok, tpl, train::LossWeights{}, 224,
      1000.0);
  CHECK(parts.l_mano == doctest::Approx(0.0));
  CHECK(parts.l_3d == doctest::Approx(0.0));
  CHECK(parts.l_2d == doctest::Approx(0.0));
  CHECK(parts.total.value()[0] ==
        doctest::Approx(parts.l_mask * 1.0).epsilon(1e-12));
}

TEST_CASE("default loss weights match the documented recipe") {
  const train::LossWeights w;
  CHECK(w.lambda_mask == 1.0);
  CHECK(w.lambda_theta == 1e-3);
  CHECK(w.lambda_beta == 5e-4);
  CHECK(w.lambda_3d == 5e-2);
  CHECK(w.lambda_2d == 1e-2);
}

TEST_CASE("one masked training step leaves the tokenizer untouched") {
  TinyRig rig;
  tokenizer::PoseTokenizer<float> tok(rig.tok_cfg, 41);
  tok.freeze();
  const std::uint64_t tok_hash_before = tok.params.content_hash();
  const auto tpl = rig.tpl_d.cast<float>();
  transformer::ContextTransformer<float> model(rig.model_cfg, 42);
  const auto ds = data::generate_dataset(tiny_data_config(8, true));
  const auto gt_tokens = train::tokenize_dataset(tok, ds);

  train::MaskedTrainConfig cfg;
  cfg.batch_size = 4;
  cfg.lr = 1e-4;
  nn::Adam<float> opt(cfg.lr);
  Rng mask_rng(1), noise_rng(2);
  const auto metrics = train::train_masked_step(
      model, tok, tpl, ds, {0, 1, 2, 3}, gt_tokens, cfg, opt, mask_rng,
      noise_rng);
  CHECK(std::isfinite(metrics.total));
  CHECK(std::isfinite(metrics.grad_norm));
  CHECK(metrics.grad_norm > 0.0);
  CHECK(tok.params.content_hash() == tok_hash_before);  // frozen, bit-exact
}

TEST_CASE("the masked loss falls over 200 steps on a fixed small batch") {
  TinyRig rig;
  tokenizer::PoseTokenizer<float> tok(rig.tok_cfg, 51);
  tok.freeze();
  const auto tpl = rig.tpl_d.cast<float>();
  transformer::ContextTransformer<float> model(rig.model_cfg, 52);
  const auto ds = data::generate_dataset(tiny_data_config(16, true));
  const auto gt_tokens = train::tokenize_dataset(tok, ds);

  train::MaskedTrainConfig cfg;
  cfg.batch_size = 16;
  cfg.lr = 3e-4;
  nn::Adam<float> opt(cfg.lr);
  Rng mask_rng(3), noise_rng(4);
  std::vector<int> batch(16);
  for (int i = 0; i < 16; ++i) batch[static_cast<std::size_t>(i)] = i;

  double first_avg = 0.0, last_avg = 0.0;
  for (int step = 0; step < 200; ++step) {
    const auto m = train::train_masked_step(model, tok, tpl, ds, batch,
                                            gt_tokens, cfg, opt, mask_rng,
                                            noise_rng);
    CHECK(std::isfinite(m.grad_norm));
    if (step < 20) first_avg += m.total / 20.0;
    if (step >= 180) last_avg += m.total / 20.0;
  }
  CHECK(last_avg < first_avg);
}

TEST_CASE("metrics serialize as flat json records") {
  train::StepMetrics m;
  m.step = 3;
  m.total = 1.5;
  const auto j = m.to_json();
  CHECK(j["step"] == 3);
  CHECK(j.contains("l_mask"));
  CHECK(j.contains("grad_norm"));
}

TEST_SUITE_END();
