#include <doctest.h>

#include "gradcheck.hpp"
#include "hmr/context_transformer.hpp"

using namespace hmr;
using namespace hmr::testing;
using ad::Tensor;
using ad::Var;

TEST_SUITE_BEGIN("transformer");

namespace {

transformer::TransformerConfig tiny_config() {
  transformer::TransformerConfig cfg;
  cfg.c_model = 32;
  cfg.heads = 4;
  cfg.enc_blocks = 1;
  cfg.synth_layers = 2;
  cfg.num_tokens = 16;
  cfg.codebook_size = 32;
  return cfg;
}

const transformer::ContextTransformer<double>& tiny_model() {
  static const transformer::ContextTransformer<double> model(tiny_config(), 3);
  return model;
}

Tensor<double> random_image(Rng& rng, int bsz, int s) {
  Tensor<double> img({bsz, s, s, 3});
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
  return img;
}

Tensor<double> random_keypoints(Rng& rng, int bsz) {
  Tensor<double> kp({bsz, 21, 3});
  for (std::int64_t i = 0; i < kp.rows(); ++i) {
    kp[i * 3 + 0] = rng.uniform(0, 224);
    kp[i * 3 + 1] = rng.uniform(0, 224);
    kp[i * 3 + 2] = 1.0;
  }
  return kp;
}

transformer::MaskedSequence random_sequence(Rng& rng, int bsz, int m, int k,
                                            double mask_prob) {
  transformer::MaskedSequence seq;
  seq.batch = bsz;
  seq.tokens.resize(static_cast<std::size_t>(bsz) * m);
  seq.mask.resize(static_cast<std::size_t>(bsz) * m);
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    const bool masked = rng.uniform() < mask_prob;
    seq.mask[i] = masked;
    seq.tokens[i] = masked ? k : static_cast<int>(rng.index(static_cast<std::uint64_t>(k)));
  }
  return seq;
}

}  // namespace

TEST_CASE("default-size encoder produces the documented map shapes") {
  transformer::TransformerConfig cfg;  // C = 128, 224 x 224, patch 16
  transformer::ContextTransformer<float> model(cfg, 5);
  Rng rng(1);
  Tensor<float> img({1, 224, 224, 3});
  for (std::int64_t i = 0; i < img.numel(); ++i)
    img[i] = static_cast<float>(rng.uniform());
  ad::NoGradGuard ng;
  const auto ctx = model.encode_image(img);
  CHECK(ctx.map1.shape() == std::vector<int>{1, 14, 14, 128});
  CHECK(ctx.map4.shape() == std::vector<int>{1, 56, 56, 128});
}

TEST_CASE("encoder is deterministic and finite on zero input") {
  const auto& model = tiny_model();
  ad::NoGradGuard ng;
  Tensor<double> zero({1, 224, 224, 3});
  const auto ctx = model.encode_image(zero);
  CHECK(ctx.map1.value().all_finite());
  CHECK(ctx.map4.value().all_finite());
  Rng rng(2);
  const auto img = random_image(rng, 1, 224);
  const auto a = model.encode_image(img);
  const auto b = model.encode_image(img);
  CHECK(a.map1.value().arr().isApprox(b.map1.value().arr(), 0.0));
  CHECK(a.map4.value().arr().isApprox(b.map4.value().arr(), 0.0));
}

TEST_CASE("wrong spatial size is rejected") {
  const auto& model = tiny_model();
  Tensor<double> bad({1, 128, 128, 3});
  CHECK_THROWS_AS(model.encode_image(bad), InputError);
}

TEST_CASE("gcn embedding is equivariant under keypoint permutations") {
  const auto& model = tiny_model();
  Rng rng(3);
  const auto kp = random_keypoints(rng, 1);
  const Tensor<double> adj = transformer::normalized_hand_adjacency();
  ad::NoGradGuard ng;
  const auto base = model.embed_2d_pose_with(adj, kp).value();

  // Swap keypoints 4 and 9 and permute the adjacency consistently.
  std::vector<int> perm(21);
  for (int i = 0; i < 21; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[4], perm[9]);
  Tensor<double> kp_p({1, 21, 3});
  Tensor<double> adj_p({21, 21});
  for (int i = 0; i < 21; ++i) {
    for (int c = 0; c < 3; ++c)
      kp_p[i * 3 + c] = kp[perm[static_cast<std::size_t>(i)] * 3 + c];
    for (int j = 0; j < 21; ++j)
      adj_p[i * 21 + j] = adj[perm[static_cast<std::size_t>(i)] * 21 +
                              perm[static_cast<std::size_t>(j)]];
  }
  const auto permuted = model.embed_2d_pose_with(adj_p, kp_p).value();
  for (int i = 0; i < 21; ++i)
    for (int c = 0; c < 32; ++c)
      CHECK(permuted[i * 32 + c] ==
            doctest::Approx(base[perm[static_cast<std::size_t>(i)] * 32 + c])
                .epsilon(1e-12));
}

TEST_CASE("gcn embedding of zero keypoints is the bias pathway, finite") {
  const auto& model = tiny_model();
  Tensor<double> zeros({1, 21, 3});
  ad::NoGradGuard ng;
  const auto emb = model.embed_2d_pose(zeros).value();
  CHECK(emb.all_finite());
}

TEST_CASE("gcn embedding matches hand-computed matrix arithmetic") {
  auto model = transformer::ContextTransformer<double>(tiny_config(), 7);
  // Single-edge toy graph on nodes 0-1 (plus self loops), hand-normalized.
  Tensor<double> adj({21, 21});
  for (int i = 0; i < 21; ++i) adj[i * 21 + i] = 1.0;
  adj[0 * 21 + 1] = adj[1 * 21 + 0] = 1.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) adj[i * 21 + j] /= 2.0;  // D^{-1/2}(A+I)D^{-1/2}

  Rng rng(8);
  const auto kp = random_keypoints(rng, 1);
  ad::NoGradGuard ng;
  const auto got = model.embed_2d_pose_with(adj, kp).value();

  // Reference: H2 = A_hat (relu(A_hat X W1 + b1)) W2 + b2 with explicit Eigen.
  Eigen::MatrixXd x(21, 3);
  for (int i = 0; i < 21; ++i) {
    x(i, 0) = kp[i * 3 + 0] / 224.0;
    x(i, 1) = kp[i * 3 + 1] / 224.0;
    x(i, 2) = kp[i * 3 + 2];
  }
  Eigen::MatrixXd a(21, 21);
  for (int i = 0; i < 21; ++i)
    for (int j = 0; j < 21; ++j) a(i, j) = adj[i * 21 + j];
  const auto& w1 = model.params.at("gcn.l1.w").value();
  const auto& b1 = model.params.at("gcn.l1.b").value();
  const auto& w2 = model.params.at("gcn.l2.w").value();
  const auto& b2 = model.params.at("gcn.l2.b").value();
  Eigen::MatrixXd w1m(3, 32), w2m(32, 32);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 32; ++j) w1m(i, j) = w1[i * 32 + j];
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) w2m(i, j) = w2[i * 32 + j];
  Eigen::MatrixXd h1 = (a * x) * w1m;
  for (int i = 0; i < 21; ++i)
    for (int j = 0; j < 32; ++j) h1(i, j) = std::max(0.0, h1(i, j) + b1[j]);
  Eigen::MatrixXd h2 = (a * h1) * w2m;
  for (int i = 0; i < 21; ++i)
    for (int j = 0; j < 32; ++j) {
      const double expect = h2(i, j) + b2[j];
      CHECK(got[i * 32 + j] == doctest::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("gapr residual is exact identity under zeroed branch weights") {
  auto model = transformer::ContextTransformer<double>(tiny_config(), 9);
  for (const char* name :
       {"gapr.eq1_attn.qkv.w", "gapr.eq1_attn.qkv.b", "gapr.eq1_attn.proj.w",
        "gapr.eq1_attn.proj.b", "gapr.eq1_conv.w", "gapr.eq1_conv.b"})
    model.params.at(name).value().set_zero();
  Rng rng(10);
  Tensor<double> q = random_tensor(rng, {2, 37, 32});
  ad::NoGradGuard ng;
  const auto out = model.gapr_refine_residual(Var<double>::constant(q)).value();
  CHECK(out.arr().isApprox(q.arr(), 0.0));
}

TEST_CASE("gapr gate forced to one returns the normalized residual exactly") {
  const auto& model = tiny_model();
  Rng rng(11);
  Tensor<double> q = random_tensor(rng, {1, 37, 32});
  ad::NoGradGuard ng;
  const auto forced =
      model.gapr_se_gate(Var<double>::constant(q), /*force_gate_one=*/true);
  // A saturated gate approaches the same result.
  auto model2 = transformer::ContextTransformer<double>(tiny_config(), 3);
  model2.params.at("gapr.se_fc2.w").value().set_zero();
  model2.params.at("gapr.se_fc2.b").value().arr().setConstant(40.0);
  const auto saturated =
      model2.gapr_se_gate(Var<double>::constant(q), false).value();
  CHECK((forced.value().arr() - saturated.arr()).abs().maxCoeff() < 1e-9);
}

TEST_CASE("gapr_forward preserves the query shape") {
  const auto& model = tiny_model();
  Rng rng(12);
  Tensor<double> q = random_tensor(rng, {2, 37, 32});
  ad::NoGradGuard ng;
  const auto out = model.gapr_forward(Var<double>::constant(q));
  CHECK(out.shape() == std::vector<int>{2, 37, 32});
  CHECK(out.value().all_finite());
}

TEST_CASE("deformable attention weights are a simplex per query and head") {
  const auto& model = tiny_model();
  Rng rng(13);
  Tensor<double> q = random_tensor(rng, {2, 37, 32});
  const auto w =
      model.deformable_attention_weights(0, Var<double>::constant(q));
  for (std::int64_t r = 0; r < w.rows(); ++r) {
    double sum = 0.0;
    for (std::int64_t c = 0; c < w.cols(); ++c) {
      CHECK(w[r * w.cols() + c] >= 0.0);
      sum += w[r * w.cols() + c];
    }
    CHECK(std::abs(sum - 1.0) < 1e-5);
  }
}

TEST_CASE("degenerate deformable read reduces to a projected pixel feature") {
  auto model = transformer::ContextTransformer<double>(tiny_config(), 14);
  const int c = 32, heads = 4, points = 4;
  // All probability mass on (level 0, point 0) for every head.
  model.params.at("synth.l0.weight.w").value().set_zero();
  auto& wbias = model.params.at("synth.l0.weight.b").value();
  wbias.set_zero();
  for (int h = 0; h < heads; ++h) wbias[h * 2 * points + 0] = 60.0;
  // Zero offsets; identity output projection; reference at a pixel center.
  model.params.at("synth.l0.offset.w").value().set_zero();
  model.params.at("synth.l0.offset.b").value().set_zero();
  auto& outw = model.params.at("synth.l0.out.w").value();
  outw.set_zero();
  for (int i = 0; i < c; ++i) outw[i * c + i] = 1.0;
  model.params.at("synth.l0.out.b").value().set_zero();
  // Pixel (3, 5) of the 14x14 map: u = (5 + 0.5)/14, v = (3 + 0.5)/14.
  const double u = 5.5 / 14.0, v = 3.5 / 14.0;
  auto& ref = model.params.at("synth.ref").value();
  for (int qi = 0; qi < 37; ++qi) {
    ref[qi * 2 + 0] = std::log(u / (1 - u));
    ref[qi * 2 + 1] = std::log(v / (1 - v));
  }

  Rng rng(15);
  transformer::ImageContext<double> ctx;
  Tensor<double> map1 = random_tensor(rng, {1, 14, 14, c});
  ctx.map1 = Var<double>::constant(map1);
  ctx.map4 = Var<double>::constant(Tensor<double>({1, 56, 56, c}));
  Tensor<double> q = random_tensor(rng, {1, 37, c});
  ad::NoGradGuard ng;
  const auto out = model.deformable_read(0, Var<double>::constant(q), ctx).value();

  // Expected: value projection of that pixel's feature, per head block.
  const auto& vw = model.params.at("synth.l0.value.w").value();
  const auto& vb = model.params.at("synth.l0.value.b").value();
  Eigen::VectorXd feat(c);
  for (int i = 0; i < c; ++i) feat(i) = map1[((3 * 14) + 5) * c + i];
  Eigen::VectorXd projected(c);
  for (int j = 0; j < c; ++j) {
    double acc = vb[j];
    for (int i = 0; i < c; ++i) acc += feat(i) * vw[i * c + j];
    projected(j) = acc;
  }
  for (int qi = 0; qi < 37; ++qi)
    for (int j = 0; j < c; ++j)
      CHECK(out[qi * c + j] == doctest::Approx(projected(j)).epsilon(1e-9));
}

TEST_CASE("on a constant map, any sampling pattern yields the same read") {
  auto model = transformer::ContextTransformer<double>(tiny_config(), 16);
  Rng rng(17);
  transformer::ImageContext<double> ctx;
  Tensor<double> m1({1, 14, 14, 32});
  Tensor<double> m4({1, 56, 56, 32});
  for (int c = 0; c < 32; ++c) {
    const double value = rng.normal();
    for (int p = 0; p < 14 * 14; ++p) m1[p * 32 + c] = value;
    for (int p = 0; p < 56 * 56; ++p) m4[p * 32 + c] = value;
  }
  ctx.map1 = Var<double>::constant(m1);
  ctx.map4 = Var<double>::constant(m4);
  Tensor<double> q = random_tensor(rng, {1, 37, 32});
  ad::NoGradGuard ng;
  const auto a = model.deformable_read(0, Var<double>::constant(q), ctx).value();
  // Perturb the sampling parameters: the read must not change (convexity on
  // a constant field), as long as samples stay in-bounds; keep offsets zero
  // and move the reference points instead.
  auto& ref = model.params.at("synth.ref").value();
  for (std::int64_t i = 0; i < ref.numel(); ++i) ref[i] += 0.3;
  model.params.at("synth.l0.offset.w").value().set_zero();
  model.params.at("synth.l0.offset.b").value().set_zero();
  const auto b = model.deformable_read(0, Var<double>::constant(q), ctx).value();
  CHECK((a.arr() - b.arr()).abs().maxCoeff() < 1e-9);
}

TEST_CASE("bilinear sampling matches the four-corner oracle") {
  Tensor<double> map({1, 2, 2, 1});
  map[0] = 1.0;  // (0,0)
  map[1] = 2.0;  // (0,1)
  map[2] = 3.0;  // (1,0)
  map[3] = 4.0;  // (1,1)
  Tensor<double> locs({1, 1, 2});
  // x = u*W - 0.5 = 0.3, y = 0.7 -> weights (0.7,0.3)x(0.3,0.7).
  locs[0] = 0.4;
  locs[1] = 0.6;
  ad::NoGradGuard ng;
  const auto out =
      ad::grid_sample(Var<double>::constant(map), Var<double>::constant(locs))
          .value();
  const double expect = 1.0 * 0.7 * 0.3 + 2.0 * 0.3 * 0.3 + 3.0 * 0.7 * 0.7 +
                        4.0 * 0.3 * 0.7;
  CHECK(out[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("predict_logits satisfies the shape contract and stays finite") {
  const auto& model = tiny_model();
  Rng rng(18);
  const auto cfg = model.cfg;
  ad::NoGradGuard ng;
  const auto ctx = model.zero_context(1);
  Tensor<double> kp({1, 21, 3});

  // Fully masked, zero context: the unconditional prior mode.
  transformer::MaskedSequence full;
  full.batch = 1;
  full.tokens.assign(static_cast<std::size_t>(cfg.num_tokens), cfg.codebook_size);
  full.mask.assign(static_cast<std::size_t>(cfg.num_tokens), 1);
  const auto logits = model.predict_logits(full, kp, ctx);
  CHECK(logits.shape() ==
        std::vector<int>{1, cfg.num_tokens, cfg.codebook_size});
  CHECK(logits.value().all_finite());

  // Mixed and unmasked inputs stay finite too.
  for (double p : {0.0, 0.5}) {
    auto seq = random_sequence(rng, 2, cfg.num_tokens, cfg.codebook_size, p);
    const auto l2 = model.predict_logits(seq, random_keypoints(rng, 2),
                                         model.zero_context(2));
    CHECK(l2.value().all_finite());
  }
}

TEST_CASE("changing one unmasked token changes masked-position logits") {
  const auto& model = tiny_model();
  const auto cfg = model.cfg;
  Rng rng(19);
  auto seq = random_sequence(rng, 1, cfg.num_tokens, cfg.codebook_size, 0.0);
  seq.tokens[5] = cfg.codebook_size;  // mask one position
  seq.mask[5] = 1;
  const auto kp = random_keypoints(rng, 1);
  ad::NoGradGuard ng;
  const auto ctx = model.zero_context(1);
  const auto a = model.predict_logits(seq, kp, ctx).value();
  seq.tokens[11] = (seq.tokens[11] + 7) % cfg.codebook_size;  // unmasked change
  const auto b = model.predict_logits(seq, kp, ctx).value();
  double diff = 0.0;
  for (int k = 0; k < cfg.codebook_size; ++k)
    diff = std::max(diff, std::abs(a[5 * cfg.codebook_size + k] -
                                   b[5 * cfg.codebook_size + k]));
  CHECK(diff > 1e-9);
}

TEST_CASE("masked logits respond to the image context") {
  const auto& model = tiny_model();
  const auto cfg = model.cfg;
  Rng rng(20);
  transformer::MaskedSequence seq;
  seq.batch = 1;
  seq.tokens.assign(static_cast<std::size_t>(cfg.num_tokens), cfg.codebook_size);
  seq.mask.assign(static_cast<std::size_t>(cfg.num_tokens), 1);
  const auto kp = random_keypoints(rng, 1);
  ad::NoGradGuard ng;
  int distinct = 0;
  const auto base =
      model.predict_logits(seq, kp, model.encode_image(random_image(rng, 1, 224)))
          .value();
  for (int trial = 0; trial < 4; ++trial) {
    const auto other =
        model
            .predict_logits(seq, kp, model.encode_image(random_image(rng, 1, 224)))
            .value();
    if ((base.arr() - other.arr()).abs().maxCoeff() > 1e-9) ++distinct;
  }
  CHECK(distinct == 4);
}

TEST_CASE("masked sequence invariants are validated") {
  transformer::MaskedSequence seq;
  seq.batch = 1;
  seq.tokens = {0, 5, 32, 1};
  seq.mask = {0, 0, 1, 0};
  CHECK_NOTHROW(seq.validate(32, 4));
  seq.mask[1] = 1;  // mask says masked but token is not the sentinel
  CHECK_THROWS_AS(seq.validate(32, 4), InputError);
  seq.mask[1] = 0;
  seq.tokens[0] = 40;
  CHECK_THROWS_AS(seq.validate(32, 4), TokenError);
}

TEST_CASE("shape and camera head obey the output contracts") {
  const auto& model = tiny_model();
  Rng rng(21);
  ad::NoGradGuard ng;
  const auto ctx = model.encode_image(random_image(rng, 2, 224));
  const auto out = model.predict_shape_camera(ctx);
  CHECK(out.beta.shape() == std::vector<int>{2, 10});
  CHECK(out.translation.shape() == std::vector<int>{2, 3});
  for (int b = 0; b < 2; ++b)
    CHECK(out.translation.value()[b * 3 + 2] > model.cfg.z_min);
}

TEST_CASE("camera depth stays positive for arbitrarily negative raw values") {
  auto model = transformer::ContextTransformer<double>(tiny_config(), 22);
  model.params.at("head.cam.w").value().set_zero();
  auto& bias = model.params.at("head.cam.b").value();
  bias[2] = -500.0;
  ad::NoGradGuard ng;
  const auto out = model.predict_shape_camera(model.zero_context(1));
  CHECK(out.translation.value()[2] > 0.0);
  CHECK(out.translation.value()[2] >= model.cfg.z_min);
}

TEST_CASE("label context requires a label vocabulary and validates ids") {
  const auto& plain = tiny_model();
  CHECK_THROWS_AS(plain.label_context({0}), ConfigError);
  auto cfg = tiny_config();
  cfg.num_labels = 5;
  transformer::ContextTransformer<double> model(cfg, 23);
  CHECK_THROWS_AS(model.label_context({7}), InputError);
  ad::NoGradGuard ng;
  const auto ctx = model.label_context({1, 4});
  CHECK(ctx.map1.shape() == std::vector<int>{2, 14, 14, 32});
  CHECK(ctx.map4.shape() == std::vector<int>{2, 56, 56, 32});
}

TEST_CASE("checkpoints round-trip the transformer") {
  transformer::ContextTransformer<float> model(tiny_config(), 24);
  const auto store = model.to_store();
  const auto loaded = transformer::ContextTransformer<float>::from_store(store);
  CHECK(loaded.params.content_hash() == model.params.content_hash());
  CHECK(loaded.cfg.hash() == model.cfg.hash());
}

TEST_SUITE_END();
