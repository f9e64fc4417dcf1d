#include <benchmark/benchmark.h>

#include "hmr/data_synth.hpp"
#include "hmr/inference.hpp"
#include "hmr/metrics.hpp"
#include "hmr/training.hpp"

using namespace hmr;

namespace {

const hand::HandTemplate<double>& tpl() {
  static const auto t = hand::build_synthetic_template({});
  return t;
}

void BM_ForwardKinematics(benchmark::State& state) {
  Rng rng(1);
  const auto pose = data::sample_pose(rng);
  const auto shape = hand::ShapeParams::zero();
  for (auto _ : state) {
    auto mesh = hand::forward_kinematics(pose, shape, tpl());
    benchmark::DoNotOptimize(mesh.vertices.data());
  }
}
BENCHMARK(BM_ForwardKinematics);

void BM_FkBatchedBackward(benchmark::State& state) {
  const auto t = tpl().cast<float>();
  Rng rng(2);
  ad::Tensor<float> theta({16, 48}), beta({16, 10});
  for (std::int64_t i = 0; i < theta.numel(); ++i)
    theta[i] = static_cast<float>(0.3 * rng.normal());
  for (auto _ : state) {
    ad::Var<float> th = ad::Var<float>::leaf(theta, true);
    auto fk = hand::fk_batched(th, ad::Var<float>::constant(beta), t);
    ad::backward(ad::mean_all(fk.vertices));
    benchmark::DoNotOptimize(th.grad().data());
  }
}
BENCHMARK(BM_FkBatchedBackward);

void BM_Quantize(benchmark::State& state) {
  Rng rng(3);
  ad::Tensor<float> entries({256, 64}), z({64, 64});
  for (std::int64_t i = 0; i < entries.numel(); ++i)
    entries[i] = static_cast<float>(rng.normal());
  for (std::int64_t i = 0; i < z.numel(); ++i)
    z[i] = static_cast<float>(rng.normal());
  for (auto _ : state) {
    auto [idx, zq] = tokenizer::quantize(z, entries);
    benchmark::DoNotOptimize(idx.data());
  }
}
BENCHMARK(BM_Quantize);

void BM_EncodeImage(benchmark::State& state) {
  transformer::TransformerConfig cfg;
  static transformer::ContextTransformer<float> model(cfg, 4);
  Rng rng(5);
  ad::Tensor<float> img({1, 224, 224, 3});
  for (std::int64_t i = 0; i < img.numel(); ++i)
    img[i] = static_cast<float>(rng.uniform());
  ad::NoGradGuard ng;
  for (auto _ : state) {
    auto ctx = model.encode_image(img);
    benchmark::DoNotOptimize(ctx.map4.value().data());
  }
}
BENCHMARK(BM_EncodeImage);

void BM_DecodeIteration(benchmark::State& state) {
  transformer::TransformerConfig mc;
  tokenizer::TokenizerConfig tc;
  static transformer::ContextTransformer<float> model(mc, 6);
  static tokenizer::PoseTokenizer<float> tok(tc, 7);
  static infer::Decoder<float> decoder(model, tok, tpl());
  infer::DecodeSchedule sched;
  sched.iterations = static_cast<int>(state.range(0));
  const auto ctx = model.zero_context(1);
  ad::Tensor<float> kp({1, 21, 3});
  std::uint64_t seed = 0;
  for (auto _ : state) {
    Rng rng(seed++);
    auto dec = decoder.iterative_decode(kp, ctx, sched, rng);
    benchmark::DoNotOptimize(dec.tokens.data());
  }
}
BENCHMARK(BM_DecodeIteration)->Arg(1)->Arg(3)->Arg(5);

void BM_Procrustes(benchmark::State& state) {
  Rng rng(8);
  ad::Tensor<double> a({21, 3}), b({21, 3});
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    a[i] = 0.1 * rng.normal();
    b[i] = 0.1 * rng.normal();
  }
  for (auto _ : state) {
    const double e = metrics::pa_mpjpe(a, b);
    benchmark::DoNotOptimize(e);
  }
}
BENCHMARK(BM_Procrustes);

void BM_HeatmapRender(benchmark::State& state) {
  Rng rng(9);
  ad::Tensor<double> joints({21, 2});
  for (std::int64_t i = 0; i < joints.numel(); ++i)
    joints[i] = rng.uniform(20, 200);
  for (auto _ : state) {
    auto img = data::render_heatmap_image(joints, hand::skeleton_edges21(), 224);
    benchmark::DoNotOptimize(img.data());
  }
}
BENCHMARK(BM_HeatmapRender);

}  // namespace

BENCHMARK_MAIN();
