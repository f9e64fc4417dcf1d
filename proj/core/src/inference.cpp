#include "hmr/inference.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

namespace hmr::infer {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

int remask_count(int t, int iterations, int length) {
  if (t < 1 || t > iterations)
    throw InputError("remask_count: iteration out of range");
  if (t == iterations) return 0;
  const double g = std::cos(kPi * t / (2.0 * iterations));
  return static_cast<int>(std::ceil(g * length));
}

nlohmann::json Hypothesis::to_json() const {
  nlohmann::json j;
  j["tokens"] = tokens;
  j["token_probs"] = token_probs;
  j["confidence"] = confidence;
  std::vector<double> th(pose.theta.data(), pose.theta.data() + hand::kThetaDim);
  j["theta"] = th;
  std::vector<double> be(shape.beta.data(), shape.beta.data() + hand::kBetaDim);
  j["beta"] = be;
  j["camera"] = {{"translation",
                  std::vector<double>{camera.translation[0], camera.translation[1],
                                      camera.translation[2]}},
                 {"focal_px", camera.focal},
                 {"principal_point", std::vector<double>{camera.cx, camera.cy}}};
  j["trace"] = {{"masked_entering", trace.masked_entering},
                {"mean_kept_confidence", trace.mean_kept_confidence}};
  j["aiti_seconds"] = aiti_seconds;
  return j;
}

template <typename T>
DecodeResult Decoder<T>::iterative_decode(
    const Tensor<T>& keypoints, const transformer::ImageContext<T>& ctx,
    const DecodeSchedule& schedule, Rng& rng) const {
  schedule.validate();
  ad::NoGradGuard ng;
  const int m = model_.cfg.num_tokens;
  const int k = model_.cfg.codebook_size;
  const int big_t = schedule.iterations;
  const double inv_temp = 1.0 / schedule.temperature;
  const int top_k =
      schedule.top_k > 0 ? std::min(schedule.top_k, k) : k;

  transformer::MaskedSequence seq;
  seq.batch = 1;
  seq.tokens.assign(static_cast<std::size_t>(m), k);
  seq.mask.assign(static_cast<std::size_t>(m), 1);

  DecodeResult out;
  out.tokens.assign(static_cast<std::size_t>(m), -1);
  out.token_probs.assign(static_cast<std::size_t>(m), 0.0);

  std::vector<double> probs(static_cast<std::size_t>(k));
  std::vector<int> order(static_cast<std::size_t>(k));

  for (int t = 1; t <= big_t; ++t) {
    int masked = 0;
    for (const auto f : seq.mask) masked += f ? 1 : 0;
    out.trace.masked_entering.push_back(masked);
    if (schedule.record_iterations) out.iteration_tokens.push_back(seq.tokens);
    if (masked == 0) {
      out.trace.mean_kept_confidence.push_back(0.0);
      continue;
    }

    Var<T> logits = model_.predict_logits(seq, keypoints, ctx);
    const Tensor<T>& lv = logits.value();

    // Sample every currently-masked position.
    struct Draw {
      int pos;
      int token;
      double prob;
    };
    std::vector<Draw> draws;
    draws.reserve(static_cast<std::size_t>(masked));
    for (int p = 0; p < m; ++p) {
      if (!seq.mask[static_cast<std::size_t>(p)]) continue;
      // Tempered softmax over this position's logits.
      double mx = -1e300;
      for (int i = 0; i < k; ++i)
        mx = std::max(mx, static_cast<double>(lv[static_cast<std::int64_t>(p) * k + i]));
      double z = 0.0;
      for (int i = 0; i < k; ++i) {
        probs[static_cast<std::size_t>(i)] = std::exp(
            (static_cast<double>(lv[static_cast<std::int64_t>(p) * k + i]) - mx) *
            inv_temp);
        z += probs[static_cast<std::size_t>(i)];
      }
      for (int i = 0; i < k; ++i) probs[static_cast<std::size_t>(i)] /= z;

      // Optional top-k restriction (rank by probability, ties to low index).
      std::iota(order.begin(), order.end(), 0);
      if (top_k < k)
        std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                          [&](int a, int b) {
                            const double pa = probs[static_cast<std::size_t>(a)];
                            const double pb = probs[static_cast<std::size_t>(b)];
                            return pa != pb ? pa > pb : a < b;
                          });
      double zk = 0.0;
      for (int i = 0; i < top_k; ++i)
        zk += probs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      const double u = rng.uniform() * zk;
      double acc = 0.0;
      int chosen = order[static_cast<std::size_t>(top_k - 1)];
      for (int i = 0; i < top_k; ++i) {
        const int cand = order[static_cast<std::size_t>(i)];
        acc += probs[static_cast<std::size_t>(cand)];
        if (u < acc) {
          chosen = cand;
          break;
        }
      }
      draws.push_back({p, chosen, probs[static_cast<std::size_t>(chosen)]});
    }

    // Keep the most confident draws; exactly remask_count return to [MASK].
    // At least one token is kept per iteration so unmasking always makes
    // progress (the ceiling can otherwise saturate at short lengths).
    const int remask = std::min(remask_count(t, big_t, m), masked - 1);
    const int keep = masked - remask;
    std::stable_sort(draws.begin(), draws.end(), [](const Draw& a, const Draw& b) {
      return a.prob != b.prob ? a.prob > b.prob : a.pos < b.pos;
    });
    double kept_conf = 0.0;
    for (int i = 0; i < keep; ++i) {
      const Draw& d = draws[static_cast<std::size_t>(i)];
      seq.tokens[static_cast<std::size_t>(d.pos)] = d.token;
      seq.mask[static_cast<std::size_t>(d.pos)] = 0;
      out.tokens[static_cast<std::size_t>(d.pos)] = d.token;
      out.token_probs[static_cast<std::size_t>(d.pos)] = d.prob;
      kept_conf += d.prob;
    }
    out.trace.mean_kept_confidence.push_back(keep > 0 ? kept_conf / keep : 0.0);
  }

  double conf = 0.0;
  for (int p = 0; p < m; ++p) {
    if (out.tokens[static_cast<std::size_t>(p)] < 0)
      throw NumericError("iterative_decode: position left masked after T");
    conf += std::log(out.token_probs[static_cast<std::size_t>(p)]);
  }
  out.confidence = conf / m;
  return out;
}

template <typename T>
hand::CameraParams Decoder<T>::camera_from(const Var<T>& translation,
                                           int row) const {
  Tensor<double> t({3});
  for (int c = 0; c < 3; ++c)
    t[c] = static_cast<double>(
        translation.value()[static_cast<std::int64_t>(row) * 3 + c]);
  const double half = model_.cfg.image_size / 2.0;
  return hand::CameraParams(std::move(t), model_.cfg.focal_px, half, half);
}

template <typename T>
hand::ShapeParams Decoder<T>::shape_from(const Var<T>& beta, int row) const {
  Tensor<double> b({hand::kBetaDim});
  for (int c = 0; c < hand::kBetaDim; ++c)
    b[c] = static_cast<double>(
        beta.value()[static_cast<std::int64_t>(row) * hand::kBetaDim + c]);
  return hand::ShapeParams(std::move(b));
}

template <typename T>
Hypothesis Decoder<T>::finalize(const DecodeResult& dec,
                                const hand::ShapeParams& shape,
                                const hand::CameraParams& camera,
                                bool clamp_pose) const {
  Hypothesis h;
  h.tokens = dec.tokens;
  h.token_probs = dec.token_probs;
  h.confidence = dec.confidence;
  h.trace = dec.trace;
  h.shape = shape;
  h.camera = camera;
  h.pose = tok_.detokenize(dec.tokens);
  if (clamp_pose) h.pose = hand::clamp_to_limits(h.pose);
  h.mesh = hand::forward_kinematics(h.pose, h.shape, tpl_);
  return h;
}

template <typename T>
Hypothesis Decoder<T>::reconstruct(const Tensor<float>& image,
                                   const Tensor<double>& keypoints2d,
                                   const DecodeSchedule& schedule,
                                   Rng& rng) const {
  const auto t0 = std::chrono::steady_clock::now();
  ad::NoGradGuard ng;
  Tensor<T> img({1, model_.cfg.image_size, model_.cfg.image_size, 3});
  if (image.numel() != img.numel())
    throw InputError("reconstruct: image size mismatch");
  for (std::int64_t i = 0; i < img.numel(); ++i)
    img[i] = static_cast<T>(image[i]);
  transformer::ImageContext<T> ctx = model_.encode_image(img);

  if (keypoints2d.rows() != hand::kNumRegressed ||
      (keypoints2d.cols() != 2 && keypoints2d.cols() != 3))
    throw InputError("reconstruct: keypoints must be (21, 2) or (21, 3)");
  Tensor<T> kp({1, hand::kNumRegressed, 3});
  for (int j = 0; j < hand::kNumRegressed; ++j) {
    const auto c = keypoints2d.cols();
    kp[j * 3 + 0] = static_cast<T>(keypoints2d[j * c + 0]);
    kp[j * 3 + 1] = static_cast<T>(keypoints2d[j * c + 1]);
    kp[j * 3 + 2] = c == 3 ? static_cast<T>(keypoints2d[j * 3 + 2]) : T(1);
  }

  auto head = model_.predict_shape_camera(ctx);
  DecodeResult dec = iterative_decode(kp, ctx, schedule, rng);
  Hypothesis h = finalize(dec, shape_from(head.beta, 0), camera_from(head.translation, 0),
                          /*clamp_pose=*/false);
  h.aiti_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return h;
}

template <typename T>
std::vector<Hypothesis> Decoder<T>::generate_unconditional(
    int n, const DecodeSchedule& schedule, Rng& rng) const {
  if (n < 1) throw InputError("generate: n must be >= 1");
  ad::NoGradGuard ng;
  transformer::ImageContext<T> ctx = model_.zero_context(1);
  Tensor<T> kp({1, hand::kNumRegressed, 3});  // zeroed keypoints
  auto head = model_.predict_shape_camera(ctx);
  const hand::ShapeParams shape = shape_from(head.beta, 0);
  const hand::CameraParams camera = camera_from(head.translation, 0);

  DecodeSchedule sched = schedule;
  if (sched.top_k == 0) sched.top_k = 100;
  std::vector<Hypothesis> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    DecodeResult dec = iterative_decode(kp, ctx, sched, rng);
    Hypothesis h = finalize(dec, shape, camera, /*clamp_pose=*/true);
    h.aiti_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    out.push_back(std::move(h));
  }
  std::stable_sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.confidence > b.confidence;
  });
  return out;
}

template <typename T>
std::vector<Hypothesis> Decoder<T>::generate_from_label(
    int label, int n, const DecodeSchedule& schedule, Rng& rng) const {
  if (n < 1) throw InputError("generate: n must be >= 1");
  ad::NoGradGuard ng;
  transformer::ImageContext<T> ctx = model_.label_context({label});
  Tensor<T> kp({1, hand::kNumRegressed, 3});
  auto head = model_.predict_shape_camera(ctx);
  const hand::ShapeParams shape = shape_from(head.beta, 0);
  const hand::CameraParams camera = camera_from(head.translation, 0);

  DecodeSchedule sched = schedule;
  sched.top_k = static_cast<int>(
      std::ceil(0.05 * model_.cfg.codebook_size));  // top-5% restriction
  std::vector<Hypothesis> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    DecodeResult dec = iterative_decode(kp, ctx, sched, rng);
    Hypothesis h = finalize(dec, shape, camera, /*clamp_pose=*/true);
    h.aiti_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    out.push_back(std::move(h));
  }
  std::stable_sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.confidence > b.confidence;
  });
  return out;
}

template class Decoder<float>;
template class Decoder<double>;

}  // namespace hmr::infer
