#include "hmr/data_synth.hpp"

#include <algorithm>
#include <cmath>

namespace hmr::data {

namespace {

constexpr double kPi = 3.14159265358979323846;

Rng sample_rng(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ull * (index + 1));
  x ^= fnv1a64("sample");
  return Rng(x);
}

}  // namespace

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json j;
  j["count"] = count;
  j["seed"] = seed;
  j["with_images"] = with_images;
  j["image_size"] = image_size;
  j["focal_px"] = focal_px;
  j["beta_range"] = beta_range;
  j["num_labels"] = num_labels;
  j["template_vertex_budget"] = template_config.vertex_budget;
  j["template_seed"] = template_config.seed;
  return j;
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.count = j.at("count").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.with_images = j.at("with_images").get<bool>();
  c.image_size = j.at("image_size").get<int>();
  c.focal_px = j.at("focal_px").get<double>();
  c.beta_range = j.at("beta_range").get<double>();
  c.num_labels = j.at("num_labels").get<int>();
  c.template_config.vertex_budget = j.at("template_vertex_budget").get<int>();
  c.template_config.seed = j.at("template_seed").get<std::uint64_t>();
  return c;
}

std::uint64_t SynthConfig::hash() const {
  const std::string s = to_json().dump();
  return fnv1a64(s.data(), s.size());
}

hand::PoseParams sample_pose(Rng& rng) {
  Tensor<double> theta({hand::kThetaDim});
  // Global orientation: uniform over the radius-pi ball.
  double ax = rng.normal(), ay = rng.normal(), az = rng.normal();
  const double norm = std::sqrt(ax * ax + ay * ay + az * az) + 1e-12;
  const double angle = kPi * std::cbrt(rng.uniform());
  theta[0] = ax / norm * angle;
  theta[1] = ay / norm * angle;
  theta[2] = az / norm * angle;
  const hand::PoseLimits& lim = hand::joint_limits();
  for (int i = 3; i < hand::kThetaDim; ++i)
    theta[i] = rng.uniform(lim.lo[i], lim.hi[i]);
  return hand::PoseParams(std::move(theta));
}

Tensor<float> render_heatmap_image(
    const Tensor<double>& joints2d,
    const std::vector<std::pair<int, int>>& bones, int image_size) {
  const int s = image_size;
  Tensor<float> img({s, s, 3});
  if (joints2d.numel() == 0) return img;
  if (joints2d.cols() != 2) throw InputError("render: expected (N, 2) joints");
  const auto n = joints2d.rows();

  const auto px = [&](int y, int x, int c) -> float& {
    return img[(static_cast<std::int64_t>(y) * s + x) * 3 + c];
  };

  // Channel 0: Gaussian blobs, sigma 3 px, truncated at 4 sigma.
  const double sigma = 3.0;
  const int rad = static_cast<int>(4 * sigma);
  for (std::int64_t j = 0; j < n; ++j) {
    const double u = joints2d[j * 2 + 0], v = joints2d[j * 2 + 1];
    const int x0 = std::max(0, static_cast<int>(std::floor(u)) - rad);
    const int x1 = std::min(s - 1, static_cast<int>(std::ceil(u)) + rad);
    const int y0 = std::max(0, static_cast<int>(std::floor(v)) - rad);
    const int y1 = std::min(s - 1, static_cast<int>(std::ceil(v)) + rad);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double d2 = (x - u) * (x - u) + (y - v) * (y - v);
        px(y, x, 0) += static_cast<float>(std::exp(-d2 / (2.0 * sigma * sigma)));
      }
  }

  // Channels 1-2: bone segments; channel 2 carries a per-finger intensity
  // code (bone index / 4 selects the finger in the 21-keypoint layout).
  const double bsig = 1.5;
  const int brad = 5;
  for (std::size_t e = 0; e < bones.size(); ++e) {
    const auto [a, b] = bones[e];
    if (a >= n || b >= n) continue;
    const double aux = joints2d[a * 2], auy = joints2d[a * 2 + 1];
    const double bux = joints2d[b * 2], buy = joints2d[b * 2 + 1];
    const float code = static_cast<float>((e / 4) + 1) / 5.0f;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(aux, bux))) - brad);
    const int x1 = std::min(s - 1, static_cast<int>(std::ceil(std::max(aux, bux))) + brad);
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(auy, buy))) - brad);
    const int y1 = std::min(s - 1, static_cast<int>(std::ceil(std::max(auy, buy))) + brad);
    const double dx = bux - aux, dy = buy - auy;
    const double len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double t = len2 > 0.0 ? ((x - aux) * dx + (y - auy) * dy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double cx = aux + t * dx, cy = auy + t * dy;
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const float w = static_cast<float>(std::exp(-d2 / (2.0 * bsig * bsig)));
        px(y, x, 1) += w;
        px(y, x, 2) = std::max(px(y, x, 2), code * w);
      }
  }

  for (std::int64_t i = 0; i < img.numel(); ++i)
    img[i] = std::clamp(img[i], 0.0f, 1.0f);
  return img;
}

SyntheticSample Dataset::sample(int i) const {
  if (i < 0 || i >= size()) throw InputError("dataset: index out of range");
  SyntheticSample out;
  Tensor<double> th({hand::kThetaDim});
  std::copy(poses.data() + static_cast<std::int64_t>(i) * hand::kThetaDim,
            poses.data() + static_cast<std::int64_t>(i + 1) * hand::kThetaDim,
            th.data());
  out.pose = hand::PoseParams(std::move(th));
  Tensor<double> be({hand::kBetaDim});
  std::copy(betas.data() + static_cast<std::int64_t>(i) * hand::kBetaDim,
            betas.data() + static_cast<std::int64_t>(i + 1) * hand::kBetaDim,
            be.data());
  out.shape = hand::ShapeParams(std::move(be));
  Tensor<double> tr({3});
  std::copy(cam_trans.data() + static_cast<std::int64_t>(i) * 3,
            cam_trans.data() + static_cast<std::int64_t>(i + 1) * 3, tr.data());
  const double half = config.image_size / 2.0;
  out.camera = hand::CameraParams(std::move(tr), config.focal_px, half, half);
  out.joints3d = Tensor<double>({hand::kNumRegressed, 3});
  std::copy(joints3d.data() + static_cast<std::int64_t>(i) * 21 * 3,
            joints3d.data() + static_cast<std::int64_t>(i + 1) * 21 * 3,
            out.joints3d.data());
  out.joints2d = Tensor<double>({hand::kNumRegressed, 2});
  std::copy(joints2d.data() + static_cast<std::int64_t>(i) * 21 * 2,
            joints2d.data() + static_cast<std::int64_t>(i + 1) * 21 * 2,
            out.joints2d.data());
  if (has_images()) {
    const int s = config.image_size;
    out.image = Tensor<float>({s, s, 3});
    std::copy(images.data() + static_cast<std::int64_t>(i) * s * s * 3,
              images.data() + static_cast<std::int64_t>(i + 1) * s * s * 3,
              out.image.data());
  }
  out.label = labels.empty() ? -1 : labels[static_cast<std::size_t>(i)];
  return out;
}

Dataset generate_dataset(const SynthConfig& config) {
  if (config.count < 1) throw ConfigError("dataset: count must be >= 1");
  const hand::HandTemplate<double> tpl =
      hand::build_synthetic_template(config.template_config);
  const int n = config.count;
  const int s = config.image_size;

  Dataset ds;
  ds.config = config;
  ds.poses = Tensor<double>({n, hand::kThetaDim});
  ds.betas = Tensor<double>({n, hand::kBetaDim});
  ds.cam_trans = Tensor<double>({n, 3});
  ds.joints3d = Tensor<double>({n, hand::kNumRegressed, 3});
  ds.joints2d = Tensor<double>({n, hand::kNumRegressed, 2});
  if (config.with_images) ds.images = Tensor<float>({n, s, s, 3});
  if (config.num_labels > 0) ds.labels.assign(static_cast<std::size_t>(n), 0);

  // Label anchors: one reference pose per label, derived from the seed only.
  std::vector<hand::PoseParams> anchors;
  for (int l = 0; l < config.num_labels; ++l) {
    Rng ar = sample_rng(config.seed ^ fnv1a64("anchor"), static_cast<std::uint64_t>(l));
    anchors.push_back(sample_pose(ar));
  }
  const hand::PoseLimits& lim = hand::joint_limits();

  for (int i = 0; i < n; ++i) {
    Rng rng = sample_rng(config.seed, static_cast<std::uint64_t>(i));
    hand::PoseParams pose;
    int label = -1;
    if (config.num_labels > 0) {
      label = i % config.num_labels;
      Tensor<double> th = anchors[static_cast<std::size_t>(label)].theta;
      for (int c = 0; c < 3; ++c) th[c] += 0.08 * rng.normal();
      for (int c = 3; c < hand::kThetaDim; ++c) {
        const double width = lim.hi[c] - lim.lo[c];
        th[c] = std::clamp(th[c] + 0.06 * width * rng.normal(), lim.lo[c],
                           lim.hi[c]);
      }
      pose = hand::clamp_to_limits(hand::PoseParams(std::move(th)));
    } else {
      pose = sample_pose(rng);
    }

    Tensor<double> beta({hand::kBetaDim});
    for (int c = 0; c < hand::kBetaDim; ++c)
      beta[c] = rng.uniform(-config.beta_range, config.beta_range);
    hand::ShapeParams shape(std::move(beta));

    const hand::HandMesh mesh = hand::forward_kinematics(pose, shape, tpl);
    double cx = 0.0, cy = 0.0, cz = 0.0;
    for (int j = 0; j < hand::kNumRegressed; ++j) {
      cx += mesh.joints[j * 3 + 0];
      cy += mesh.joints[j * 3 + 1];
      cz += mesh.joints[j * 3 + 2];
    }
    cx /= hand::kNumRegressed;
    cy /= hand::kNumRegressed;
    cz /= hand::kNumRegressed;
    Tensor<double> trans({3});
    trans[0] = -cx + rng.uniform(-0.02, 0.02);
    trans[1] = -cy + rng.uniform(-0.02, 0.02);
    trans[2] = -cz + rng.uniform(0.9, 1.5);
    const double half = s / 2.0;
    hand::CameraParams cam(std::move(trans), config.focal_px, half, half);

    const Tensor<double> j2d = hand::project(mesh.joints, cam);

    std::copy(pose.theta.data(), pose.theta.data() + hand::kThetaDim,
              ds.poses.data() + static_cast<std::int64_t>(i) * hand::kThetaDim);
    std::copy(shape.beta.data(), shape.beta.data() + hand::kBetaDim,
              ds.betas.data() + static_cast<std::int64_t>(i) * hand::kBetaDim);
    std::copy(cam.translation.data(), cam.translation.data() + 3,
              ds.cam_trans.data() + static_cast<std::int64_t>(i) * 3);
    std::copy(mesh.joints.data(), mesh.joints.data() + 21 * 3,
              ds.joints3d.data() + static_cast<std::int64_t>(i) * 21 * 3);
    std::copy(j2d.data(), j2d.data() + 21 * 2,
              ds.joints2d.data() + static_cast<std::int64_t>(i) * 21 * 2);
    if (config.with_images) {
      const Tensor<float> img =
          render_heatmap_image(j2d, hand::skeleton_edges21(), s);
      std::copy(img.data(), img.data() + img.numel(),
                ds.images.data() + static_cast<std::int64_t>(i) * s * s * 3);
    }
    if (config.num_labels > 0) ds.labels[static_cast<std::size_t>(i)] = label;
  }
  return ds;
}

Dataset make_dataset(const SynthConfig& config, const std::string& out_dir) {
  Dataset ds = generate_dataset(config);
  io::ArrayStore store;
  store.put_tensor("poses", ds.poses);
  store.put_tensor("betas", ds.betas);
  store.put_tensor("cam_trans", ds.cam_trans);
  store.put_tensor("joints3d", ds.joints3d);
  store.put_tensor("joints2d", ds.joints2d);
  if (ds.has_images()) {
    io::Array img;
    img.dtype = io::DType::f32;
    img.shape = ds.images.shape();
    img.bytes.resize(sizeof(float) * static_cast<std::size_t>(ds.images.numel()));
    std::memcpy(img.bytes.data(), ds.images.data(), img.bytes.size());
    store.put("images", std::move(img));
  }
  if (!ds.labels.empty()) store.put("labels", io::Array::from_ints(ds.labels));
  store.metadata()["kind"] = "synthetic-hand-dataset";
  store.metadata()["config"] = config.to_json();
  store.metadata()["config_hash"] = to_hex(config.hash());
  store.metadata()["count"] = config.count;
  store.metadata()["seed"] = config.seed;
  store.save_dir(out_dir);
  return ds;
}

Dataset load_dataset(const std::string& dir) {
  io::ArrayStore store = io::ArrayStore::load_dir(dir, /*verify=*/true);
  Dataset ds;
  ds.config = SynthConfig::from_json(store.metadata().at("config"));
  if (ds.config.count < 1) throw IntegrityError("dataset: bad count");
  if (store.metadata().at("config_hash").get<std::string>() !=
      to_hex(ds.config.hash()))
    throw IntegrityError("dataset: config hash mismatch");
  ds.poses = store.get("poses").to_tensor<double>();
  ds.betas = store.get("betas").to_tensor<double>();
  ds.cam_trans = store.get("cam_trans").to_tensor<double>();
  ds.joints3d = store.get("joints3d").to_tensor<double>();
  ds.joints2d = store.get("joints2d").to_tensor<double>();
  if (store.has("images")) {
    const io::Array& img = store.get("images");
    if (img.dtype != io::DType::f32)
      throw IntegrityError("dataset: images must be f32");
    ds.images = ad::Tensor<float>(img.shape);
    std::memcpy(ds.images.data(), img.bytes.data(), img.bytes.size());
  }
  if (store.has("labels")) ds.labels = store.get("labels").to_ints();
  if (ds.poses.dim(0) != ds.config.count)
    throw IntegrityError("dataset: sample count mismatch");
  return ds;
}

void apply_keypoint_noise(Tensor<double>& kp, Rng& rng, double sigma_px,
                          double dropout_prob) {
  if (kp.cols() != 3) throw InputError("keypoint noise: expected (N, 3)");
  const auto n = kp.rows();
  for (std::int64_t i = 0; i < n; ++i) {
    if (rng.uniform() < dropout_prob) {
      kp[i * 3 + 0] = 0.0;
      kp[i * 3 + 1] = 0.0;
      kp[i * 3 + 2] = 0.0;
      continue;
    }
    kp[i * 3 + 0] += sigma_px * rng.normal();
    kp[i * 3 + 1] += sigma_px * rng.normal();
  }
}

Tensor<double> keypoints_with_confidence(const Tensor<double>& joints2d) {
  const auto n = joints2d.rows();
  Tensor<double> kp({static_cast<int>(n), 3});
  for (std::int64_t i = 0; i < n; ++i) {
    kp[i * 3 + 0] = joints2d[i * 2 + 0];
    kp[i * 3 + 1] = joints2d[i * 2 + 1];
    kp[i * 3 + 2] = 1.0;
  }
  return kp;
}

}  // namespace hmr::data
