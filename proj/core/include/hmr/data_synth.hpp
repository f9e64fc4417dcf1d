#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hmr/array_store.hpp"
#include "hmr/hand_model.hpp"

namespace hmr::data {

using ad::Tensor;

struct SynthConfig {
  int count = 256;
  std::uint64_t seed = 1;
  bool with_images = true;
  int image_size = 224;
  double focal_px = 1000.0;
  double beta_range = 1.5;
  int num_labels = 0;  // > 0 enables label-anchored pose clusters
  hand::TemplateConfig template_config;

  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
};

struct SyntheticSample {
  hand::PoseParams pose;
  hand::ShapeParams shape;
  hand::CameraParams camera;
  Tensor<double> joints3d;  // (21, 3)
  Tensor<double> joints2d;  // (21, 2)
  Tensor<float> image;      // (S, S, 3) or empty
  int label = -1;
};

/// Pose draw inside the anatomical limit boxes; the global orientation is
/// uniform over the radius-pi ball.
hand::PoseParams sample_pose(Rng& rng);

/// Anti-aliased 2D skeleton proxy image: Gaussian joint blobs on channel 0,
/// bone segments on channel 1, per-finger identity coding on channel 2.
/// Empty keypoints produce an all-zero image.
Tensor<float> render_heatmap_image(
    const Tensor<double>& joints2d,
    const std::vector<std::pair<int, int>>& bones, int image_size);

/// In-memory dataset; fields mirror the on-disk container.
class Dataset {
 public:
  SynthConfig config;
  Tensor<double> poses;      // (N, 48)
  Tensor<double> betas;      // (N, 10)
  Tensor<double> cam_trans;  // (N, 3)
  Tensor<double> joints3d;   // (N, 21, 3)
  Tensor<double> joints2d;   // (N, 21, 2)
  Tensor<float> images;      // (N, S, S, 3) or empty
  std::vector<int> labels;   // empty when unlabeled

  int size() const { return poses.dim(0); }
  bool has_images() const { return !images.empty(); }
  SyntheticSample sample(int i) const;
};

/// Generates `config.count` samples and writes the container to `out_dir`.
/// Content is a pure function of the config (bit-identical on re-run).
Dataset make_dataset(const SynthConfig& config, const std::string& out_dir);

/// Generation without persistence (used by tests).
Dataset generate_dataset(const SynthConfig& config);

/// Loads and integrity-checks a dataset directory.
Dataset load_dataset(const std::string& dir);

/// Simulated keypoint-estimator error: Gaussian pixel noise plus dropout
/// (dropped keypoints get zero coordinates and zero confidence).
/// kp is (21, 3) as (u, v, confidence).
void apply_keypoint_noise(Tensor<double>& kp, Rng& rng, double sigma_px,
                          double dropout_prob);

/// (21, 2) joints + unit confidence -> (21, 3) keypoint rows.
Tensor<double> keypoints_with_confidence(const Tensor<double>& joints2d);

}  // namespace hmr::data
