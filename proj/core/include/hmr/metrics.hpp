#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hmr/tensor.hpp"

namespace hmr::metrics {

using ad::Tensor;

struct ProcrustesResult {
  Tensor<double> aligned;   // (N, 3) = s R pred + t
  Tensor<double> rotation;  // (3, 3)
  double scale = 1.0;
  Tensor<double> translation;  // (3)
};

/// Closed-form similarity alignment of pred onto gt (SVD of the cross
/// covariance, reflection corrected). Throws Error on rank-deficient input.
ProcrustesResult procrustes(const Tensor<double>& pred, const Tensor<double>& gt);

/// Convenience: aligned points only.
Tensor<double> procrustes_align(const Tensor<double>& pred,
                                const Tensor<double>& gt);

/// Mean per-point Euclidean error in millimeters (inputs in meters).
double mean_point_error_mm(const Tensor<double>& a, const Tensor<double>& b);

double pa_mpjpe(const Tensor<double>& pred_joints, const Tensor<double>& gt_joints);
double pa_mpvpe(const Tensor<double>& pred_vertices, const Tensor<double>& gt_vertices);
double mpjpe(const Tensor<double>& pred_joints, const Tensor<double>& gt_joints);
double mpvpe(const Tensor<double>& pred_vertices, const Tensor<double>& gt_vertices);

/// Harmonic mean of precision and recall at `threshold_mm`, computed after
/// Procrustes alignment of pred onto gt.
double f_score(const Tensor<double>& pred_vertices,
               const Tensor<double>& gt_vertices, double threshold_mm);

/// Area under the PCK-vs-threshold curve over [0, max_threshold_mm],
/// trapezoidal, normalized to [0, 1].
double auc(const std::vector<double>& errors_mm, double max_threshold_mm = 50.0,
           int steps = 100);

/// Fraction of 2D keypoints within threshold_fraction * bbox_size_px.
double pck(const Tensor<double>& pred2d, const Tensor<double>& gt2d,
           double bbox_size_px, double threshold_fraction);

struct ChamferResult {
  double forward = 0.0;   // mean_a min_b |a-b|^2
  double backward = 0.0;  // mean_b min_a |b-a|^2
  double symmetric() const { return 0.5 * (forward + backward); }
};

/// Mean squared nearest-neighbour distance, both directions (squared meters).
ChamferResult chamfer_components(const Tensor<double>& a, const Tensor<double>& b);
double chamfer(const Tensor<double>& a, const Tensor<double>& b);
/// Same quantity scaled to squared millimeters.
double chamfer_mm2(const Tensor<double>& a, const Tensor<double>& b);

/// Symmetrized maximum nearest-neighbour distance (meters).
double hausdorff(const Tensor<double>& a, const Tensor<double>& b);

/// Average pairwise mean-vertex distance across meshes, in millimeters.
double apd_mm(const std::vector<Tensor<double>>& vertex_sets);

struct EvalReport {
  double mpjpe = 0.0, pa_mpjpe = 0.0, mpvpe = 0.0, pa_mpvpe = 0.0;  // mm
  double f5 = 0.0, f15 = 0.0;
  double auc_j = 0.0, auc_v = 0.0;
  std::map<std::string, double> pck;  // threshold label -> fraction
  double aiti_seconds = 0.0;

  nlohmann::json to_json() const;
};

}  // namespace hmr::metrics
