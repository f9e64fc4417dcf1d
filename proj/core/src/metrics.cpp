#include "hmr/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <limits>

namespace hmr::metrics {

namespace {

Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>
points(const Tensor<double>& t) {
  if (t.cols() != 3) throw InputError("metrics: expected (N, 3) points");
  return {t.data(), t.rows(), 3};
}

}  // namespace

ProcrustesResult procrustes(const Tensor<double>& pred,
                            const Tensor<double>& gt) {
  auto p = points(pred);
  auto g = points(gt);
  const auto n = p.rows();
  if (n != g.rows() || n < 3)
    throw InputError("procrustes: need matching point sets with N >= 3");

  const Eigen::RowVector3d mu_p = p.colwise().mean();
  const Eigen::RowVector3d mu_g = g.colwise().mean();
  const Eigen::MatrixXd pc = p.rowwise() - mu_p;
  const Eigen::MatrixXd gc = g.rowwise() - mu_g;

  const double var_p = pc.squaredNorm() / static_cast<double>(n);
  if (var_p < 1e-18)
    throw Error("procrustes: degenerate prediction (zero spread)");

  // Cross covariance of gt with pred; R = U S V^T from its SVD.
  const Eigen::Matrix3d cov =
      (gc.transpose() * pc) / static_cast<double>(n);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d d = svd.singularValues();
  if (d(0) < 1e-15 || d(1) < 1e-15)
    throw Error("procrustes: rank-deficient configuration");
  Eigen::Vector3d s_fix = Eigen::Vector3d::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0)
    s_fix(2) = -1.0;
  const Eigen::Matrix3d rot =
      svd.matrixU() * s_fix.asDiagonal() * svd.matrixV().transpose();
  const double scale = (d.array() * s_fix.array()).sum() / var_p;
  const Eigen::Vector3d trans =
      mu_g.transpose() - scale * rot * mu_p.transpose();

  ProcrustesResult out;
  out.aligned = Tensor<double>({static_cast<int>(n), 3});
  auto am = out.aligned.mat(n, 3);
  am = (scale * (rot * p.transpose())).transpose();
  am.rowwise() += trans.transpose();
  out.rotation = Tensor<double>({3, 3});
  Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(out.rotation.data()) =
      rot;
  out.scale = scale;
  out.translation = Tensor<double>({3});
  for (int i = 0; i < 3; ++i) out.translation[i] = trans(i);
  return out;
}

Tensor<double> procrustes_align(const Tensor<double>& pred,
                                const Tensor<double>& gt) {
  return procrustes(pred, gt).aligned;
}

double mean_point_error_mm(const Tensor<double>& a, const Tensor<double>& b) {
  auto pa = points(a);
  auto pb = points(b);
  if (pa.rows() != pb.rows()) throw InputError("point sets differ in size");
  return (pa - pb).rowwise().norm().mean() * 1000.0;
}

double pa_mpjpe(const Tensor<double>& pred, const Tensor<double>& gt) {
  return mean_point_error_mm(procrustes_align(pred, gt), gt);
}

double pa_mpvpe(const Tensor<double>& pred, const Tensor<double>& gt) {
  return mean_point_error_mm(procrustes_align(pred, gt), gt);
}

double mpjpe(const Tensor<double>& pred, const Tensor<double>& gt) {
  return mean_point_error_mm(pred, gt);
}

double mpvpe(const Tensor<double>& pred, const Tensor<double>& gt) {
  return mean_point_error_mm(pred, gt);
}

namespace {

/// For each row of a, the squared distance to the nearest row of b.
std::vector<double> nn_sq(const Tensor<double>& a, const Tensor<double>& b) {
  auto pa = points(a);
  auto pb = points(b);
  std::vector<double> out(static_cast<std::size_t>(pa.rows()));
  for (Eigen::Index i = 0; i < pa.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < pb.rows(); ++j)
      best = std::min(best, (pa.row(i) - pb.row(j)).squaredNorm());
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

}  // namespace

double f_score(const Tensor<double>& pred_vertices,
               const Tensor<double>& gt_vertices, double threshold_mm) {
  const Tensor<double> aligned = procrustes_align(pred_vertices, gt_vertices);
  const double thr2 = (threshold_mm / 1000.0) * (threshold_mm / 1000.0);
  const auto d_pg = nn_sq(aligned, gt_vertices);
  const auto d_gp = nn_sq(gt_vertices, aligned);
  const auto frac = [thr2](const std::vector<double>& d) {
    std::size_t hit = 0;
    for (const double v : d)
      if (v <= thr2) ++hit;
    return static_cast<double>(hit) / static_cast<double>(d.size());
  };
  const double precision = frac(d_pg);
  const double recall = frac(d_gp);
  if (precision + recall <= 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double auc(const std::vector<double>& errors_mm, double max_threshold_mm,
           int steps) {
  if (errors_mm.empty()) throw InputError("auc: empty error list");
  if (steps < 1 || max_threshold_mm <= 0.0) throw InputError("auc: bad range");
  const auto pck_at = [&](double thr) {
    std::size_t hit = 0;
    for (const double e : errors_mm)
      if (e <= thr) ++hit;
    return static_cast<double>(hit) / static_cast<double>(errors_mm.size());
  };
  double area = 0.0;
  double prev = pck_at(0.0);
  for (int i = 1; i <= steps; ++i) {
    const double cur = pck_at(max_threshold_mm * i / steps);
    area += 0.5 * (prev + cur);
    prev = cur;
  }
  return area / steps;
}

double pck(const Tensor<double>& pred2d, const Tensor<double>& gt2d,
           double bbox_size_px, double threshold_fraction) {
  if (pred2d.cols() != 2 || gt2d.cols() != 2 || pred2d.rows() != gt2d.rows())
    throw InputError("pck: expected matching (N, 2) sets");
  const double thr = threshold_fraction * bbox_size_px;
  std::size_t hit = 0;
  const auto n = pred2d.rows();
  for (std::int64_t i = 0; i < n; ++i) {
    const double dx = pred2d[i * 2] - gt2d[i * 2];
    const double dy = pred2d[i * 2 + 1] - gt2d[i * 2 + 1];
    if (std::sqrt(dx * dx + dy * dy) <= thr) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(n);
}

ChamferResult chamfer_components(const Tensor<double>& a,
                                 const Tensor<double>& b) {
  if (a.rows() == 0 || b.rows() == 0) throw InputError("chamfer: empty set");
  const auto d_ab = nn_sq(a, b);
  const auto d_ba = nn_sq(b, a);
  ChamferResult r;
  for (const double v : d_ab) r.forward += v;
  for (const double v : d_ba) r.backward += v;
  r.forward /= static_cast<double>(d_ab.size());
  r.backward /= static_cast<double>(d_ba.size());
  return r;
}

double chamfer(const Tensor<double>& a, const Tensor<double>& b) {
  return chamfer_components(a, b).symmetric();
}

double chamfer_mm2(const Tensor<double>& a, const Tensor<double>& b) {
  return chamfer(a, b) * 1e6;
}

double hausdorff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.rows() == 0 || b.rows() == 0) throw InputError("hausdorff: empty set");
  const auto d_ab = nn_sq(a, b);
  const auto d_ba = nn_sq(b, a);
  double m = 0.0;
  for (const double v : d_ab) m = std::max(m, v);
  for (const double v : d_ba) m = std::max(m, v);
  return std::sqrt(m);
}

double apd_mm(const std::vector<Tensor<double>>& vertex_sets) {
  const std::size_t n = vertex_sets.size();
  if (n < 2) throw InputError("apd: need at least two meshes");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      total += mean_point_error_mm(vertex_sets[i], vertex_sets[j]);
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["mpjpe_mm"] = mpjpe;
  j["pa_mpjpe_mm"] = pa_mpjpe;
  j["mpvpe_mm"] = mpvpe;
  j["pa_mpvpe_mm"] = pa_mpvpe;
  j["f5"] = f5;
  j["f15"] = f15;
  j["auc_j"] = auc_j;
  j["auc_v"] = auc_v;
  j["pck"] = pck;
  j["aiti_seconds"] = aiti_seconds;
  return j;
}

}  // namespace hmr::metrics
