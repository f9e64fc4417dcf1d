#include "hmr/hand_model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <fstream>

namespace hmr::hand {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct FingerSpec {
  double base[2];
  double dir[2];
  double len[3];
  double r0, r1;
};

// Order: thumb, index, middle, ring, pinky. Millimeter-scale hand geometry,
// fingers along +Y, thumb radial (+X), palm normal +Z.
const FingerSpec kFingers[kNumFingers] = {
    {{0.035, 0.025}, {0.80, 0.60}, {0.032, 0.025, 0.020}, 0.0090, 0.0060},
    {{0.027, 0.088}, {0.12, 0.99}, {0.030, 0.020, 0.014}, 0.0075, 0.0050},
    {{0.009, 0.090}, {0.02, 1.00}, {0.033, 0.022, 0.015}, 0.0078, 0.0052},
    {{-0.009, 0.089}, {-0.06, 1.00}, {0.030, 0.021, 0.014}, 0.0072, 0.0048},
    {{-0.027, 0.085}, {-0.16, 0.99}, {0.023, 0.016, 0.012}, 0.0062, 0.0042},
};

constexpr double kPalmLength = 0.085;
constexpr double kPalmHalfWidth0 = 0.030;
constexpr double kPalmHalfWidth1 = 0.044;
constexpr double kPalmThickness = 0.012;

Eigen::Vector3d finger_point(int f, double arc) {
  const FingerSpec& s = kFingers[f];
  Eigen::Vector2d dir(s.dir[0], s.dir[1]);
  dir.normalize();
  const Eigen::Vector2d p = Eigen::Vector2d(s.base[0], s.base[1]) + arc * dir;
  return {p.x(), p.y(), 0.0};
}

double point_segment_distance(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                              const Eigen::Vector3d& b) {
  const Eigen::Vector3d ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return (p - a).norm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace

PoseParams::PoseParams(Tensor<double> t) {
  if (t.numel() != kThetaDim)
    throw InputError("PoseParams: expected 48 components");
  if (!t.all_finite()) throw InputError("PoseParams: non-finite component");
  // Wrap each axis-angle norm into [0, pi] (flip axis where needed).
  for (int j = 0; j < kNumJoints; ++j) {
    double* w = t.data() + 3 * j;
    const double n = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
    if (n <= kPi || n == 0.0) continue;
    double m = std::fmod(n, 2.0 * kPi);
    if (m > kPi) m -= 2.0 * kPi;
    const double scale = m / n;
    w[0] *= scale;
    w[1] *= scale;
    w[2] *= scale;
  }
  theta = std::move(t);
  theta.reshape_inplace({kThetaDim});
}

ShapeParams::ShapeParams(Tensor<double> b) {
  if (b.numel() != kBetaDim) throw InputError("ShapeParams: expected 10 components");
  if (!b.all_finite()) throw InputError("ShapeParams: non-finite component");
  for (std::int64_t i = 0; i < b.numel(); ++i)
    b[i] = std::clamp(b[i], -5.0, 5.0);
  beta = std::move(b);
  beta.reshape_inplace({kBetaDim});
}

CameraParams::CameraParams(Tensor<double> t, double focal_px, double cx_px,
                           double cy_px)
    : translation(std::move(t)), focal(focal_px), cx(cx_px), cy(cy_px) {
  if (translation.numel() != 3)
    throw InputError("CameraParams: expected 3 translation components");
  if (!translation.all_finite() || !std::isfinite(focal))
    throw InputError("CameraParams: non-finite parameter");
  if (translation[2] <= 0.0)
    throw InputError("CameraParams: translation_z must be positive");
  if (focal <= 0.0) throw InputError("CameraParams: focal must be positive");
  translation.reshape_inplace({3});
}

template <typename T>
void HandTemplate<T>::validate() const {
  const int vv = vertex_count();
  if (vv < 1 || rest_vertices.cols() != 3)
    throw IntegrityError("template: bad rest_vertices");
  if (!rest_vertices.all_finite() || !skin_weights.all_finite() ||
      !rest_joints.all_finite() || !joint_regressor.all_finite() ||
      !shape_basis.all_finite())
    throw IntegrityError("template: non-finite array");
  if (skin_weights.dim(0) != vv || skin_weights.dim(1) != kNumJoints)
    throw IntegrityError("template: bad skin_weights shape");
  if (rest_joints.dim(0) != kNumJoints || rest_joints.dim(1) != 3)
    throw IntegrityError("template: bad rest_joints shape");
  if (joint_regressor.dim(0) != kNumRegressed || joint_regressor.dim(1) != vv)
    throw IntegrityError("template: bad joint_regressor shape");
  if (static_cast<int>(parent.size()) != kNumJoints || parent[0] != -1)
    throw IntegrityError("template: bad parent array");
  for (int j = 1; j < kNumJoints; ++j)
    if (parent[static_cast<std::size_t>(j)] < 0 ||
        parent[static_cast<std::size_t>(j)] >= j)
      throw IntegrityError("template: parent array is not a tree rooted at 0");
  for (int v = 0; v < vv; ++v) {
    T sum = T(0);
    for (int j = 0; j < kNumJoints; ++j) {
      const T w = skin_weights[static_cast<std::int64_t>(v) * kNumJoints + j];
      if (w < T(-1e-9)) throw IntegrityError("template: negative skin weight");
      sum += w;
    }
    if (std::abs(static_cast<double>(sum) - 1.0) > 1e-6)
      throw IntegrityError("template: skin weight row does not sum to 1");
  }
  for (int r = 0; r < kNumRegressed; ++r) {
    T sum = T(0);
    for (int v = 0; v < vv; ++v)
      sum += joint_regressor[static_cast<std::int64_t>(r) * vv + v];
    if (std::abs(static_cast<double>(sum) - 1.0) > 1e-6)
      throw IntegrityError("template: regressor row does not sum to 1");
  }
  for (const int f : faces)
    if (f < 0 || f >= vv) throw IntegrityError("template: face index out of range");
}

template void HandTemplate<double>::validate() const;
template void HandTemplate<float>::validate() const;

HandTemplate<double> build_synthetic_template(const TemplateConfig& config) {
  if (config.vertex_budget < 64)
    throw ConfigError("build_synthetic_template: vertex budget must be >= 64");

  const int palm_circ = config.vertex_budget >= 200 ? 14 : 8;
  const int fing_circ = config.vertex_budget >= 200 ? 6 : 4;
  int fing_rings = std::max(
      2, static_cast<int>(std::floor(0.78 * config.vertex_budget /
                                         (kNumFingers * fing_circ) +
                                     0.5)));
  if (config.vertex_budget - kNumFingers * fing_rings * fing_circ <
      2 * palm_circ)
    fing_rings = (config.vertex_budget - 2 * palm_circ) /
                 (kNumFingers * fing_circ);
  const int palm_rings =
      (config.vertex_budget - kNumFingers * fing_rings * fing_circ) / palm_circ;
  const int vv =
      palm_rings * palm_circ + kNumFingers * fing_rings * fing_circ;

  HandTemplate<double> tpl;
  tpl.rest_vertices = Tensor<double>({vv, 3});
  tpl.rest_joints = Tensor<double>({kNumJoints, 3});
  tpl.parent.assign(kNumJoints, -1);

  // Skeleton: wrist = joint 0 at the origin; per finger MCP/PIP/DIP.
  for (int f = 0; f < kNumFingers; ++f) {
    double arc = 0.0;
    for (int k = 0; k < 3; ++k) {
      const int j = 1 + 3 * f + k;
      const Eigen::Vector3d p = finger_point(f, arc);
      tpl.rest_joints[j * 3 + 0] = p.x();
      tpl.rest_joints[j * 3 + 1] = p.y();
      tpl.rest_joints[j * 3 + 2] = p.z();
      tpl.parent[static_cast<std::size_t>(j)] = (k == 0) ? 0 : j - 1;
      arc += kFingers[f].len[k];
    }
  }

  // Vertices: palm tube rings, then per-finger tube rings (last ring at the
  // fingertip).
  int vi = 0;
  const auto put = [&](const Eigen::Vector3d& p) {
    tpl.rest_vertices[vi * 3 + 0] = p.x();
    tpl.rest_vertices[vi * 3 + 1] = p.y();
    tpl.rest_vertices[vi * 3 + 2] = p.z();
    ++vi;
  };
  for (int r = 0; r < palm_rings; ++r) {
    const double s = palm_rings > 1 ? double(r) / (palm_rings - 1) : 0.0;
    const double y = s * kPalmLength;
    const double a = kPalmHalfWidth0 + s * (kPalmHalfWidth1 - kPalmHalfWidth0);
    for (int i = 0; i < palm_circ; ++i) {
      const double phi = 2.0 * kPi * i / palm_circ;
      put({a * std::cos(phi), y, kPalmThickness * std::sin(phi)});
    }
  }
  const int finger_v0[kNumFingers + 1] = {
      palm_rings * palm_circ,
      palm_rings * palm_circ + 1 * fing_rings * fing_circ,
      palm_rings * palm_circ + 2 * fing_rings * fing_circ,
      palm_rings * palm_circ + 3 * fing_rings * fing_circ,
      palm_rings * palm_circ + 4 * fing_rings * fing_circ};
  for (int f = 0; f < kNumFingers; ++f) {
    const FingerSpec& s = kFingers[f];
    const double total = s.len[0] + s.len[1] + s.len[2];
    Eigen::Vector2d d2(s.dir[0], s.dir[1]);
    d2.normalize();
    const Eigen::Vector3d n1(d2.y(), -d2.x(), 0.0);
    const Eigen::Vector3d n2(0.0, 0.0, 1.0);
    for (int r = 0; r < fing_rings; ++r) {
      const double t = fing_rings > 1 ? double(r) / (fing_rings - 1) : 0.0;
      const double radius = (r == fing_rings - 1)
                                ? 0.003
                                : s.r0 + t * (s.r1 - s.r0);
      const Eigen::Vector3d c = finger_point(f, t * total);
      for (int i = 0; i < fing_circ; ++i) {
        const double phi = 2.0 * kPi * i / fing_circ;
        put(c + radius * (std::cos(phi) * n1 + std::sin(phi) * n2));
      }
    }
  }

  // Faces: tube quads split into triangles plus end caps.
  const auto tube_faces = [&](int v0, int rings, int circ, bool cap_start,
                              bool cap_end) {
    for (int r = 0; r + 1 < rings; ++r)
      for (int i = 0; i < circ; ++i) {
        const int a = v0 + r * circ + i;
        const int b = v0 + r * circ + (i + 1) % circ;
        const int c = a + circ;
        const int d = b + circ;
        tpl.faces.insert(tpl.faces.end(), {a, b, d});
        tpl.faces.insert(tpl.faces.end(), {a, d, c});
      }
    if (cap_start)
      for (int i = 1; i + 1 < circ; ++i)
        tpl.faces.insert(tpl.faces.end(), {v0, v0 + i + 1, v0 + i});
    if (cap_end) {
      const int last = v0 + (rings - 1) * circ;
      for (int i = 1; i + 1 < circ; ++i)
        tpl.faces.insert(tpl.faces.end(), {last, last + i, last + i + 1});
    }
  };
  tube_faces(0, palm_rings, palm_circ, true, true);
  for (int f = 0; f < kNumFingers; ++f)
    tube_faces(finger_v0[f], fing_rings, fing_circ, false, true);

  // Skinning bones: one segment per joint. The wrist bone spans the palm
  // axis; distal bones extend to the fingertip.
  Eigen::Vector3d bone_a[kNumJoints], bone_b[kNumJoints];
  bone_a[0] = {0.0, 0.0, 0.0};
  bone_b[0] = {0.0, 0.6 * kPalmLength, 0.0};
  for (int f = 0; f < kNumFingers; ++f) {
    const FingerSpec& s = kFingers[f];
    double arc = 0.0;
    for (int k = 0; k < 3; ++k) {
      const int j = 1 + 3 * f + k;
      bone_a[j] = finger_point(f, arc);
      arc += s.len[k];
      bone_b[j] = finger_point(f, arc);
    }
  }

  tpl.skin_weights = Tensor<double>({vv, kNumJoints});
  const double sigma = 0.008;
  for (int v = 0; v < vv; ++v) {
    const Eigen::Vector3d p(tpl.rest_vertices[v * 3 + 0],
                            tpl.rest_vertices[v * 3 + 1],
                            tpl.rest_vertices[v * 3 + 2]);
    std::array<std::pair<double, int>, kNumJoints> d;
    for (int j = 0; j < kNumJoints; ++j)
      d[static_cast<std::size_t>(j)] = {
          point_segment_distance(p, bone_a[j], bone_b[j]), j};
    std::sort(d.begin(), d.end());
    // Smooth falloff over the three nearest bones, normalized relative to
    // the closest to keep weights well conditioned.
    const double dmin = d[0].first;
    double wsum = 0.0;
    double w[3];
    for (int k = 0; k < 3; ++k) {
      const double rel = (d[static_cast<std::size_t>(k)].first - dmin) / sigma;
      w[k] = std::exp(-rel * rel);
      wsum += w[k];
    }
    for (int k = 0; k < 3; ++k)
      tpl.skin_weights[static_cast<std::int64_t>(v) * kNumJoints +
                       d[static_cast<std::size_t>(k)].second] = w[k] / wsum;
  }
  // Anchor ring: the first palm ring is rigidly bound to the wrist so the
  // wrist row of the regressor reproduces the posed root joint exactly.
  for (int i = 0; i < palm_circ; ++i) {
    for (int j = 0; j < kNumJoints; ++j)
      tpl.skin_weights[static_cast<std::int64_t>(i) * kNumJoints + j] = 0.0;
    tpl.skin_weights[static_cast<std::int64_t>(i) * kNumJoints + 0] = 1.0;
  }

  // Joint regressor.
  tpl.joint_regressor = Tensor<double>({kNumRegressed, vv});
  const auto regress_nearest = [&](int row, const Eigen::Vector3d& target) {
    std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(vv));
    for (int v = 0; v < vv; ++v) {
      const Eigen::Vector3d p(tpl.rest_vertices[v * 3 + 0],
                              tpl.rest_vertices[v * 3 + 1],
                              tpl.rest_vertices[v * 3 + 2]);
      dist[static_cast<std::size_t>(v)] = {(p - target).norm(), v};
    }
    std::partial_sort(dist.begin(), dist.begin() + 8, dist.end());
    double wsum = 0.0;
    for (int k = 0; k < 8; ++k) wsum += 1.0 / (dist[static_cast<std::size_t>(k)].first + 1e-6);
    for (int k = 0; k < 8; ++k)
      tpl.joint_regressor[static_cast<std::int64_t>(row) * vv +
                          dist[static_cast<std::size_t>(k)].second] =
          (1.0 / (dist[static_cast<std::size_t>(k)].first + 1e-6)) / wsum;
  };
  // Wrist: uniform over the anchor ring (its centroid is the wrist).
  for (int i = 0; i < palm_circ; ++i)
    tpl.joint_regressor[0 * vv + i] = 1.0 / palm_circ;
  for (int f = 0; f < kNumFingers; ++f) {
    for (int k = 0; k < 3; ++k) {
      const int j = 1 + 3 * f + k;
      const Eigen::Vector3d target(tpl.rest_joints[j * 3 + 0],
                                   tpl.rest_joints[j * 3 + 1],
                                   tpl.rest_joints[j * 3 + 2]);
      regress_nearest(1 + 4 * f + k, target);
    }
    // Fingertip: uniform over the finger's last ring (centred at the tip).
    const int tip_row = 4 + 4 * f;
    const int last_ring = finger_v0[f] + (fing_rings - 1) * fing_circ;
    for (int i = 0; i < fing_circ; ++i)
      tpl.joint_regressor[static_cast<std::int64_t>(tip_row) * vv + last_ring + i] =
          1.0 / fing_circ;
  }

  // Shape basis: smooth sinusoidal offset fields, mutually orthogonal, with
  // a common millimeter-scale magnitude.
  tpl.shape_basis = Tensor<double>({kBetaDim, vv * 3});
  Rng rng(config.seed ^ 0x5b7a3c11u);
  for (int k = 0; k < kBetaDim; ++k) {
    Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    const double omega = rng.uniform(10.0, 35.0);
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    for (int v = 0; v < vv; ++v) {
      const Eigen::Vector3d p(tpl.rest_vertices[v * 3 + 0],
                              tpl.rest_vertices[v * 3 + 1],
                              tpl.rest_vertices[v * 3 + 2]);
      const double f = std::sin(omega * axis.dot(p) + phase);
      for (int c = 0; c < 3; ++c)
        tpl.shape_basis[static_cast<std::int64_t>(k) * vv * 3 + v * 3 + c] =
            f * dir[c];
    }
    // The wrist anchor ring never deforms, so the wrist regressor row keeps
    // reproducing the posed root joint under any shape.
    for (int v = 0; v < palm_circ; ++v)
      for (int c = 0; c < 3; ++c)
        tpl.shape_basis[static_cast<std::int64_t>(k) * vv * 3 + v * 3 + c] = 0.0;
  }
  // Gram-Schmidt, then a uniform scale so |beta_i| = 1 moves vertices by a
  // few millimeters RMS.
  auto basis = tpl.shape_basis.mat(kBetaDim, static_cast<std::int64_t>(vv) * 3);
  for (int k = 0; k < kBetaDim; ++k) {
    for (int m = 0; m < k; ++m)
      basis.row(k) -= basis.row(k).dot(basis.row(m)) * basis.row(m);
    const double n = basis.row(k).norm();
    if (n < 1e-9)
      throw NumericError("build_synthetic_template: degenerate shape basis");
    basis.row(k) /= n;
  }
  basis *= 0.004 * std::sqrt(static_cast<double>(vv));

  tpl.validate();
  return tpl;
}

const PoseLimits& joint_limits() {
  static const PoseLimits limits = [] {
    PoseLimits lim;
    lim.lo = Tensor<double>({kThetaDim});
    lim.hi = Tensor<double>({kThetaDim});
    const auto set = [&](int j, double lx, double hx, double ly, double hy,
                         double lz, double hz) {
      lim.lo[3 * j + 0] = lx;
      lim.hi[3 * j + 0] = hx;
      lim.lo[3 * j + 1] = ly;
      lim.hi[3 * j + 1] = hy;
      lim.lo[3 * j + 2] = lz;
      lim.hi[3 * j + 2] = hz;
    };
    set(0, -kPi, kPi, -kPi, kPi, -kPi, kPi);
    for (int f = 0; f < kNumFingers; ++f) {
      const bool thumb = f == 0;
      const int j0 = 1 + 3 * f;
      if (thumb) {
        set(j0 + 0, -1.0, 0.5, -0.5, 0.5, -0.8, 0.8);
        set(j0 + 1, -1.3, 0.2, -0.2, 0.2, -0.3, 0.3);
        set(j0 + 2, -1.3, 0.2, -0.2, 0.2, -0.3, 0.3);
      } else {
        set(j0 + 0, -1.6, 0.3, -0.15, 0.15, -0.35, 0.35);
        set(j0 + 1, -1.8, 0.1, -0.05, 0.05, -0.05, 0.05);
        set(j0 + 2, -1.3, 0.1, -0.05, 0.05, -0.05, 0.05);
      }
    }
    return lim;
  }();
  return limits;
}

PoseParams clamp_to_limits(const PoseParams& pose) {
  const PoseLimits& lim = joint_limits();
  Tensor<double> t = pose.theta;
  for (int i = 3; i < kThetaDim; ++i)
    t[i] = std::clamp(t[i], lim.lo[i], lim.hi[i]);
  const double n =
      std::sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);
  if (n > kPi) {
    const double s = kPi / n;
    t[0] *= s;
    t[1] *= s;
    t[2] *= s;
  }
  return PoseParams(std::move(t));
}

bool within_limits(const PoseParams& pose, double tol) {
  const PoseLimits& lim = joint_limits();
  for (int i = 3; i < kThetaDim; ++i)
    if (pose.theta[i] < lim.lo[i] - tol || pose.theta[i] > lim.hi[i] + tol)
      return false;
  const double n = std::sqrt(pose.theta[0] * pose.theta[0] +
                             pose.theta[1] * pose.theta[1] +
                             pose.theta[2] * pose.theta[2]);
  return n <= kPi + tol;
}

HandMesh forward_kinematics(const PoseParams& pose, const ShapeParams& shape,
                            const HandTemplate<double>& tpl) {
  ad::NoGradGuard ng;
  Var<double> theta = Var<double>::constant(pose.theta.reshaped({1, kThetaDim}));
  Var<double> beta = Var<double>::constant(shape.beta.reshaped({1, kBetaDim}));
  FkResult<double> fk = fk_batched(theta, beta, tpl);
  HandMesh mesh;
  mesh.vertices = fk.vertices.value().reshaped({tpl.vertex_count(), 3});
  mesh.joints = fk.joints.value().reshaped({kNumRegressed, 3});
  if (!mesh.vertices.all_finite() || !mesh.joints.all_finite())
    throw NumericError("forward_kinematics: non-finite output");
  return mesh;
}

Tensor<double> project(const Tensor<double>& joints3d, const CameraParams& cam) {
  if (joints3d.cols() != 3) throw InputError("project: expected (N, 3)");
  const auto n = joints3d.rows();
  Tensor<double> out({static_cast<int>(n), 2});
  for (std::int64_t j = 0; j < n; ++j) {
    const double z = joints3d[j * 3 + 2] + cam.translation[2];
    if (z <= 0.0)
      throw ProjectionError("project: non-positive depth at joint " +
                            std::to_string(j));
    out[j * 2 + 0] =
        cam.focal * (joints3d[j * 3 + 0] + cam.translation[0]) / z + cam.cx;
    out[j * 2 + 1] =
        cam.focal * (joints3d[j * 3 + 1] + cam.translation[1]) / z + cam.cy;
  }
  return out;
}

void export_obj(const std::string& path, const Tensor<double>& vertices,
                const std::vector<int>& faces) {
  std::ofstream f(path);
  if (!f) throw InputError("export_obj: cannot open " + path);
  f.precision(9);
  const auto n = vertices.rows();
  for (std::int64_t v = 0; v < n; ++v)
    f << "v " << vertices[v * 3 + 0] << ' ' << vertices[v * 3 + 1] << ' '
      << vertices[v * 3 + 2] << '\n';
  for (std::size_t i = 0; i + 3 <= faces.size(); i += 3)
    f << "f " << faces[i] + 1 << ' ' << faces[i + 1] + 1 << ' '
      << faces[i + 2] + 1 << '\n';
}

const std::vector<std::pair<int, int>>& skeleton_edges21() {
  static const std::vector<std::pair<int, int>> edges = [] {
    std::vector<std::pair<int, int>> e;
    for (int f = 0; f < kNumFingers; ++f) {
      e.emplace_back(0, 1 + 4 * f);
      e.emplace_back(1 + 4 * f, 2 + 4 * f);
      e.emplace_back(2 + 4 * f, 3 + 4 * f);
      e.emplace_back(3 + 4 * f, 4 + 4 * f);
    }
    return e;
  }();
  return edges;
}

}  // namespace hmr::hand
