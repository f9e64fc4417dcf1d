#pragma once

#include <array>
#include <string>
#include <vector>

#include "hmr/autodiff.hpp"
#include "hmr/common.hpp"

namespace hmr::hand {

using ad::Tensor;
using ad::Var;

inline constexpr int kNumJoints = 16;       // wrist + 5 fingers x 3
inline constexpr int kNumRegressed = 21;    // wrist + 5 fingers x (3 joints + tip)
inline constexpr int kThetaDim = 48;        // 16 axis-angle rotations
inline constexpr int kBetaDim = 10;
inline constexpr int kNumFingers = 5;

// ---------------------------------------------------------------------------
// Parameter types.
// ---------------------------------------------------------------------------

/// 16 axis-angle rotations; element 0 is the global orientation. Construction
/// canonicalizes each rotation vector to a norm in [0, pi].
struct PoseParams {
  Tensor<double> theta;  // (48)

  PoseParams() : theta({kThetaDim}) {}
  explicit PoseParams(Tensor<double> t);

  static PoseParams zero() { return PoseParams(); }
  double operator[](int i) const { return theta[i]; }
};

/// 10 unitless blend coefficients, clamped to |beta_i| <= 5.
struct ShapeParams {
  Tensor<double> beta;  // (10)

  ShapeParams() : beta({kBetaDim}) {}
  explicit ShapeParams(Tensor<double> b);

  static ShapeParams zero() { return ShapeParams(); }
};

/// Identity-rotation pinhole camera: translation in meters, intrinsics fixed.
struct CameraParams {
  Tensor<double> translation;  // (3)
  double focal = 1000.0;       // pixels
  double cx = 112.0, cy = 112.0;

  CameraParams() : translation({3}) { translation[2] = 1.0; }
  CameraParams(Tensor<double> t, double focal_px, double cx_px, double cy_px);
};

// ---------------------------------------------------------------------------
// Template and mesh.
// ---------------------------------------------------------------------------

template <typename T>
struct HandTemplate {
  Tensor<T> rest_vertices;    // (V, 3), meters
  std::vector<int> faces;     // (F * 3), 0-based vertex indices
  Tensor<T> skin_weights;     // (V, 16), rows sum to 1
  Tensor<T> rest_joints;      // (16, 3)
  std::vector<int> parent;    // (16), parent[0] == -1
  Tensor<T> joint_regressor;  // (21, V), rows sum to 1
  Tensor<T> shape_basis;      // (10, V*3), mutually orthogonal offset fields

  int vertex_count() const { return rest_vertices.dim(0); }
  int face_count() const { return static_cast<int>(faces.size()) / 3; }

  void validate() const;

  template <typename U>
  HandTemplate<U> cast() const {
    HandTemplate<U> out;
    out.rest_vertices = rest_vertices.template cast<U>();
    out.faces = faces;
    out.skin_weights = skin_weights.template cast<U>();
    out.rest_joints = rest_joints.template cast<U>();
    out.parent = parent;
    out.joint_regressor = joint_regressor.template cast<U>();
    out.shape_basis = shape_basis.template cast<U>();
    return out;
  }
};

struct HandMesh {
  Tensor<double> vertices;  // (V, 3)
  Tensor<double> joints;    // (21, 3)
};

struct TemplateConfig {
  int vertex_budget = 384;  // minimum 64
  std::uint64_t seed = 77;
};

/// Procedural palm-and-finger template. Deterministic in the config.
HandTemplate<double> build_synthetic_template(const TemplateConfig& config);

/// Per-joint axis-angle component bounds; global orientation is the full
/// radius-pi ball and is handled separately by samplers.
struct PoseLimits {
  Tensor<double> lo;  // (48)
  Tensor<double> hi;  // (48)
};

const PoseLimits& joint_limits();

/// Clamps local joint rotations into the limit boxes and the global rotation
/// into the radius-pi ball.
PoseParams clamp_to_limits(const PoseParams& pose);

bool within_limits(const PoseParams& pose, double tol = 1e-9);

// ---------------------------------------------------------------------------
// Differentiable forward kinematics.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void rodrigues(const T* w, T* r9) {
  const T t = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  T s, c2;
  if (t < T(1e-8)) {
    s = T(1) - t / T(6) + t * t / T(120);
    c2 = T(0.5) - t / T(24) + t * t / T(720);
  } else {
    const T th = std::sqrt(t);
    s = std::sin(th) / th;
    c2 = (T(1) - std::cos(th)) / t;
  }
  const T x = w[0], y = w[1], z = w[2];
  // I + s*A + c2*A^2 with A = skew(w).
  r9[0] = T(1) + c2 * (-y * y - z * z);
  r9[1] = -s * z + c2 * x * y;
  r9[2] = s * y + c2 * x * z;
  r9[3] = s * z + c2 * x * y;
  r9[4] = T(1) + c2 * (-x * x - z * z);
  r9[5] = -s * x + c2 * y * z;
  r9[6] = -s * y + c2 * x * z;
  r9[7] = s * x + c2 * y * z;
  r9[8] = T(1) + c2 * (-x * x - y * y);
}

/// dL/dw given dL/dR; w is the axis-angle vector of this rotation.
template <typename T>
void rodrigues_backward(const T* w, const T* dr, T* dw) {
  const T t = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  T s, c2, ds, dc2;
  if (t < T(1e-8)) {
    s = T(1) - t / T(6) + t * t / T(120);
    c2 = T(0.5) - t / T(24) + t * t / T(720);
    ds = -T(1) / T(6) + t / T(60);
    dc2 = -T(1) / T(24) + t / T(360);
  } else {
    const T th = std::sqrt(t);
    const T sn = std::sin(th), cs = std::cos(th);
    s = sn / th;
    c2 = (T(1) - cs) / t;
    ds = (th * cs - sn) / (T(2) * th * t);
    dc2 = (th * sn - T(2) * (T(1) - cs)) / (T(2) * t * t);
  }
  const T a[9] = {T(0), -w[2], w[1], w[2], T(0), -w[0], -w[1], w[0], T(0)};
  T a2[9];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      T acc = T(0);
      for (int k = 0; k < 3; ++k) acc += a[i * 3 + k] * a[k * 3 + j];
      a2[i * 3 + j] = acc;
    }
  T dr_dot_a = T(0), dr_dot_a2 = T(0);
  for (int i = 0; i < 9; ++i) {
    dr_dot_a += dr[i] * a[i];
    dr_dot_a2 += dr[i] * a2[i];
  }
  for (int k = 0; k < 3; ++k) {
    T e[9] = {};
    // skew(e_k)
    if (k == 0) { e[5] = T(-1); e[7] = T(1); }
    if (k == 1) { e[2] = T(1); e[6] = T(-1); }
    if (k == 2) { e[1] = T(-1); e[3] = T(1); }
    T dr_dot_e = T(0), dr_dot_mix = T(0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        T ea = T(0), ae = T(0);
        for (int m = 0; m < 3; ++m) {
          ea += e[i * 3 + m] * a[m * 3 + j];
          ae += a[i * 3 + m] * e[m * 3 + j];
        }
        dr_dot_e += dr[i * 3 + j] * e[i * 3 + j];
        dr_dot_mix += dr[i * 3 + j] * (ea + ae);
      }
    dw[k] = T(2) * w[k] * (ds * dr_dot_a + dc2 * dr_dot_a2) + s * dr_dot_e +
            c2 * dr_dot_mix;
  }
}

}  // namespace detail

/// Per-bone vertex transforms G = world(theta) * inv(rest), packed (B,16,12)
/// as row-major [R | t] per joint. Differentiable with respect to theta.
template <typename T>
Var<T> fk_transforms(const Var<T>& theta, const HandTemplate<T>& tpl) {
  if (theta.value().cols() != kThetaDim)
    throw InputError("fk_transforms: theta must have 48 columns");
  if (!theta.value().all_finite())
    throw InputError("fk_transforms: non-finite pose parameters");
  const int bsz = static_cast<int>(theta.value().rows());
  Tensor<T> rest = tpl.rest_joints;
  std::vector<int> parent = tpl.parent;

  // World transforms per joint, then G_j = [W_R | W_t - W_R * rest_j].
  Tensor<T> world({bsz, kNumJoints, 12});
  Tensor<T> g({bsz, kNumJoints, 12});
  for (int b = 0; b < bsz; ++b) {
    const T* th = theta.value().data() + static_cast<std::int64_t>(b) * kThetaDim;
    T* wball = world.data() + static_cast<std::int64_t>(b) * kNumJoints * 12;
    T* gall = g.data() + static_cast<std::int64_t>(b) * kNumJoints * 12;
    for (int j = 0; j < kNumJoints; ++j) {
      T r[9];
      detail::rodrigues(th + 3 * j, r);
      T tl[3];
      const int p = parent[static_cast<std::size_t>(j)];
      for (int i = 0; i < 3; ++i)
        tl[i] = rest[j * 3 + i] - (p >= 0 ? rest[p * 3 + i] : T(0));
      T* wj = wball + j * 12;
      if (p < 0) {
        std::copy(r, r + 9, wj);
        std::copy(tl, tl + 3, wj + 9);
      } else {
        const T* wp = wball + p * 12;
        for (int i = 0; i < 3; ++i)
          for (int k = 0; k < 3; ++k)
            wj[i * 3 + k] = wp[i * 3 + 0] * r[0 * 3 + k] +
                            wp[i * 3 + 1] * r[1 * 3 + k] +
                            wp[i * 3 + 2] * r[2 * 3 + k];
        for (int i = 0; i < 3; ++i)
          wj[9 + i] = wp[i * 3 + 0] * tl[0] + wp[i * 3 + 1] * tl[1] +
                      wp[i * 3 + 2] * tl[2] + wp[9 + i];
      }
      T* gj = gall + j * 12;
      std::copy(wj, wj + 9, gj);
      for (int i = 0; i < 3; ++i)
        gj[9 + i] = wj[9 + i] - (wj[i * 3 + 0] * rest[j * 3 + 0] +
                                 wj[i * 3 + 1] * rest[j * 3 + 1] +
                                 wj[i * 3 + 2] * rest[j * 3 + 2]);
    }
  }

  return ad::make_op<T>(
      std::move(g), {theta},
      [world = std::move(world), rest, parent, bsz](ad::Node<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& gth = n.parents[0]->grad_buf();
        for (int b = 0; b < bsz; ++b) {
          const T* th =
              n.parents[0]->value.data() + static_cast<std::int64_t>(b) * kThetaDim;
          const T* wball =
              world.data() + static_cast<std::int64_t>(b) * kNumJoints * 12;
          const T* dgall =
              n.grad.data() + static_cast<std::int64_t>(b) * kNumJoints * 12;
          // dW accumulators per joint: [dR(9) | dt(3)].
          std::array<T, kNumJoints * 12> dw{};
          for (int j = 0; j < kNumJoints; ++j) {
            const T* dgj = dgall + j * 12;
            T* dwj = dw.data() + j * 12;
            // G_R = W_R; G_t = W_t - W_R * rest_j.
            for (int i = 0; i < 9; ++i) dwj[i] += dgj[i];
            for (int i = 0; i < 3; ++i) {
              dwj[9 + i] += dgj[9 + i];
              for (int k = 0; k < 3; ++k)
                dwj[i * 3 + k] -= dgj[9 + i] * rest[j * 3 + k];
            }
          }
          // Children have larger indices than parents; walk leaves first.
          for (int j = kNumJoints - 1; j >= 0; --j) {
            const int p = parent[static_cast<std::size_t>(j)];
            T tl[3];
            for (int i = 0; i < 3; ++i)
              tl[i] = rest[j * 3 + i] - (p >= 0 ? rest[p * 3 + i] : T(0));
            T r[9];
            detail::rodrigues(th + 3 * j, r);
            const T* dwj = dw.data() + j * 12;
            T dr[9];
            if (p < 0) {
              std::copy(dwj, dwj + 9, dr);
            } else {
              const T* wp = wball + p * 12;
              T* dwp = dw.data() + p * 12;
              // W_R(j) = W_R(p) R_j ; W_t(j) = W_R(p) tl + W_t(p).
              for (int i = 0; i < 3; ++i)
                for (int k = 0; k < 3; ++k) {
                  T acc = T(0);
                  for (int m = 0; m < 3; ++m)
                    acc += dwj[i * 3 + m] * r[k * 3 + m];
                  dwp[i * 3 + k] += acc + dwj[9 + i] * tl[k];
                }
              for (int i = 0; i < 3; ++i) dwp[9 + i] += dwj[9 + i];
              for (int i = 0; i < 3; ++i)
                for (int k = 0; k < 3; ++k) {
                  T acc = T(0);
                  for (int m = 0; m < 3; ++m)
                    acc += wp[m * 3 + i] * dwj[m * 3 + k];
                  dr[i * 3 + k] = acc;
                }
            }
            T dth[3];
            detail::rodrigues_backward(th + 3 * j, dr, dth);
            for (int i = 0; i < 3; ++i)
              gth[static_cast<std::int64_t>(b) * kThetaDim + 3 * j + i] += dth[i];
          }
        }
      });
}

/// v' = R_v v + t_v per vertex; blended (B,V,12), verts (B,V,3).
template <typename T>
Var<T> apply_blended(const Var<T>& blended, const Var<T>& verts) {
  const int bsz = blended.value().dim(0), vv = blended.value().dim(1);
  if (verts.value().dim(0) != bsz || verts.value().dim(1) != vv)
    throw InputError("apply_blended: shape mismatch");
  Tensor<T> out({bsz, vv, 3});
  const std::int64_t n = static_cast<std::int64_t>(bsz) * vv;
  const T* pd = blended.value().data();
  const T* xd = verts.value().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T* p = pd + i * 12;
    const T* x = xd + i * 3;
    T* o = out.data() + i * 3;
    for (int r = 0; r < 3; ++r)
      o[r] = p[r * 4 + 0] * x[0] + p[r * 4 + 1] * x[1] + p[r * 4 + 2] * x[2] +
             p[r * 4 + 3];
  }
  return ad::make_op<T>(std::move(out), {blended, verts}, [n](ad::Node<T>& nd) {
    const bool need_p = nd.parents[0]->requires_grad;
    const bool need_x = nd.parents[1]->requires_grad;
    const T* pd = nd.parents[0]->value.data();
    const T* xd = nd.parents[1]->value.data();
    T* gp = need_p ? nd.parents[0]->grad_buf().data() : nullptr;
    T* gx = need_x ? nd.parents[1]->grad_buf().data() : nullptr;
    for (std::int64_t i = 0; i < n; ++i) {
      const T* g = nd.grad.data() + i * 3;
      const T* x = xd + i * 3;
      const T* p = pd + i * 12;
      if (need_p) {
        T* gpi = gp + i * 12;
        for (int r = 0; r < 3; ++r) {
          gpi[r * 4 + 0] += g[r] * x[0];
          gpi[r * 4 + 1] += g[r] * x[1];
          gpi[r * 4 + 2] += g[r] * x[2];
          gpi[r * 4 + 3] += g[r];
        }
      }
      if (need_x) {
        T* gxi = gx + i * 3;
        for (int c = 0; c < 3; ++c)
          gxi[c] += g[0] * p[0 * 4 + c] + g[1] * p[1 * 4 + c] + g[2] * p[2 * 4 + c];
      }
    }
  });
}

/// (p,12) per-joint blend matrix layout expected by apply_blended: the 12
/// values of G are [r00 r01 r02 | r10 r11 r12 | r20 r21 r22 | t0 t1 t2] but
/// apply_blended consumes rows [r00 r01 r02 t0 | ...]. This op permutes.
template <typename T>
Var<T> to_row_affine(const Var<T>& g) {
  static constexpr int kPerm[12] = {0, 1, 2, 9, 3, 4, 5, 10, 6, 7, 8, 11};
  Tensor<T> out(g.value().shape());
  const std::int64_t n = g.value().numel() / 12;
  const T* src = g.value().data();
  for (std::int64_t i = 0; i < n; ++i)
    for (int k = 0; k < 12; ++k) out[i * 12 + k] = src[i * 12 + kPerm[k]];
  return ad::make_op<T>(std::move(out), {g}, [n](ad::Node<T>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto& gg = nd.parents[0]->grad_buf();
    for (std::int64_t i = 0; i < n; ++i)
      for (int k = 0; k < 12; ++k)
        gg[i * 12 + kPerm[k]] += nd.grad[i * 12 + k];
  });
}

template <typename T>
struct FkResult {
  Var<T> vertices;  // (B, V, 3)
  Var<T> joints;    // (B, 21, 3)
};

/// Batched linear blend skinning: shape offsets, kinematic chain, blended
/// transforms, regressed joints. theta (B,48), beta (B,10).
template <typename T>
FkResult<T> fk_batched(const Var<T>& theta, const Var<T>& beta,
                       const HandTemplate<T>& tpl) {
  const int bsz = static_cast<int>(theta.value().rows());
  const int vv = tpl.vertex_count();
  if (beta.value().rows() != bsz || beta.value().cols() != kBetaDim)
    throw InputError("fk_batched: beta must be (B, 10)");
  if (!beta.value().all_finite())
    throw InputError("fk_batched: non-finite shape parameters");

  // Shaped rest vertices.
  Var<T> offsets = ad::matmul(beta, Var<T>::constant(tpl.shape_basis));
  Tensor<T> rest_flat = tpl.rest_vertices.reshaped({vv * 3});
  Var<T> shaped = ad::reshape(
      ad::add_bias(offsets, Var<T>::constant(std::move(rest_flat))),
      {bsz, vv, 3});

  Var<T> g = fk_transforms(ad::reshape(theta, {bsz, kThetaDim}), tpl);
  Var<T> blended = ad::left_matmul_batched(tpl.skin_weights, g);  // (B,V,12)
  Var<T> vertices = apply_blended(to_row_affine(blended), shaped);
  Var<T> joints = ad::left_matmul_batched(tpl.joint_regressor, vertices);
  return {vertices, joints};
}

/// Plain single-pose evaluation.
HandMesh forward_kinematics(const PoseParams& pose, const ShapeParams& shape,
                            const HandTemplate<double>& tpl);

// ---------------------------------------------------------------------------
// Projection.
// ---------------------------------------------------------------------------

/// Pinhole projection with identity rotation; throws ProjectionError naming
/// the first joint at non-positive depth.
Tensor<double> project(const Tensor<double>& joints3d, const CameraParams& cam);

/// Differentiable batched projection: joints (B,J,3), trans (B,3) -> (B,J,2).
/// Depths are assumed positive (guaranteed by the camera head).
template <typename T>
Var<T> pinhole_project(const Var<T>& joints, const Var<T>& trans, T focal,
                       T cx, T cy) {
  const int bsz = joints.value().dim(0), nj = joints.value().dim(1);
  if (trans.value().rows() != bsz || trans.value().cols() != 3)
    throw InputError("pinhole_project: trans must be (B, 3)");
  Tensor<T> out({bsz, nj, 2});
  const T* jd = joints.value().data();
  const T* td = trans.value().data();
  for (int b = 0; b < bsz; ++b)
    for (int j = 0; j < nj; ++j) {
      const T* p = jd + (static_cast<std::int64_t>(b) * nj + j) * 3;
      const T* t = td + static_cast<std::int64_t>(b) * 3;
      const T z = p[2] + t[2];
      T* o = out.data() + (static_cast<std::int64_t>(b) * nj + j) * 2;
      o[0] = focal * (p[0] + t[0]) / z + cx;
      o[1] = focal * (p[1] + t[1]) / z + cy;
    }
  return ad::make_op<T>(
      std::move(out), {joints, trans}, [bsz, nj, focal](ad::Node<T>& n) {
        const bool need_j = n.parents[0]->requires_grad;
        const bool need_t = n.parents[1]->requires_grad;
        const T* jd = n.parents[0]->value.data();
        const T* td = n.parents[1]->value.data();
        T* gj = need_j ? n.parents[0]->grad_buf().data() : nullptr;
        T* gt = need_t ? n.parents[1]->grad_buf().data() : nullptr;
        for (int b = 0; b < bsz; ++b)
          for (int j = 0; j < nj; ++j) {
            const std::int64_t pi = (static_cast<std::int64_t>(b) * nj + j);
            const T* p = jd + pi * 3;
            const T* t = td + static_cast<std::int64_t>(b) * 3;
            const T* g = n.grad.data() + pi * 2;
            const T z = p[2] + t[2];
            const T invz = T(1) / z;
            const T dx = g[0] * focal * invz;
            const T dy = g[1] * focal * invz;
            const T dz = -(g[0] * focal * (p[0] + t[0]) +
                           g[1] * focal * (p[1] + t[1])) *
                         invz * invz;
            if (need_j) {
              gj[pi * 3 + 0] += dx;
              gj[pi * 3 + 1] += dy;
              gj[pi * 3 + 2] += dz;
            }
            if (need_t) {
              gt[static_cast<std::int64_t>(b) * 3 + 0] += dx;
              gt[static_cast<std::int64_t>(b) * 3 + 1] += dy;
              gt[static_cast<std::int64_t>(b) * 3 + 2] += dz;
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Mesh export.
// ---------------------------------------------------------------------------

/// Wavefront OBJ, vertices in meters, 1-based face indices.
void export_obj(const std::string& path, const Tensor<double>& vertices,
                const std::vector<int>& faces);

/// Skeleton edges in the 21-keypoint layout (wrist; per finger MCP, PIP,
/// DIP, TIP).
const std::vector<std::pair<int, int>>& skeleton_edges21();

}  // namespace hmr::hand
