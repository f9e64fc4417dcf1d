#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "hmr/data_synth.hpp"
#include "hmr/hand_model.hpp"
#include "oracles.hpp"

using namespace hmr;
using namespace hmr::testing;
using ad::Tensor;
using ad::Var;

TEST_SUITE_BEGIN("hand_model");

namespace {

const hand::HandTemplate<double>& default_template() {
  static const hand::HandTemplate<double> tpl =
      hand::build_synthetic_template({});
  return tpl;
}

hand::PoseParams random_pose(Rng& rng) { return data::sample_pose(rng); }

hand::ShapeParams random_shape(Rng& rng) {
  Tensor<double> b({hand::kBetaDim});
  for (int i = 0; i < hand::kBetaDim; ++i) b[i] = rng.uniform(-2.0, 2.0);
  return hand::ShapeParams(std::move(b));
}

}  // namespace

TEST_CASE("default template satisfies every invariant") {
  const auto& tpl = default_template();
  CHECK(tpl.vertex_count() == 384);
  CHECK_NOTHROW(tpl.validate());
  CHECK(tpl.face_count() > 0);
}

TEST_CASE("template construction is deterministic") {
  const auto a = hand::build_synthetic_template({});
  const auto b = hand::build_synthetic_template({});
  CHECK(a.rest_vertices.arr().isApprox(b.rest_vertices.arr(), 0.0));
  CHECK(a.skin_weights.arr().isApprox(b.skin_weights.arr(), 0.0));
  CHECK(a.joint_regressor.arr().isApprox(b.joint_regressor.arr(), 0.0));
  CHECK(a.shape_basis.arr().isApprox(b.shape_basis.arr(), 0.0));
  CHECK(a.faces == b.faces);
}

TEST_CASE("small vertex budget still yields a valid template") {
  hand::TemplateConfig cfg;
  cfg.vertex_budget = 64;
  const auto tpl = hand::build_synthetic_template(cfg);
  CHECK_NOTHROW(tpl.validate());
  CHECK(tpl.vertex_count() <= 64);
  CHECK(tpl.rest_joints.dim(0) == 16);
  CHECK(tpl.joint_regressor.dim(0) == 21);
}

TEST_CASE("vertex budget below the minimum is rejected") {
  hand::TemplateConfig cfg;
  cfg.vertex_budget = 32;
  CHECK_THROWS_AS(hand::build_synthetic_template(cfg), ConfigError);
}

TEST_CASE("shape basis rows are mutually orthogonal") {
  const auto& tpl = default_template();
  auto b = tpl.shape_basis.mat();
  for (int i = 0; i < hand::kBetaDim; ++i)
    for (int j = i + 1; j < hand::kBetaDim; ++j) {
      const double cosine = b.row(i).dot(b.row(j)) /
                            (b.row(i).norm() * b.row(j).norm());
      CHECK(std::abs(cosine) < 1e-10);
    }
}

TEST_CASE("zero pose and shape reproduce the rest vertices") {
  const auto& tpl = default_template();
  const auto mesh = hand::forward_kinematics(hand::PoseParams::zero(),
                                             hand::ShapeParams::zero(), tpl);
  CHECK((mesh.vertices.arr() - tpl.rest_vertices.arr()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("global-rotation-only poses are exactly rigid") {
  const auto& tpl = default_template();
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> theta({hand::kThetaDim});
    theta[0] = rng.uniform(-2.5, 2.5);
    theta[1] = rng.uniform(-2.5, 2.5);
    theta[2] = rng.uniform(-1.5, 1.5);
    const hand::PoseParams pose(theta);
    const auto mesh =
        hand::forward_kinematics(pose, hand::ShapeParams::zero(), tpl);
    const Eigen::Matrix3d r = rot_from_axis_angle(pose.theta.data());
    double worst = 0.0;
    for (int v = 0; v < tpl.vertex_count(); ++v) {
      const Eigen::Vector3d rest(tpl.rest_vertices[v * 3 + 0],
                                 tpl.rest_vertices[v * 3 + 1],
                                 tpl.rest_vertices[v * 3 + 2]);
      const Eigen::Vector3d expect = r * rest;
      const Eigen::Vector3d got(mesh.vertices[v * 3 + 0], mesh.vertices[v * 3 + 1],
                                mesh.vertices[v * 3 + 2]);
      worst = std::max(worst, (expect - got).norm());
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("forward kinematics matches the per-vertex skinning oracle") {
  const auto& tpl = default_template();
  Rng rng(17);
  double worst = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    const auto pose = random_pose(rng);
    const auto shape = random_shape(rng);
    const auto mesh = hand::forward_kinematics(pose, shape, tpl);
    const auto oracle = brute_force_skinning(tpl, pose, shape);
    worst = std::max(worst,
                     double((mesh.vertices.arr() - oracle.arr()).abs().maxCoeff()));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("regressed wrist coincides with the posed root joint") {
  const auto& tpl = default_template();
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const auto mesh =
        hand::forward_kinematics(random_pose(rng), random_shape(rng), tpl);
    // The root joint sits at the origin and only rotates about itself.
    for (int c = 0; c < 3; ++c) CHECK(std::abs(mesh.joints[c]) < 1e-6);
  }
}

TEST_CASE("fk gradients match finite differences") {
  const auto tpl = default_template();
  Rng rng(31);
  const auto pose = random_pose(rng);
  const auto shape = random_shape(rng);
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        auto fk = hand::fk_batched(v[0], v[1], tpl);
        return ad::mean_all(fk.vertices);
      },
      {pose.theta.reshaped({1, hand::kThetaDim}),
       shape.beta.reshaped({1, hand::kBetaDim})},
      1e-6, 1e-6, 64);
}

TEST_CASE("fk joint gradients also match finite differences") {
  const auto tpl = default_template();
  Rng rng(37);
  const auto pose = random_pose(rng);
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        auto fk = hand::fk_batched(
            v[0], Var<double>::constant(Tensor<double>({1, hand::kBetaDim})), tpl);
        return ad::mean_all(ad::square_(fk.joints));
      },
      {pose.theta.reshaped({1, hand::kThetaDim})}, 1e-6, 1e-6, 48);
}

TEST_CASE("non-finite pose parameters are rejected") {
  Tensor<double> theta({hand::kThetaDim});
  theta[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(hand::PoseParams{theta}, InputError);
}

TEST_CASE("axis-angle canonicalization wraps norms into [0, pi]") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> theta({hand::kThetaDim});
    for (int j = 0; j < 16; ++j) {
      const double scale = rng.uniform(0.0, 9.0);
      Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
      axis.normalize();
      for (int c = 0; c < 3; ++c) theta[3 * j + c] = scale * axis[c];
    }
    const hand::PoseParams pose(theta);
    for (int j = 0; j < 16; ++j) {
      const double* w = pose.theta.data() + 3 * j;
      const double n = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
      CHECK(n <= 3.14159265358979323846 + 1e-12);
      // Same rotation as the raw parameterization.
      const Eigen::Matrix3d ra = rot_from_axis_angle(theta.data() + 3 * j);
      const Eigen::Matrix3d rb = rot_from_axis_angle(w);
      CHECK((ra - rb).norm() < 1e-9);
    }
  }
}

TEST_CASE("shape parameters clamp at the |beta| = 5 boundary") {
  Tensor<double> b({hand::kBetaDim});
  b[0] = 7.5;
  b[1] = -9.0;
  const hand::ShapeParams s(b);
  CHECK(s.beta[0] == 5.0);
  CHECK(s.beta[1] == -5.0);
}

TEST_CASE("on-axis projection maps to the principal point") {
  Tensor<double> joints({1, 3});
  joints[2] = 0.5;
  // Effectively zero translation (the type forbids exactly zero depth).
  hand::CameraParams cam;
  cam.translation[2] = 1e-12;
  cam.focal = 1000.0;
  cam.cx = 112.0;
  cam.cy = 112.0;
  const auto uv = hand::project(joints, cam);
  CHECK(uv[0] == doctest::Approx(112.0).epsilon(1e-9));
  CHECK(uv[1] == doctest::Approx(112.0).epsilon(1e-9));
}

TEST_CASE("pinhole arithmetic matches the closed form") {
  Tensor<double> joints({1, 3});
  joints[0] = 0.1;
  joints[2] = 0.5;
  hand::CameraParams cam;
  cam.translation[2] = 1e-12;
  cam.focal = 1000.0;
  cam.cx = 112.0;
  cam.cy = 112.0;
  const auto uv = hand::project(joints, cam);
  CHECK(uv[0] == doctest::Approx(312.0).epsilon(1e-9));
  CHECK(uv[1] == doctest::Approx(112.0).epsilon(1e-9));
}

TEST_CASE("degenerate depth raises a projection error naming the joint") {
  Tensor<double> joints({2, 3});
  joints[2] = 0.4;
  joints[5] = -1.0;
  hand::CameraParams cam;
  cam.translation[2] = 1.0;
  try {
    hand::project(joints, cam);
    FAIL("expected ProjectionError");
  } catch (const ProjectionError& e) {
    CHECK(std::string(e.what()).find("joint 1") != std::string::npos);
  }
}

TEST_CASE("projection preserves ray ratios on-axis") {
  Rng rng(47);
  hand::CameraParams cam;
  cam.translation[2] = 1e-15;
  for (int trial = 0; trial < 32; ++trial) {
    Tensor<double> j({1, 3});
    j[0] = rng.uniform(-0.2, 0.2);
    j[1] = rng.uniform(-0.2, 0.2);
    j[2] = rng.uniform(0.4, 1.5);
    const auto uv = hand::project(j, cam);
    CHECK(std::abs((uv[0] - cam.cx) / cam.focal - j[0] / j[2]) < 1e-9);
    CHECK(std::abs((uv[1] - cam.cy) / cam.focal - j[1] / j[2]) < 1e-9);
  }
}

TEST_CASE("camera invariants are enforced") {
  Tensor<double> t({3});
  t[2] = -0.5;
  CHECK_THROWS_AS(hand::CameraParams(std::move(t), 1000.0, 112.0, 112.0),
                  InputError);
  Tensor<double> t2({3});
  t2[2] = 1.0;
  CHECK_THROWS_AS(hand::CameraParams(std::move(t2), -5.0, 112.0, 112.0),
                  InputError);
}

TEST_CASE("pose limit clamping and checks") {
  Rng rng(53);
  for (int i = 0; i < 200; ++i) CHECK(hand::within_limits(data::sample_pose(rng)));
  Tensor<double> theta({hand::kThetaDim});
  theta[4] = 99.0;  // wild local rotation
  const auto clamped = hand::clamp_to_limits(hand::PoseParams(theta));
  CHECK(hand::within_limits(clamped));
}

TEST_CASE("obj export writes meters and 1-based faces") {
  const auto& tpl = default_template();
  const std::string path = "/tmp/hmr_test_hand.obj";
  hand::export_obj(path, tpl.rest_vertices, tpl.faces);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  int vcount = 0, fcount = 0;
  int min_index = std::numeric_limits<int>::max();
  while (std::getline(in, line)) {
    if (line.rfind("v ", 0) == 0) ++vcount;
    if (line.rfind("f ", 0) == 0) {
      ++fcount;
      int a, b, c;
      REQUIRE(std::sscanf(line.c_str(), "f %d %d %d", &a, &b, &c) == 3);
      min_index = std::min({min_index, a, b, c});
    }
  }
  CHECK(vcount == tpl.vertex_count());
  CHECK(fcount == tpl.face_count());
  CHECK(min_index >= 1);
  std::filesystem::remove(path);
}

TEST_CASE("template round-trips through the array container") {
  const auto& tpl = default_template();
  io::ArrayStore store;
  store.put_tensor("rest_vertices", tpl.rest_vertices);
  store.put_tensor("skin_weights", tpl.skin_weights);
  store.put_tensor("rest_joints", tpl.rest_joints);
  store.put_tensor("joint_regressor", tpl.joint_regressor);
  store.put_tensor("shape_basis", tpl.shape_basis);
  store.put("faces", io::Array::from_ints(tpl.faces));
  store.put("parent", io::Array::from_ints(tpl.parent));
  store.metadata()["kind"] = "hand-template";
  const std::string dir = "/tmp/hmr_test_template";
  store.save_dir(dir);
  const auto loaded = io::ArrayStore::load_dir(dir);
  CHECK(loaded.get("rest_vertices").to_tensor<double>().arr().isApprox(
      tpl.rest_vertices.arr(), 0.0));
  CHECK(loaded.get("parent").to_ints() == tpl.parent);
  std::filesystem::remove_all(dir);
}

TEST_SUITE_END();
