#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "gradcheck.hpp"
#include "hmr/data_synth.hpp"

using namespace hmr;
namespace fs = std::filesystem;
using ad::Tensor;

TEST_SUITE_BEGIN("data_synth");

namespace {

data::SynthConfig small_config() {
  data::SynthConfig cfg;
  cfg.count = 12;
  cfg.seed = 99;
  cfg.with_images = true;
  cfg.template_config.vertex_budget = 96;
  return cfg;
}

}  // namespace

TEST_CASE("sampled poses are reproducible and within the limit boxes") {
  Rng a(5), b(5);
  for (int i = 0; i < 50; ++i) {
    const auto pa = data::sample_pose(a);
    const auto pb = data::sample_pose(b);
    CHECK(pa.theta.arr().isApprox(pb.theta.arr(), 0.0));
    CHECK(hand::within_limits(pa));
  }
}

TEST_CASE("per-component pose coverage spans the limit intervals") {
  const auto& lim = hand::joint_limits();
  Rng rng(11);
  constexpr int kSamples = 10000, kBins = 20;
  std::vector<std::array<int, kBins>> hist(hand::kThetaDim);
  for (auto& h : hist) h.fill(0);
  for (int s = 0; s < kSamples; ++s) {
    const auto pose = data::sample_pose(rng);
    for (int c = 0; c < hand::kThetaDim; ++c) {
      const double lo = lim.lo[c], hi = lim.hi[c];
      const double f = (pose.theta[c] - lo) / (hi - lo);
      const int bin = std::clamp(static_cast<int>(f * kBins), 0, kBins - 1);
      hist[static_cast<std::size_t>(c)][static_cast<std::size_t>(bin)]++;
    }
  }
  for (int c = 0; c < hand::kThetaDim; ++c) {
    int covered = 0;
    for (const int count : hist[static_cast<std::size_t>(c)])
      covered += count > 0;
    CHECK(covered >= static_cast<int>(0.9 * kBins));
  }
}

TEST_CASE("heatmap rendering: center blob peaks at the center pixel") {
  Tensor<double> joints({1, 2});
  joints[0] = 112.0;
  joints[1] = 112.0;
  const auto img = data::render_heatmap_image(joints, {}, 224);
  float best = -1.0f;
  int best_x = -1, best_y = -1;
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x) {
      const float v = img[(static_cast<std::int64_t>(y) * 224 + x) * 3 + 0];
      if (v > best) {
        best = v;
        best_x = x;
        best_y = y;
      }
    }
  CHECK(best_x == 112);
  CHECK(best_y == 112);
  CHECK(best == doctest::Approx(1.0f));
}

TEST_CASE("heatmap rendering: empty input gives an all-zero image") {
  const auto img = data::render_heatmap_image(Tensor<double>{}, {}, 64);
  CHECK(img.arr().abs().maxCoeff() == 0.0f);
}

TEST_CASE("heatmap rendering: interior blob integral is close to 2 pi sigma^2") {
  Tensor<double> joints({1, 2});
  joints[0] = 100.3;  // fractional center, interior
  joints[1] = 87.6;
  const auto img = data::render_heatmap_image(joints, {}, 224);
  double integral = 0.0;
  for (std::int64_t p = 0; p < 224 * 224; ++p) integral += img[p * 3 + 0];
  const double expected = 2.0 * 3.14159265358979 * 9.0;  // sigma = 3 px
  CHECK(std::abs(integral - expected) / expected < 0.05);
}

TEST_CASE("heatmap rendering: bones paint channels 1 and 2") {
  Tensor<double> joints({2, 2});
  joints[0] = 40;
  joints[1] = 40;
  joints[2] = 120;
  joints[3] = 40;
  const auto img =
      data::render_heatmap_image(joints, {{0, 1}}, 224);
  const auto at = [&](int y, int x, int c) {
    return img[(static_cast<std::int64_t>(y) * 224 + x) * 3 + c];
  };
  CHECK(at(40, 80, 1) > 0.9f);   // on the segment
  CHECK(at(40, 80, 2) > 0.0f);   // finger code present
  CHECK(at(150, 80, 1) == 0.0f);  // far away untouched
}

TEST_CASE("dataset generation is a pure function of its config") {
  const auto cfg = small_config();
  const auto a = data::generate_dataset(cfg);
  const auto b = data::generate_dataset(cfg);
  CHECK(a.poses.arr().isApprox(b.poses.arr(), 0.0));
  CHECK(a.images.arr().isApprox(b.images.arr(), 0.0));
  CHECK(a.joints2d.arr().isApprox(b.joints2d.arr(), 0.0));
}

TEST_CASE("written datasets are byte-identical across runs") {
  const auto cfg = small_config();
  const std::string d1 = "/tmp/hmr_ds_a", d2 = "/tmp/hmr_ds_b";
  data::make_dataset(cfg, d1);
  data::make_dataset(cfg, d2);
  for (const auto& entry : fs::directory_iterator(d1)) {
    const auto name = entry.path().filename();
    std::ifstream f1(entry.path(), std::ios::binary);
    std::ifstream f2(fs::path(d2) / name, std::ios::binary);
    REQUIRE(f2.good());
    const std::string c1((std::istreambuf_iterator<char>(f1)), {});
    const std::string c2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(c1 == c2);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("load reproduces exactly the generated samples") {
  const auto cfg = small_config();
  const std::string dir = "/tmp/hmr_ds_roundtrip";
  const auto made = data::make_dataset(cfg, dir);
  const auto loaded = data::load_dataset(dir);
  CHECK(loaded.size() == cfg.count);
  CHECK(loaded.poses.arr().isApprox(made.poses.arr(), 0.0));
  CHECK(loaded.images.arr().isApprox(made.images.arr(), 0.0));
  fs::remove_all(dir);
}

TEST_CASE("a flipped byte in a field file fails integrity validation") {
  const auto cfg = small_config();
  const std::string dir = "/tmp/hmr_ds_tamper";
  data::make_dataset(cfg, dir);
  {
    std::fstream f(fs::path(dir) / "poses.bin",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(17);
    char byte;
    f.get(byte);
    byte = static_cast<char>(byte ^ 0x01);
    f.seekp(17);
    f.put(byte);
  }
  CHECK_THROWS_AS(data::load_dataset(dir), IntegrityError);
  fs::remove_all(dir);
}

TEST_CASE("ground truth is self-consistent: joints from fk, 2d from projection") {
  const auto cfg = small_config();
  const auto ds = data::generate_dataset(cfg);
  const auto tpl = hand::build_synthetic_template(cfg.template_config);
  for (int i = 0; i < ds.size(); ++i) {
    const auto s = ds.sample(i);
    const auto mesh = hand::forward_kinematics(s.pose, s.shape, tpl);
    CHECK((mesh.joints.arr() - s.joints3d.arr()).abs().maxCoeff() < 1e-6);
    const auto uv = hand::project(s.joints3d, s.camera);
    CHECK((uv.arr() - s.joints2d.arr()).abs().maxCoeff() < 1e-6);
    CHECK(s.image.all_finite());
  }
}

TEST_CASE("labeled datasets anchor poses per label") {
  auto cfg = small_config();
  cfg.num_labels = 3;
  cfg.count = 12;
  cfg.with_images = false;
  const auto ds = data::generate_dataset(cfg);
  REQUIRE(ds.labels.size() == 12);
  for (int i = 0; i < 12; ++i) CHECK(ds.labels[static_cast<std::size_t>(i)] == i % 3);
  // Same-label poses cluster more tightly than cross-label ones.
  const auto dist = [&](int i, int j) {
    double d = 0.0;
    for (int c = 0; c < hand::kThetaDim; ++c) {
      const double diff =
          ds.poses[i * hand::kThetaDim + c] - ds.poses[j * hand::kThetaDim + c];
      d += diff * diff;
    }
    return std::sqrt(d);
  };
  double within = 0.0, across = 0.0;
  int nw = 0, na = 0;
  for (int i = 0; i < 12; ++i)
    for (int j = i + 1; j < 12; ++j) {
      if (ds.labels[static_cast<std::size_t>(i)] ==
          ds.labels[static_cast<std::size_t>(j)]) {
        within += dist(i, j);
        ++nw;
      } else {
        across += dist(i, j);
        ++na;
      }
    }
  CHECK(within / nw < across / na);
}

TEST_CASE("keypoint noise adds jitter and dropout zeroes confidence") {
  Rng rng(3);
  Tensor<double> kp({21, 3});
  for (int i = 0; i < 21; ++i) {
    kp[i * 3 + 0] = 100.0;
    kp[i * 3 + 1] = 100.0;
    kp[i * 3 + 2] = 1.0;
  }
  Tensor<double> noisy = kp;
  data::apply_keypoint_noise(noisy, rng, 2.0, 0.3);
  int dropped = 0;
  bool moved = false;
  for (int i = 0; i < 21; ++i) {
    if (noisy[i * 3 + 2] == 0.0) {
      ++dropped;
      CHECK(noisy[i * 3 + 0] == 0.0);
    } else if (noisy[i * 3 + 0] != 100.0) {
      moved = true;
    }
  }
  CHECK(dropped > 0);
  CHECK(moved);
}

TEST_SUITE_END();
