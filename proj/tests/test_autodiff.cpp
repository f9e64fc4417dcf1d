#include <doctest.h>

#include "gradcheck.hpp"
#include "hmr/autodiff.hpp"

using namespace hmr;
using namespace hmr::testing;
using ad::Tensor;
using ad::Var;

namespace {
Rng& rng() {
  static Rng r(7);
  return r;
}

Tensor<double> proj_tensor(const std::vector<int>& shape) {
  Rng r(99);
  return random_tensor(r, shape);
}

/// sum(x * random const) turns any output into a scalar probe.
Var<double> probe(const Var<double>& x) {
  return ad::sum_all(ad::mul(x, Var<double>::constant(proj_tensor(x.shape()))));
}
}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("elementwise ops match finite differences") {
  auto t = [&](auto f) {
    gradcheck([&](const std::vector<Var<double>>& v) { return probe(f(v[0])); },
              {random_tensor(rng(), {4, 5})});
  };
  t([](const Var<double>& x) { return ad::relu(ad::add_scalar(x, 0.2)); });
  t([](const Var<double>& x) { return ad::gelu(x); });
  t([](const Var<double>& x) { return ad::sigmoid(x); });
  t([](const Var<double>& x) { return ad::tanh_(x); });
  t([](const Var<double>& x) { return ad::softplus(x); });
  t([](const Var<double>& x) { return ad::square_(x); });
  t([](const Var<double>& x) { return ad::exp_(ad::scale(x, 0.3)); });
  t([](const Var<double>& x) {
    return ad::log_(ad::add_scalar(ad::square_(x), 1.0));
  });
  t([](const Var<double>& x) { return ad::scale(x, -1.7); });
  t([](const Var<double>& x) { return ad::mean_all(ad::abs_(ad::add_scalar(x, 0.05))); });
}

TEST_CASE("binary ops match finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1])));
      },
      {random_tensor(rng(), {3, 4}), random_tensor(rng(), {3, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::add_bias(v[0], v[1]));
      },
      {random_tensor(rng(), {5, 3}), random_tensor(rng(), {3})});
}

TEST_CASE("matmul and transpose match finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::matmul(v[0], v[1]));
      },
      {random_tensor(rng(), {4, 6}), random_tensor(rng(), {6, 3})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::transpose2d(v[0]));
      },
      {random_tensor(rng(), {4, 6})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::left_matmul_batched(proj_tensor({5, 4}), v[0]));
      },
      {random_tensor(rng(), {2, 4, 3})});
}

TEST_CASE("shape ops match finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::reshape(v[0], {6, 2}));
      },
      {random_tensor(rng(), {3, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::slice_rows(v[0], 1, 2));
      },
      {random_tensor(rng(), {5, 3})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::slice_cols(v[0], 1, 2));
      },
      {random_tensor(rng(), {4, 5})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::concat_rows(v[0], v[1]));
      },
      {random_tensor(rng(), {2, 3}), random_tensor(rng(), {4, 3})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::concat_cols(v[0], v[1]));
      },
      {random_tensor(rng(), {3, 2}), random_tensor(rng(), {3, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::concat_seq(v[0], v[1]));
      },
      {random_tensor(rng(), {2, 3, 4}), random_tensor(rng(), {2, 2, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::slice_seq(v[0], 1, 2));
      },
      {random_tensor(rng(), {2, 4, 3})});
}

TEST_CASE("softmax family matches finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::softmax_rows(v[0]));
      },
      {random_tensor(rng(), {4, 7})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::log_softmax_rows(v[0]));
      },
      {random_tensor(rng(), {4, 7})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return ad::nll_selected(ad::log_softmax_rows(v[0]), {1, 0, 3, 2},
                                {1, 0, 1, 1});
      },
      {random_tensor(rng(), {4, 5})});
}

TEST_CASE("layer_norm matches finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::layer_norm(v[0], v[1], v[2]));
      },
      {random_tensor(rng(), {5, 6}), random_tensor(rng(), {6}),
       random_tensor(rng(), {6})},
      1e-5);
}

TEST_CASE("embedding and blocked broadcasts match finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::embedding(v[0], {2, 0, 2, 1}));
      },
      {random_tensor(rng(), {3, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::mul_rows_blocked(v[0], v[1], 3));
      },
      {random_tensor(rng(), {6, 4}), random_tensor(rng(), {2, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::mean_rows_blocked(v[0], 3));
      },
      {random_tensor(rng(), {6, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::add_tiled(v[0], v[1]));
      },
      {random_tensor(rng(), {6, 4}), random_tensor(rng(), {3, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::add_repeat_rows(v[0], v[1], 2));
      },
      {random_tensor(rng(), {12, 3}), random_tensor(rng(), {3, 3})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::tile_rows_blocked(v[0], 3));
      },
      {random_tensor(rng(), {2, 4})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::gather_head_blocks(v[0], 2, 3));
      },
      {random_tensor(rng(), {12, 8})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::root_relative(v[0]));
      },
      {random_tensor(rng(), {2, 5, 3})});
}

TEST_CASE("conv support ops match finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::im2col1d(v[0], 3, 1, 1));
      },
      {random_tensor(rng(), {2, 6, 3})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::im2col1d(v[0], 3, 2, 1));
      },
      {random_tensor(rng(), {2, 8, 3})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::nearest_upsample1d(v[0]));
      },
      {random_tensor(rng(), {2, 4, 3})});
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::depth_to_space2(v[0]));
      },
      {random_tensor(rng(), {2, 3, 3, 8})});
}

TEST_CASE("fused attention matches finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::attention_packed(v[0], 2, Var<double>{}));
      },
      {random_tensor(rng(), {2, 5, 12})},
      1e-5);
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::attention_packed(v[0], 2, v[1]));
      },
      {random_tensor(rng(), {2, 5, 12}), random_tensor(rng(), {5, 5})},
      1e-5);
}

TEST_CASE("grid_sample matches finite differences") {
  // Locations kept strictly inside so FD never crosses the border kink.
  Rng r(11);
  Tensor<double> locs({2, 6, 2});
  for (std::int64_t i = 0; i < locs.numel(); ++i)
    locs[i] = 0.25 + 0.5 * r.uniform();
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::grid_sample(v[0], v[1]));
      },
      {random_tensor(rng(), {2, 5, 4, 3}), locs},
      1e-5);
}

TEST_CASE("weighted_sum_groups matches finite differences") {
  gradcheck(
      [&](const std::vector<Var<double>>& v) {
        return probe(ad::weighted_sum_groups(v[0], v[1]));
      },
      {random_tensor(rng(), {4, 3, 5}), random_tensor(rng(), {4, 3})});
}

TEST_CASE("detach stops gradients") {
  Var<double> x = Var<double>::leaf(random_tensor(rng(), {3, 3}), true);
  Var<double> y = ad::sum_all(ad::mul(ad::detach(x), x));
  ad::backward(y);
  // d/dx (c * x) = c where c = value of x at detach time.
  for (std::int64_t i = 0; i < 9; ++i)
    CHECK(x.grad()[i] == doctest::Approx(x.value()[i]));
}

TEST_CASE("grad mode off records nothing") {
  ad::NoGradGuard ng;
  Var<double> x = Var<double>::leaf(random_tensor(rng(), {2, 2}), true);
  Var<double> y = ad::mul(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_CASE("gradient accumulates across reuse") {
  Var<double> x = Var<double>::leaf(Tensor<double>::full({1}, 3.0), true);
  Var<double> y = ad::add(ad::square_(x), ad::scale(x, 2.0));  // x^2 + 2x
  ad::backward(ad::sum_all(y));
  CHECK(x.grad()[0] == doctest::Approx(2.0 * 3.0 + 2.0));
}

TEST_SUITE_END();
