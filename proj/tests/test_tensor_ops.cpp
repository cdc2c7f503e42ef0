#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mambacsr/gradcheck_suite.hpp"
#include "mambacsr/ops.hpp"
#include "testutil.hpp"

using namespace mambacsr;
using namespace mambacsr::testutil;
using T64 = Tensor<double>;

TEST_CASE("tensor basics and shape invariants") {
  CHECK_THROWS_AS(T64({2, 3}, std::vector<double>(5)), ShapeError);
  const T64 t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.at({1, 2}) == 6);
  CHECK_THROWS_AS(t.at({2, 0}), ShapeError);
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(T64::scalar(3.5).item() == 3.5);
}

TEST_CASE("conv2d 3x3 all-ones neighborhood sums") {
  const T64 x = T64::full({1, 1, 3, 3}, 1.0);
  const T64 w = T64::full({1, 1, 3, 3}, 1.0);
  const T64 y = conv2d(x, w, 1);
  // hand enumeration of valid taps per position
  const std::vector<double> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  REQUIRE(y.shape() == std::vector<int64_t>{1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(y.values()[i] == expected[i]);
}

TEST_CASE("conv2d annihilates with zero kernel and bias") {
  Rng rng(3);
  const T64 x = rand_tensor<double>({2, 3, 5, 4}, rng);
  const T64 w = T64::zeros({4, 3, 3, 3});
  const T64 b = T64::zeros({4});
  const T64 y = conv2d(x, w, std::optional<T64>(b), 1);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d and linear are exactly linear in the input") {
  Rng rng(5);
  const T64 x = rand_tensor<double>({1, 2, 4, 4}, rng);
  const T64 y = rand_tensor<double>({1, 2, 4, 4}, rng);
  const T64 w = rand_tensor<double>({3, 2, 3, 3}, rng);
  const double a = 1.7, b = -0.4;
  const T64 lhs =
      conv2d(add(scale_by_scalar(x, a), scale_by_scalar(y, b)), w, 1);
  const T64 rhs = add(scale_by_scalar(conv2d(x, w, 1), a),
                      scale_by_scalar(conv2d(y, w, 1), b));
  CHECK(max_abs_diff(lhs, rhs) <= 1e-12);

  const T64 lx = rand_tensor<double>({4, 6}, rng);
  const T64 ly = rand_tensor<double>({4, 6}, rng);
  const T64 lw = rand_tensor<double>({2, 6}, rng);
  const T64 l_lhs = linear(add(scale_by_scalar(lx, a), scale_by_scalar(ly, b)), lw);
  const T64 l_rhs =
      add(scale_by_scalar(linear(lx, lw), a), scale_by_scalar(linear(ly, lw), b));
  CHECK(max_abs_diff(l_lhs, l_rhs) <= 1e-12);
}

TEST_CASE("conv2d rejects bad shapes") {
  const T64 x = T64::zeros({1, 4, 4, 4});
  CHECK_THROWS_AS(conv2d(x, T64::zeros({2, 4, 5, 5}), 2),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(x, T64::zeros({2, 3, 3, 3}), 1),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(x, T64::zeros({3, 4, 3, 3}), 1, 2),
                  ShapeError);
}

TEST_CASE("layer_norm closed forms") {
  const T64 gamma = T64::full({3}, 1.0);
  const T64 beta = T64::zeros({3});
  const T64 constant({1, 3}, {5.0, 5.0, 5.0});
  const T64 normed = layer_norm(constant, gamma, beta);
  for (double v : normed.values()) CHECK(v == 0.0);

  const T64 two = layer_norm(T64({1, 2}, {1.0, 3.0}), T64::full({2}, 1.0),
                             T64::zeros({2}), 1e-12);
  CHECK(two.values()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(two.values()[1] == doctest::Approx(1.0).epsilon(1e-6));

  CHECK_THROWS_AS(layer_norm(constant, T64::full({2}, 1.0), T64::zeros({2})),
                  ShapeError);
}

TEST_CASE("layer_norm standardizes each position") {
  Rng rng(9);
  const int64_t rows = 7, c = 16;
  const T64 x = rand_tensor<double>({rows, c}, rng, -3.0, 3.0);
  const T64 y = layer_norm(x, T64::full({c}, 1.0), T64::zeros({c}));
  for (int64_t r = 0; r < rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < c; ++i) mean += y.at({r, i});
    mean /= static_cast<double>(c);
    for (int64_t i = 0; i < c; ++i) {
      var += (y.at({r, i}) - mean) * (y.at({r, i}) - mean);
    }
    var /= static_cast<double>(c);
    CHECK(std::fabs(mean) <= 1e-6);
    CHECK(std::fabs(var - 1.0) <= 1e-6);
  }
}

TEST_CASE("elementwise closed forms") {
  CHECK(silu(T64::scalar(1.0)).item() == doctest::Approx(0.731059).epsilon(1e-5));
  CHECK(softplus(T64::scalar(0.0)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(sigmoid(T64::scalar(0.0)).item() == 0.5);
  CHECK(exp(T64::scalar(1.0)).item() == doctest::Approx(M_E).epsilon(1e-12));
  CHECK(scale_by_scalar(T64::scalar(2.0), -3.0).item() == -6.0);
  // overflow-safe softplus
  CHECK(softplus(T64::scalar(800.0)).item() == 800.0);
  CHECK(softplus(T64::scalar(-800.0)).item() == 0.0);
}

TEST_CASE("binary broadcast rules: equal shapes or scalar only") {
  const T64 a = T64::zeros({2, 3});
  const T64 b = T64::zeros({3, 2});
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK(add(a, T64::scalar(1.0)).values()[5] == 1.0);
  CHECK(mul(T64::scalar(2.0), T64({2}, {3.0, 4.0})).values()[1] == 8.0);
}

TEST_CASE("linear closed forms") {
  const T64 eye({2, 2}, {1, 0, 0, 1});
  const T64 x({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(bit_identical(linear(x, eye), x));
  const T64 w({1, 2}, {1, 1});
  const T64 b({1}, {0.0});
  const T64 y = linear(T64({1, 2}, {1.0, 2.0}), w, std::optional<T64>(b));
  CHECK(y.values()[0] == 3.0);
  CHECK_THROWS_AS(linear(x, T64::zeros({2, 3})), ShapeError);
}

TEST_CASE("global_avg_pool mean and shape contract") {
  const T64 c = T64::full({2, 3, 4, 5}, 7.5);
  const T64 pooled = global_avg_pool(c);
  CHECK(pooled.shape() == std::vector<int64_t>{2, 3, 1, 1});
  for (double v : pooled.values()) CHECK(v == 7.5);
  const T64 plane({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_avg_pool(plane).item() == 2.5);
}

TEST_CASE("pixel_shuffle index map") {
  std::vector<double> vals(16);
  for (int i = 0; i < 16; ++i) vals[static_cast<size_t>(i)] = i;
  const T64 x({1, 16, 1, 1}, vals);
  const T64 y = pixel_shuffle(x, 4);
  REQUIRE(y.shape() == std::vector<int64_t>{1, 1, 4, 4});
  for (int64_t dy = 0; dy < 4; ++dy) {
    for (int64_t dx = 0; dx < 4; ++dx) {
      CHECK(y.at({0, 0, dy, dx}) == static_cast<double>(dy * 4 + dx));
    }
  }
}

TEST_CASE("pixel_shuffle inverse and r=1 identities") {
  Rng rng(13);
  for (int r : {1, 2, 4}) {
    const T64 x = rand_tensor<double>({2, 2 * r * r, 3, 5}, rng);
    CHECK(bit_identical(pixel_unshuffle(pixel_shuffle(x, r), r), x));
  }
  const T64 x = rand_tensor<double>({1, 3, 4, 4}, rng);
  CHECK(bit_identical(pixel_shuffle(x, 1), x));
  CHECK_THROWS_AS(pixel_shuffle(T64::zeros({1, 3, 2, 2}), 2), ShapeError);
}

TEST_CASE("gather and scatter tokens") {
  Rng rng(17);
  const Trajectory ident = raster(2, 2, ScanDirection::Horizontal);
  const T64 x = rand_tensor<double>({4, 3}, rng);
  CHECK(bit_identical(gather_tokens(x, ident), x));

  Trajectory rev = flip(ident);
  const T64 g = gather_tokens(x, rev);
  for (int64_t k = 0; k < 4; ++k)
    for (int64_t d = 0; d < 3; ++d) CHECK(g.at({k, d}) == x.at({3 - k, d}));

  for (int h : {3, 5}) {
    for (int win : {2, 4}) {
      const Trajectory t = window_raster(h, h, win, ScanDirection::Vertical);
      const T64 v = rand_tensor<double>({h * h, 2}, rng);
      CHECK(bit_identical(scatter_tokens(gather_tokens(v, t), t), v));
      CHECK(bit_identical(gather_tokens(scatter_tokens(v, t), t), v));
    }
  }
  CHECK_THROWS_AS(gather_tokens(x, raster(3, 3, ScanDirection::Horizontal)),
                  ShapeError);
}

TEST_CASE("l1 loss values and tie subgradient") {
  const T64 a({2}, {0.0, 0.0});
  const T64 b({2}, {1.0, 3.0});
  CHECK(l1_loss(a, a).item() == 0.0);
  CHECK(l1_loss(a, b).item() == 2.0);

  // tie: gradient contribution is exactly zero
  Tape<double> tape;
  const T64 x({2}, {1.0, 5.0});
  const T64 t({2}, {1.0, 2.0});
  const T64 xw = tape.watch(x);
  tape.backward(l1_loss(xw, t));
  const T64 g = tape.grad(xw);
  CHECK(g.values()[0] == 0.0);
  CHECK(g.values()[1] == 0.5);
}

TEST_CASE("backward contract violations") {
  Tape<double> tape;
  const T64 x = tape.watch(T64({2}, {1.0, 2.0}));
  const T64 y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), TapeError);  // non-scalar
  const T64 loss = sum_all(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), TapeError);  // repeated backward

  Tape<double> other;
  const T64 z = other.watch(T64({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(add(x, z), TapeError);  // mixed tapes
  CHECK_THROWS_AS(other.grad(x), TapeError);
}

TEST_CASE("gradient additivity: backward of a sum equals summed backwards") {
  Rng rng(19);
  const T64 x = rand_tensor<double>({3, 3}, rng);
  const T64 t1 = rand_tensor<double>({3, 3}, rng, 2.0, 3.0);
  const T64 t2 = rand_tensor<double>({3, 3}, rng, -3.0, -2.0);

  Tape<double> tape;
  const T64 xw = tape.watch(x);
  tape.backward(add(l1_loss(xw, t1), l1_loss(xw, t2)));
  const T64 g_joint = tape.grad(xw);

  Tape<double> ta, tb;
  const T64 xa = ta.watch(x);
  ta.backward(l1_loss(xa, t1));
  const T64 ga = ta.grad(xa);
  const T64 xb = tb.watch(x);
  tb.backward(l1_loss(xb, t2));
  const T64 gb = tb.grad(xb);
  CHECK(max_abs_diff(g_joint, add(ga, gb)) <= 1e-12);
}

TEST_CASE("unreached parameters get zero gradients of the right shape") {
  Tape<double> tape;
  const T64 used = tape.watch(T64({2}, {1.0, 2.0}));
  const T64 unused = tape.watch(T64({3, 2}, {1, 2, 3, 4, 5, 6}));
  tape.backward(sum_all(used));
  const T64 g = tape.grad(unused);
  CHECK(g.shape() == std::vector<int64_t>{3, 2});
  for (double v : g.values()) CHECK(v == 0.0);
}

TEST_CASE("grad_check harness flags a wrong gradient") {
  // sum of squares with a deliberately scaled analytic path
  const ScalarFn<double> wrong = [](Tape<double>&, const T64& x) {
    return sum_all(mul(x, x.detached()));  // d/dx records only one factor
  };
  Rng rng(23);
  const T64 x = rand_tensor<double>({4}, rng, 0.5, 1.5);
  CHECK(grad_check(wrong, x, 1e-5) > 1e-2);
}

TEST_CASE("every differentiable op passes grad_check at 1e-5") {
  for (const auto& [name, err] : gradcheck_ops(42, 1e-5)) {
    INFO(name);
    CHECK(err <= kOpsGradTol);
  }
}

TEST_CASE("layout ops invert each other") {
  Rng rng(29);
  const T64 x = rand_tensor<double>({2, 3, 4, 5}, rng);
  CHECK(bit_identical(nlc_to_nchw(nchw_to_nlc(x), 4, 5), x));
  CHECK(bit_identical(reshape(reshape(x, {6, 20}), {2, 3, 4, 5}), x));
  CHECK(bit_identical(crop_hw(pad_reflect_hw(x, 6, 7), 4, 5), x));
  const T64 s = rand_tensor<double>({4, 2, 3}, rng);
  std::vector<T64> parts{select_batch(s, 0), select_batch(s, 1),
                         select_batch(s, 2), select_batch(s, 3)};
  CHECK(bit_identical(stack_first(std::span<const T64>(parts)), s));
}

TEST_CASE("bicubic tensor resize reproduces constants") {
  const T64 c = T64::full({1, 2, 6, 6}, 3.25);
  const T64 y = bicubic_resize_nchw(c, 3, 3);
  for (double v : y.values()) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
  CHECK_THROWS_AS(bicubic_resize_nchw(c, 0, 3), ShapeError);
}
