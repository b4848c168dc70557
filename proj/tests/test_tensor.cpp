#include <doctest.h>

#include <cmath>

#include "cec/tensor.hpp"

using namespace cec;

namespace {
TensorPtr<float> make(Shape s, std::vector<float> v, bool req = false) {
  return make_tensor<float>(s, std::move(v), req);
}
}  // namespace

TEST_CASE("conv2d with a 1x1 identity kernel returns the input") {
  auto x = make({1, 1, 4, 4}, {3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9, 3});
  auto w = make({1, 1, 1, 1}, {1.0f});
  auto y = conv2d(x, w, 1);
  REQUIRE(y->shape == x->shape);
  for (std::size_t i = 0; i < x->data.size(); ++i)
    CHECK(y->data[i] == x->data[i]);
}

TEST_CASE("conv2d 3x3 all-ones kernel on a constant map") {
  auto x = full<float>({1, 1, 4, 4}, 2.0f);
  auto w = full<float>({1, 1, 3, 3}, 1.0f);
  auto y = conv2d(x, w, 1);
  // window overlap: corners see 4 pixels, edges 6, interior 9
  CHECK(y->at(0, 0, 0, 0) == doctest::Approx(8.0));
  CHECK(y->at(0, 0, 0, 3) == doctest::Approx(8.0));
  CHECK(y->at(0, 0, 3, 0) == doctest::Approx(8.0));
  CHECK(y->at(0, 0, 3, 3) == doctest::Approx(8.0));
  CHECK(y->at(0, 0, 0, 1) == doctest::Approx(12.0));
  CHECK(y->at(0, 0, 2, 0) == doctest::Approx(12.0));
  for (int i = 1; i <= 2; ++i)
    for (int j = 1; j <= 2; ++j)
      CHECK(y->at(0, 0, i, j) == doctest::Approx(18.0));
}

TEST_CASE("conv2d stride-2 channel-doubling shape law") {
  auto x = make_tensor<float>({1, 8, 8, 8});
  auto w = make_tensor<float>({16, 8, 1, 1});
  auto y = conv2d(x, w, 2);
  CHECK(y->shape == Shape{1, 16, 4, 4});
}

TEST_CASE("conv2d output spatial size is ceil(input/stride) for odd sizes") {
  auto x = make_tensor<float>({1, 1, 5, 7});
  auto w = make_tensor<float>({1, 1, 3, 3});
  CHECK(conv2d(x, w, 1)->shape == Shape{1, 1, 5, 7});
  CHECK(conv2d(x, w, 2)->shape == Shape{1, 1, 3, 4});
}

TEST_CASE("conv2d rejects bad inputs") {
  auto x = make_tensor<float>({1, 2, 4, 4});
  CHECK_THROWS_AS(conv2d(x, make_tensor<float>({1, 3, 1, 1}), 1), ShapeError);
  CHECK_THROWS_AS(conv2d(x, make_tensor<float>({1, 2, 5, 5}), 1), ShapeError);
  CHECK_THROWS_AS(conv2d(x, make_tensor<float>({1, 2, 3, 3}), 3), ShapeError);
  auto bad = make_tensor<float>({1, 2, 4, 4});
  bad->data[5] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(conv2d(bad, make_tensor<float>({1, 2, 1, 1}), 1),
                  NumericError);
}

TEST_CASE("batchnorm2d normalizes {1,2,3,4} with population variance") {
  auto x = make({1, 1, 2, 2}, {1, 2, 3, 4});
  auto gamma = full<float>({1, 1, 1, 1}, 1.0f);
  auto beta = make_tensor<float>({1, 1, 1, 1});
  std::vector<float> rm(1, 0.0f), rv(1, 1.0f);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, 0.1f, 1e-5f, true);
  CHECK(y->data[0] == doctest::Approx(-1.3416).epsilon(1e-3));
  CHECK(y->data[1] == doctest::Approx(-0.4472).epsilon(1e-3));
  CHECK(y->data[2] == doctest::Approx(0.4472).epsilon(1e-3));
  CHECK(y->data[3] == doctest::Approx(1.3416).epsilon(1e-3));
  // running stats moved toward the batch stats (momentum 0.1)
  CHECK(rm[0] == doctest::Approx(0.25));
  CHECK(rv[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25));
}

TEST_CASE("batchnorm2d is a fixed point on zero-mean unit-variance input") {
  auto x = make({1, 1, 2, 2}, {-1.3416408f, -0.4472136f, 0.4472136f,
                               1.3416408f});
  auto gamma = full<float>({1, 1, 1, 1}, 1.0f);
  auto beta = make_tensor<float>({1, 1, 1, 1});
  std::vector<float> rm(1, 0.0f), rv(1, 1.0f);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, 0.1f, 1e-5f, true);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(y->data[i] == doctest::Approx(x->data[i]).epsilon(1e-3));
}

TEST_CASE("batchnorm2d with gamma=0 beta=5 collapses to 5") {
  auto x = make({1, 1, 2, 2}, {10, -3, 7, 0.5f});
  auto gamma = make_tensor<float>({1, 1, 1, 1});
  auto beta = full<float>({1, 1, 1, 1}, 5.0f);
  std::vector<float> rm(1, 0.0f), rv(1, 1.0f);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, 0.1f, 1e-5f, true);
  for (float v : y->data) CHECK(v == doctest::Approx(5.0));
}

TEST_CASE("batchnorm2d error cases") {
  auto gamma = full<float>({1, 1, 1, 1}, 1.0f);
  auto beta = make_tensor<float>({1, 1, 1, 1});
  std::vector<float> rm(1, 0.0f), rv(1, 1.0f);
  auto tiny = make({1, 1, 1, 1}, {3.0f});
  CHECK_THROWS_AS(
      batchnorm2d(tiny, gamma, beta, rm, rv, 0.1f, 1e-5f, true), NumericError);
  auto x = make_tensor<float>({1, 2, 2, 2});
  CHECK_THROWS_AS(batchnorm2d(x, gamma, beta, rm, rv, 0.1f, 1e-5f, true),
                  ShapeError);
}

TEST_CASE("batchnorm2d inference uses only the running statistics") {
  auto x = make({1, 1, 1, 2}, {5.0f, 9.0f});
  auto gamma = full<float>({1, 1, 1, 1}, 2.0f);
  auto beta = full<float>({1, 1, 1, 1}, 1.0f);
  std::vector<float> rm(1, 5.0f), rv(1, 4.0f);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, 0.1f, 0.0f, false);
  CHECK(y->data[0] == doctest::Approx(1.0));
  CHECK(y->data[1] == doctest::Approx(5.0));
  CHECK(rm[0] == 5.0f);  // untouched
}

TEST_CASE("relu, add, global_avg_pool basics") {
  auto x = make({1, 1, 1, 3}, {-1, 0, 2});
  auto y = relu(x);
  CHECK(y->data == std::vector<float>{0, 0, 2});

  auto a = make({1, 1, 1, 3}, {1, 2, 3});
  auto z = add(a, zeros_like(a));
  CHECK(z->data == a->data);
  CHECK_THROWS_AS(add(a, make_tensor<float>({1, 1, 1, 2})), ShapeError);

  auto g = global_avg_pool(make({1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(g->shape == Shape{1, 1, 1, 1});
  CHECK(g->data[0] == doctest::Approx(2.5));
}

TEST_CASE("linear applies weight and bias per class") {
  auto x = make({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
  auto w = make({2, 3, 1, 1}, {1, 0, 0, 0, 1, 1});
  auto b = make({1, 2, 1, 1}, {0.5f, -1.0f});
  auto y = linear(x, w, b);
  CHECK(y->shape == Shape{2, 2, 1, 1});
  CHECK(y->data[0] == doctest::Approx(1.5));
  CHECK(y->data[1] == doctest::Approx(4.0));
  CHECK(y->data[2] == doctest::Approx(4.5));
  CHECK(y->data[3] == doctest::Approx(10.0));
  CHECK_THROWS_AS(linear(x, make_tensor<float>({2, 4, 1, 1}), b), ShapeError);
}

TEST_CASE("maxpool2x2 forward values and constant maps") {
  auto c = maxpool2x2(full<float>({1, 1, 4, 4}, 7.0f));
  CHECK(c->shape == Shape{1, 1, 2, 2});
  for (float v : c->data) CHECK(v == 7.0f);

  std::vector<float> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = float(i + 1);
  auto y = maxpool2x2(make({1, 1, 4, 4}, ramp, true));
  CHECK(y->data == std::vector<float>{6, 8, 14, 16});

  auto s = sum_all(y);
  backward(s);
  const auto& gx = y->parents[0]->grad;
  std::vector<float> expect(16, 0.0f);
  expect[5] = expect[7] = expect[13] = expect[15] = 1.0f;
  CHECK(gx == expect);

  CHECK_THROWS_AS(maxpool2x2(make_tensor<float>({1, 1, 3, 4})), ShapeError);
}

TEST_CASE("maxpool2x2 ties route gradient to the first occurrence") {
  auto x = full<float>({1, 1, 2, 2}, 1.0f);
  x->requires_grad = true;
  auto y = maxpool2x2(x);
  backward(sum_all(y));
  CHECK(x->grad == std::vector<float>{1, 0, 0, 0});
}

TEST_CASE("upsample_bilinear2 matches the half-pixel-center table") {
  auto c = upsample_bilinear2(full<float>({1, 1, 2, 2}, 3.0f));
  for (float v : c->data) CHECK(v == doctest::Approx(3.0));

  auto x = make({1, 1, 2, 2}, {0, 1, 2, 3}, true);
  auto y = upsample_bilinear2(x);
  const std::vector<float> expect{0,   0.25f, 0.75f, 1,    0.5f, 0.75f,
                                  1.25f, 1.5f, 1.5f,  1.75f, 2.25f, 2.5f,
                                  2,   2.25f, 2.75f, 3};
  REQUIRE(y->shape == Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(y->data[i] == doctest::Approx(expect[i]));

  backward(sum_all(y));
  float gsum = 0;
  for (float v : x->grad) gsum += v;
  CHECK(gsum == doctest::Approx(16.0));  // partition of unity
}

TEST_CASE("concat_channels arithmetic, neutral element, and backward split") {
  auto a = full<float>({1, 3, 8, 8}, 1.0f);
  auto b = full<float>({1, 5, 8, 8}, 2.0f);
  a->requires_grad = b->requires_grad = true;
  auto y = concat_channels(a, b);
  CHECK(y->shape == Shape{1, 8, 8, 8});
  CHECK(y->at(0, 2, 0, 0) == 1.0f);
  CHECK(y->at(0, 3, 0, 0) == 2.0f);

  backward(sum_all(y));
  for (float v : a->grad) CHECK(v == 1.0f);
  for (float v : b->grad) CHECK(v == 1.0f);

  auto empty = make_tensor<float>({1, 0, 8, 8});
  auto same = concat_channels(a, empty);
  CHECK(same->shape == a->shape);
  CHECK(same->data == a->data);

  CHECK_THROWS_AS(concat_channels(a, make_tensor<float>({1, 5, 4, 4})),
                  ShapeError);
}

TEST_CASE("channel_halve_sum pairwise summation") {
  auto x = make({1, 4, 1, 2}, {1, 1, 2, 2, 3, 3, 4, 4});
  auto y = channel_halve_sum(x);
  CHECK(y->shape == Shape{1, 2, 1, 2});
  CHECK(y->data == std::vector<float>{3, 3, 7, 7});

  auto ones = full<float>({1, 6, 1, 1}, 1.0f);
  auto twos = channel_halve_sum(ones);
  CHECK(twos->data == std::vector<float>{2, 2, 2});

  CHECK_THROWS_AS(channel_halve_sum(make_tensor<float>({1, 3, 2, 2})),
                  ShapeError);
}

TEST_CASE("weighted_cross_entropy frozen values") {
  auto one = make({1, 2, 1, 1}, {0, 0});
  auto l1 = weighted_cross_entropy(one, {1}, std::vector<float>{0.81f, 1.3f});
  CHECK(l1->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  auto confident = make({1, 2, 1, 1}, {1000, 0});
  auto l2 = weighted_cross_entropy(confident, {0}, std::vector<float>{1, 1});
  CHECK(l2->data[0] == doctest::Approx(0.0).epsilon(1e-6));

  auto two = make({2, 2, 1, 1}, {0, 0, 0, 0});
  auto l3 =
      weighted_cross_entropy(two, {0, 1}, std::vector<float>{0.81f, 1.3f});
  CHECK(l3->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("weighted_cross_entropy stability and argument checks") {
  auto big = make({2, 2, 1, 1}, {1e4f, -1e4f, -1e4f, 1e4f});
  auto l = weighted_cross_entropy(big, {0, 1}, std::vector<float>{1, 1});
  CHECK(std::isfinite(l->data[0]));

  auto x = make({1, 2, 1, 1}, {0, 0});
  CHECK_THROWS_AS(
      weighted_cross_entropy(x, {2}, std::vector<float>{1, 1}),
      std::out_of_range);
  CHECK_THROWS_AS(
      weighted_cross_entropy(x, {0}, std::vector<float>{1, 0}),
      std::invalid_argument);
}

TEST_CASE("backward basics and error cases") {
  auto x = make({1, 1, 1, 2}, {-1, 2}, true);
  auto loss = sum_all(relu(x));
  backward(loss);
  CHECK(x->grad == std::vector<float>{0, 1});
  CHECK_THROWS_AS(backward(loss), std::logic_error);

  auto y = make({1, 1, 1, 3}, {1, 2, 3}, true);
  auto s = sum_all(y);
  backward(s);
  CHECK(y->grad == std::vector<float>{1, 1, 1});

  CHECK_THROWS_AS(backward(relu(y)), ShapeError);
}

TEST_CASE("gradients accumulate additively across reuse") {
  auto x = make({1, 1, 1, 2}, {2, 3}, true);
  backward(sum_all(add(x, x)));
  CHECK(x->grad == std::vector<float>{2, 2});
}

TEST_CASE("pick routes the gradient to one position") {
  auto x = make({1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7}, true);
  auto p = pick(x, 0, 1, 1, 0);
  CHECK(p->data[0] == 6.0f);
  backward(p);
  std::vector<float> expect(8, 0.0f);
  expect[6] = 1.0f;
  CHECK(x->grad == expect);
  CHECK_THROWS_AS(pick(x, 0, 2, 0, 0), ShapeError);
}
