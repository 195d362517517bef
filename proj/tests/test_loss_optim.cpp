#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "mcrcnn/gradcheck.hpp"
#include "mcrcnn/loss.hpp"
#include "mcrcnn/optim.hpp"
#include "mcrcnn/rng.hpp"
#include "mcrcnn/tensor.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mcrcnn;
using testutil::random_tensor;

TEST_CASE("background_loss definition and fixtures") {
  Tensor<float> one(Shape(1, 1, 1, 1), 1.0f);
  Tensor<float> zero(Shape(1, 1, 1, 1), 0.0f);
  CHECK(background_loss(one, one) == 0.0f);
  CHECK(background_loss(one, zero) == doctest::Approx(0.5f));

  Rng rng(1);
  auto b = random_tensor<float>(Shape(4, 3, 40, 40), rng, 0.0, 1.0);
  auto s = random_tensor<float>(Shape(4, 3, 40, 40), rng, 0.0, 1.0);
  const double want = oracle::background_loss_ref(b, s);
  const double got = background_loss(b, s);
  CHECK(std::abs(got - want) / want < 1e-5);
  CHECK(got > 0.0);

  CHECK_THROWS_AS(background_loss(b, Tensor<float>(Shape(4, 3, 40, 39))), ShapeError);
}

TEST_CASE("background_loss is zero only at equality") {
  Rng rng(2);
  auto b = random_tensor<float>(Shape(2, 1, 3, 3), rng);
  auto s = b;
  CHECK(background_loss(b, s) == 0.0f);
  s[4] += 0.01f;
  CHECK(background_loss(b, s) > 0.0f);
}

TEST_CASE("background_loss backward matches finite differences") {
  Rng rng(3);
  auto b = random_tensor<double>(Shape(2, 3, 4, 4), rng);
  auto s = random_tensor<double>(Shape(2, 3, 4, 4), rng);
  auto fn = [&] { return background_loss(b, s); };
  auto g = background_loss_backward(b, s);
  CHECK(finite_diff_gradcheck(fn, b, g).max_rel_err < 1e-7);
}

TEST_CASE("segmentation_loss fixtures") {
  Tensor<float> half(Shape(1, 1, 1, 1), 0.5f);
  Tensor<float> one(Shape(1, 1, 1, 1), 1.0f);
  Tensor<float> m1(Shape(1, 1, 1, 1), 1.0f);
  CHECK(segmentation_loss(half, one, m1) == doctest::Approx(0.693147f).epsilon(1e-5));

  // Prediction equal to the clamped target is within 2e-6 of zero per pixel.
  Tensor<float> t(Shape(1, 1, 2, 2));
  t[0] = 0.0f;
  t[1] = 1.0f;
  t[2] = 1.0f;
  t[3] = 0.0f;
  Tensor<float> pred = t;
  Tensor<float> mask(t.shape(), 1.0f);
  CHECK(segmentation_loss(pred, t, mask) < 4 * 2e-6);

  CHECK_THROWS_AS(segmentation_loss(pred, Tensor<float>(Shape(1, 1, 2, 3)), mask), ShapeError);
  CHECK_THROWS_AS(segmentation_loss(pred, t, Tensor<float>(Shape(1, 2, 2, 2))), ShapeError);
}

TEST_CASE("segmentation_loss matches the scalar oracle on masked 8x8 maps") {
  Rng rng(4);
  auto pred = random_tensor<float>(Shape(1, 1, 8, 8), rng, 0.02, 0.98);
  Tensor<float> target(Shape(1, 1, 8, 8));
  Tensor<float> mask(Shape(1, 1, 8, 8));
  for (std::int64_t i = 0; i < target.size(); ++i) {
    target[i] = rng.uniform() > 0.5 ? 1.0f : 0.0f;
    mask[i] = rng.uniform() > 0.25 ? 1.0f : 0.0f;  // ~25% excluded
  }
  const double want_sum = oracle::segmentation_loss_ref(pred, target, mask, false);
  const double want_mean = oracle::segmentation_loss_ref(pred, target, mask, true);
  CHECK(std::abs(segmentation_loss(pred, target, mask) - want_sum) / want_sum < 1e-5);
  CHECK(std::abs(segmentation_loss(pred, target, mask, Reduction::kMean) - want_mean) /
            want_mean <
        1e-5);
}

TEST_CASE("segmentation_loss: fully masked batch yields zero mean loss") {
  Tensor<float> pred(Shape(1, 1, 3, 3), 0.5f);
  Tensor<float> target(Shape(1, 1, 3, 3), 1.0f);
  Tensor<float> mask(Shape(1, 1, 3, 3), 0.0f);
  CHECK(segmentation_loss(pred, target, mask) == 0.0f);
  CHECK(segmentation_loss(pred, target, mask, Reduction::kMean) == 0.0f);
  auto g = segmentation_loss_backward(pred, target, mask, Reduction::kMean);
  for (std::int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0f);
}

TEST_CASE("segmentation_loss strictly increases as predictions worsen") {
  Tensor<float> t1(Shape(1, 1, 1, 1), 1.0f);
  Tensor<float> m(Shape(1, 1, 1, 1), 1.0f);
  float prev = -1.0f;
  for (float p : {0.9f, 0.7f, 0.5f, 0.3f, 0.1f}) {
    Tensor<float> pred(Shape(1, 1, 1, 1), p);
    const float l = segmentation_loss(pred, t1, m);
    CHECK(l > prev);
    prev = l;
  }
}

TEST_CASE("segmentation_loss backward: finite differences and mask zeroing") {
  Rng rng(5);
  auto pred = random_tensor<double>(Shape(1, 1, 6, 6), rng, 0.05, 0.95);
  Tensor<double> target(pred.shape());
  Tensor<double> mask(pred.shape());
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    target[i] = rng.uniform() > 0.5 ? 1.0 : 0.0;
    mask[i] = rng.uniform() > 0.3 ? 1.0 : 0.0;
  }
  for (auto red : {Reduction::kSum, Reduction::kMean}) {
    auto fn = [&] { return segmentation_loss(pred, target, mask, red); };
    auto g = segmentation_loss_backward(pred, target, mask, red);
    CHECK(finite_diff_gradcheck(fn, pred, g).max_rel_err < 1e-6);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      if (mask[i] == 0.0) CHECK(g[i] == 0.0);
    }
  }
}

namespace {

std::vector<Parameter<float>*> ptrs(std::vector<Parameter<float>>& ps) {
  std::vector<Parameter<float>*> out;
  for (auto& p : ps) out.push_back(&p);
  return out;
}

}  // namespace

TEST_CASE("adam_step: zero gradient leaves values, advances the clock") {
  std::vector<Parameter<float>> ps;
  ps.emplace_back("p", Tensor<float>(Shape(1, 1, 2, 2), 3.0f));
  auto list = ptrs(ps);
  AdamState<float> st(list);
  adam_step(list, st);
  CHECK(st.t == 1);
  for (int i = 0; i < 4; ++i) CHECK(ps[0].value[i] == 3.0f);
}

TEST_CASE("adam_step: first-step magnitude is about the learning rate") {
  std::vector<Parameter<float>> ps;
  ps.emplace_back("p", Tensor<float>(Shape(1, 1, 1, 1), 1.0f));
  ps[0].grad.fill(0.5f);
  auto list = ptrs(ps);
  AdamState<float> st(list, 0.001f);
  adam_step(list, st);
  CHECK(std::abs((1.0f - ps[0].value[0]) - 0.001f) < 1e-6);
}

TEST_CASE("adam_step: drives a quadratic to its minimum") {
  // Loss sum((x - c)^2) with gradient 2(x - c).
  Tensor<float> c(Shape(1, 1, 1, 2));
  c[0] = 0.3f;
  c[1] = -0.4f;
  std::vector<Parameter<float>> ps;
  ps.emplace_back("x", Tensor<float>(Shape(1, 1, 1, 2), 0.0f));
  auto list = ptrs(ps);
  AdamState<float> st(list, 0.005f);
  float prev_loss = std::numeric_limits<float>::max();
  for (int step = 0; step < 200; ++step) {
    ps[0].zero_grad();
    ps[0].grad.array() = 2.0f * (ps[0].value.array() - c.array());
    adam_step(list, st);
    if (step < 2) {
      const float loss = (ps[0].value.array() - c.array()).square().sum();
      CHECK(loss < prev_loss);
      prev_loss = loss;
    }
  }
  CHECK(std::abs(ps[0].value[0] - 0.3f) < 1e-2);
  CHECK(std::abs(ps[0].value[1] + 0.4f) < 1e-2);
}

TEST_CASE("adam_step: non-trainable parameters stay bitwise untouched") {
  Rng rng(6);
  std::vector<Parameter<float>> ps;
  ps.emplace_back("frozen", random_tensor<float>(Shape(2, 2, 3, 3), rng));
  ps.emplace_back("live", random_tensor<float>(Shape(1, 1, 2, 2), rng));
  ps[0].trainable = false;
  Tensor<float> before = ps[0].value;
  auto list = ptrs(ps);
  AdamState<float> st(list);
  for (int i = 0; i < 5; ++i) {
    ps[0].grad.fill(1.0f);  // even with a gradient present
    ps[1].grad.fill(1.0f);
    adam_step(list, st);
  }
  CHECK(ps[0].value.same_bits(before));
  CHECK(ps[1].value[0] != 0.0f);
}

TEST_CASE("adam_step: non-finite gradients abort with the parameter name") {
  std::vector<Parameter<float>> ps;
  ps.emplace_back("weights.layer7", Tensor<float>(Shape(1, 1, 1, 2), 1.0f));
  ps[0].grad[0] = std::numeric_limits<float>::quiet_NaN();
  auto list = ptrs(ps);
  AdamState<float> st(list);
  try {
    adam_step(list, st);
    CHECK(false);
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("weights.layer7") != std::string::npos);
  }
}

TEST_CASE("adam_step: mismatched state is rejected") {
  std::vector<Parameter<float>> ps;
  ps.emplace_back("a", Tensor<float>(Shape(1, 1, 1, 1), 0.0f));
  ps.emplace_back("b", Tensor<float>(Shape(1, 1, 1, 1), 0.0f));
  auto list = ptrs(ps);
  AdamState<float> st(list);
  list.pop_back();
  CHECK_THROWS_AS(adam_step(list, st), ConfigError);
}

TEST_CASE("plateau_update reduces on sustained stalls only") {
  SUBCASE("strictly improving losses keep the rate") {
    PlateauSchedule<float> sch;
    float lr = 0.001f;
    for (int i = 0; i < 12; ++i) {
      lr = plateau_update(sch, 1.0f - 0.01f * i, lr);
      CHECK(lr == 0.001f);
    }
  }
  SUBCASE("flat losses for patience+1 epochs: 0.001 -> 0.0001") {
    PlateauSchedule<float> sch;
    float lr = 0.001f;
    lr = plateau_update(sch, 0.5f, lr);  // seeds the best value
    for (int i = 0; i < 4; ++i) {
      lr = plateau_update(sch, 0.5f, lr);
      CHECK(lr == 0.001f);
    }
    lr = plateau_update(sch, 0.5f, lr);  // fifth stall epoch triggers
    CHECK(lr == doctest::Approx(0.0001f));
  }
  SUBCASE("rate never drops below the floor") {
    PlateauSchedule<float> sch;
    float lr = 1e-6f;
    plateau_update(sch, 1.0f, lr);
    for (int i = 0; i < 20; ++i) lr = plateau_update(sch, 1.0f, lr);
    CHECK(lr == 1e-6f);
  }
  SUBCASE("improvement resets the stall counter") {
    PlateauSchedule<float> sch;
    float lr = 0.001f;
    lr = plateau_update(sch, 0.5f, lr);
    for (int i = 0; i < 4; ++i) lr = plateau_update(sch, 0.5f, lr);
    lr = plateau_update(sch, 0.4f, lr);  // real improvement
    for (int i = 0; i < 4; ++i) {
      lr = plateau_update(sch, 0.4f, lr);
      CHECK(lr == 0.001f);
    }
  }
  SUBCASE("sub-delta improvements count as stalls") {
    PlateauSchedule<float> sch;
    sch.min_delta = 1e-4f;
    float lr = 0.001f;
    lr = plateau_update(sch, 0.5f, lr);
    for (int i = 1; i <= 5; ++i) {
      lr = plateau_update(sch, 0.5f - 1e-6f * i, lr);
    }
    CHECK(lr == doctest::Approx(0.0001f));
  }
}
