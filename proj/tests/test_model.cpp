#include "mcrcnn/model.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "mcrcnn/gradcheck.hpp"
#include "mcrcnn/loss.hpp"
#include "mcrcnn/optim.hpp"
#include "test_util.hpp"

namespace {

mcrcnn::ModelConfig tiny_config() {
  mcrcnn::ModelConfig c;
  c.backbone_width = 4;
  c.bcnn_deep_layers = 3;
  c.scnn_deep_layers = 3;
  c.rpm_dilations = {1, 2};
  c.rpm_width = 2;
  return c;
}

// A convolution bias that feeds straight into a normalization layer has an
// exactly-zero gradient (the normalization subtracts per-channel means), so
// finite differences against it only measure noise. Those coordinates are
// asserted to be zero instead of finite-difference checked.
bool norm_absorbed_bias(const std::string& name, int interval) {
  if (name.size() < 5 || name.compare(name.size() - 5, 5, ".bias") != 0) return false;
  const auto dp = name.find(".deep");
  if (dp == std::string::npos) return false;
  const int idx = std::stoi(name.substr(dp + 5, 2));
  return idx % interval == 0;
}

template <typename S>
mcrcnn::Parameter<S>* find_param(std::vector<mcrcnn::Parameter<S>*> params,
                                 const std::string& name) {
  for (auto* p : params) {
    if (p->name == name) return p;
  }
  return nullptr;
}

}  // namespace

TEST_CASE("model config validation rejects bad settings") {
  mcrcnn::ModelConfig c;
  CHECK_NOTHROW(c.validate());

  auto bad = c;
  bad.kernel_size = 4;
  CHECK_THROWS_AS(bad.validate(), mcrcnn::ConfigError);
  bad = c;
  bad.backbone_width = 0;
  CHECK_THROWS_AS(bad.validate(), mcrcnn::ConfigError);
  bad = c;
  bad.rpm_dilations = {};
  CHECK_THROWS_AS(bad.validate(), mcrcnn::ConfigError);
  bad = c;
  bad.rpm_dilations = {4, 0};
  CHECK_THROWS_AS(bad.validate(), mcrcnn::ConfigError);
  bad = c;
  bad.rpm_dropout_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), mcrcnn::ConfigError);
  bad = c;
  bad.norm_interval = 0;
  CHECK_THROWS_AS(bad.validate(), mcrcnn::ConfigError);
  bad = c;
  bad.scnn_deep_layers = 0;
  CHECK_THROWS_AS(bad.validate(), mcrcnn::ConfigError);
}

TEST_CASE("full-size parameter counts match hand-computed totals") {
  mcrcnn::Rng rng(1);
  mcrcnn::McrcnnModel<float> model(mcrcnn::ModelConfig{}, rng);
  const auto table = mcrcnn::count_parameters(model);

  // Independent arithmetic: conv = cout*cin*k*k + cout, norm = 2*channels.
  const std::int64_t conv64 = 64 * 64 * 3 * 3 + 64;
  const std::int64_t head = 64 * 3 * 3 * 3 + 64;
  const std::int64_t bcnn = head + 15 * conv64 + 5 * 2 * 64 + (3 * 64 * 3 * 3 + 3);
  const std::int64_t rpm = 4 * (8 * 3 * 3 * 3 + 8) + (1 * 32 * 1 * 1 + 1);
  const std::int64_t scnn = head + 14 * conv64 + 4 * 2 * 64 + (1 * 65 * 3 * 3 + 1);

  CHECK(table.bcnn == bcnn);
  CHECK(table.rpm == rpm);
  CHECK(table.scnn == scnn);
  CHECK(table.grand == bcnn + rpm + scnn);

  CHECK(table.bcnn == 558083);
  CHECK(table.rpm == 929);
  CHECK(table.scnn == 519882);
  CHECK(table.grand == 1078894);

  const double ratio = 9225161.0 / static_cast<double>(table.grand);
  CHECK(ratio >= 7.0);
  CHECK(ratio <= 10.0);

  // Spot-check individual table rows.
  bool saw_head = false, saw_bn = false, saw_fuse = false;
  for (const auto& row : table.rows) {
    if (row.layer == "bcnn.head") {
      saw_head = true;
      CHECK(row.count == head);
    }
    if (row.layer == "bcnn.deep03.bn") {
      saw_bn = true;
      CHECK(row.count == 128);
    }
    if (row.layer == "scnn.fuse") {
      saw_fuse = true;
      CHECK(row.count == 1 * 65 * 3 * 3 + 1);
    }
  }
  CHECK(saw_head);
  CHECK(saw_bn);
  CHECK(saw_fuse);
}

TEST_CASE("parameter registry is ordered, unique, and partitions into stages") {
  mcrcnn::Rng rng(2);
  mcrcnn::McrcnnModel<float> model(mcrcnn::ModelConfig{}, rng);

  auto all = model.parameters();
  auto theta1 = model.bcnn_parameters();
  auto theta2 = model.theta2_parameters();
  CHECK(all.size() == theta1.size() + theta2.size());
  CHECK(theta1.size() == 2 + 15 * 2 + 5 * 2 + 2);
  CHECK(theta2.size() == (4 * 2 + 2) + (2 + 14 * 2 + 4 * 2 + 2));

  // theta1 then theta2, in declaration order, with unique names.
  std::vector<std::string> names;
  for (auto* p : all) names.push_back(p->name);
  for (std::size_t i = 0; i < theta1.size(); ++i) CHECK(all[i] == theta1[i]);
  for (std::size_t i = 0; i < theta2.size(); ++i) CHECK(all[theta1.size() + i] == theta2[i]);
  auto sorted = names;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());

  CHECK(names.front() == "bcnn.head.weight");
  CHECK(names.back() == "scnn.fuse.bias");

  // The segmentation head consumes backbone features plus the guidance map.
  auto* fuse = find_param(all, "scnn.fuse.weight");
  REQUIRE(fuse != nullptr);
  CHECK(fuse->value.shape() == mcrcnn::Shape(1, 65, 3, 3));

  // One running-statistics buffer per batch-normalized layer.
  CHECK(model.running_stats().size() == 5);
}

TEST_CASE("weight initialization is seeded and fan-in scaled") {
  mcrcnn::Rng a(11), b(11), c(12);
  mcrcnn::McrcnnModel<float> ma(tiny_config(), a);
  mcrcnn::McrcnnModel<float> mb(tiny_config(), b);
  mcrcnn::McrcnnModel<float> mc(tiny_config(), c);

  auto pa = ma.parameters(), pb = mb.parameters(), pc = mc.parameters();
  bool any_differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->value.same_bits(pb[i]->value));
    if (!pa[i]->value.same_bits(pc[i]->value)) any_differs = true;
  }
  CHECK(any_differs);

  // Biases start at zero; weights have roughly the configured spread.
  for (auto* p : pa) {
    if (p->name.find(".bias") != std::string::npos) {
      CHECK(p->value.array().abs().maxCoeff() == 0.0f);
    }
  }
  mcrcnn::Rng big(3);
  mcrcnn::McrcnnModel<float> wide(mcrcnn::ModelConfig{}, big);
  auto* w = find_param(wide.parameters(), "bcnn.deep01.weight");
  REQUIRE(w != nullptr);
  const double expect_sd = std::sqrt(2.0 / (64.0 * 9.0));
  const double got_sd =
      std::sqrt(w->value.cast<double>().array().square().mean());
  CHECK(std::abs(got_sd - expect_sd) / expect_sd < 0.05);
}

TEST_CASE("stage forwards produce the contracted shapes and ranges") {
  mcrcnn::Rng rng(5);
  mcrcnn::McrcnnModel<float> model(tiny_config(), rng);
  auto f = testutil::random_tensor<float>(mcrcnn::Shape(2, 3, 12, 16), rng, 0.0f, 1.0f);

  auto residual = model.bcnn_forward(f, mcrcnn::Mode::kTrain);
  CHECK(residual.shape() == f.shape());

  auto b = mcrcnn::approx_background(f, residual);
  CHECK(testutil::max_abs_diff(mcrcnn::add(b, residual), f) < 1e-6f);

  mcrcnn::Rng drop(6);
  auto guidance = model.rpm_forward(residual, mcrcnn::Mode::kInfer, drop);
  CHECK(guidance.shape() == mcrcnn::Shape(2, 1, 12, 16));
  CHECK(guidance.array().minCoeff() >= 0.0f);
  CHECK(guidance.array().maxCoeff() <= 1.0f);

  auto prob = model.scnn_forward(f, guidance, mcrcnn::Mode::kInfer);
  CHECK(prob.shape() == mcrcnn::Shape(2, 1, 12, 16));
  CHECK(prob.array().minCoeff() > 0.0f);
  CHECK(prob.array().maxCoeff() < 1.0f);
}

TEST_CASE("degenerate weights give the expected closed-form outputs") {
  mcrcnn::Rng rng(7);
  mcrcnn::McrcnnModel<float> model(tiny_config(), rng);
  auto f = testutil::random_tensor<float>(mcrcnn::Shape(1, 3, 10, 10), rng, 0.0f, 1.0f);

  SUBCASE("all-zero weights make the residual exactly zero") {
    for (auto* p : model.bcnn_parameters()) p->value.fill(0.0f);
    // Re-impose the affine normalization defaults the zero-fill clobbered.
    for (auto* p : model.bcnn_parameters()) {
      if (p->name.find(".bn.gamma") != std::string::npos) p->value.fill(1.0f);
    }
    auto residual = model.bcnn_forward(f, mcrcnn::Mode::kTrain);
    CHECK(residual.array().abs().maxCoeff() == 0.0f);
    // Background then reconstructs the frame bit for bit.
    CHECK(mcrcnn::approx_background(f, residual).same_bits(f));
  }

  SUBCASE("an all-zero residual yields an all-zero guidance map") {
    mcrcnn::Tensor<float> zeros(f.shape());
    mcrcnn::Rng drop(8);
    auto guidance = model.rpm_forward(zeros, mcrcnn::Mode::kInfer, drop);
    CHECK(guidance.array().abs().maxCoeff() == 0.0f);
  }

  SUBCASE("a zeroed segmentation head answers one half everywhere") {
    auto params = model.theta2_parameters();
    find_param(params, "scnn.fuse.weight")->value.fill(0.0f);
    find_param(params, "scnn.fuse.bias")->value.fill(0.0f);
    mcrcnn::Tensor<float> guidance(mcrcnn::Shape(1, 1, 10, 10), 0.3f);
    auto prob = model.scnn_forward(f, guidance, mcrcnn::Mode::kInfer);
    CHECK(testutil::max_abs_diff(prob, mcrcnn::Tensor<float>(prob.shape(), 0.5f)) == 0.0f);
  }
}

TEST_CASE("inference requires trained normalization statistics") {
  mcrcnn::Rng rng(9);
  mcrcnn::McrcnnModel<float> model(tiny_config(), rng);
  auto f = testutil::random_tensor<float>(mcrcnn::Shape(1, 3, 9, 9), rng, 0.0f, 1.0f);

  CHECK_THROWS_AS(model.bcnn_forward(f, mcrcnn::Mode::kInfer), mcrcnn::NumericError);
  CHECK_THROWS_AS(model.infer_prob(f), mcrcnn::NumericError);

  model.bcnn_forward(f, mcrcnn::Mode::kTrain);  // populates running statistics
  CHECK_NOTHROW(model.bcnn_forward(f, mcrcnn::Mode::kInfer));
  auto p1 = model.infer_prob(f);
  auto p2 = model.infer_prob(f);
  CHECK(p1.same_bits(p2));
  CHECK(p1.shape() == mcrcnn::Shape(1, 1, 9, 9));
}

TEST_CASE("second-phase updates leave the first stage bitwise untouched") {
  mcrcnn::Rng rng(21);
  mcrcnn::McrcnnModel<float> model(tiny_config(), rng);
  auto f = testutil::random_tensor<float>(mcrcnn::Shape(1, 3, 12, 12), rng, 0.0f, 1.0f);
  auto target = testutil::random_tensor<float>(mcrcnn::Shape(1, 1, 12, 12), rng, 0.0f, 1.0f);
  mcrcnn::Tensor<float> mask(target.shape(), 1.0f);
  for (std::int64_t i = 0; i < target.size(); ++i) target[i] = target[i] > 0.5f ? 1.0f : 0.0f;

  model.bcnn_forward(f, mcrcnn::Mode::kTrain);  // warm the running statistics
  std::vector<mcrcnn::Tensor<float>> snap;
  for (auto* p : model.bcnn_parameters()) snap.push_back(p->value);

  model.set_bcnn_trainable(false);
  auto theta2 = model.theta2_parameters();
  mcrcnn::AdamState<float> opt(theta2);
  mcrcnn::Rng drop(22);
  for (int step = 0; step < 3; ++step) {
    auto residual = model.bcnn_forward(f, mcrcnn::Mode::kInfer);
    mcrcnn::Tape<float> t(mcrcnn::Mode::kTrain);
    auto guidance = model.rpm(t, t.leaf(residual), drop);
    auto prob = model.scnn(t, t.leaf(f), guidance);
    auto loss = t.segmentation_loss(prob, target, mask);
    model.zero_grad();
    t.backward(loss);
    mcrcnn::adam_step(theta2, opt);
  }

  auto theta1 = model.bcnn_parameters();
  for (std::size_t i = 0; i < theta1.size(); ++i) {
    CHECK(theta1[i]->value.same_bits(snap[i]));
  }
  bool theta2_moved = false;
  for (auto* p : theta2) {
    if (p->value.array().abs().maxCoeff() > 0.0f && p->grad.array().abs().maxCoeff() > 0.0f) {
      theta2_moved = true;
      break;
    }
  }
  CHECK(theta2_moved);
  model.set_bcnn_trainable(true);
}

TEST_CASE("first-stage training loss gradients agree with finite differences") {
  mcrcnn::Rng rng(31);
  mcrcnn::McrcnnModel<double> model(tiny_config(), rng);
  auto f = testutil::random_tensor<double>(mcrcnn::Shape(2, 3, 7, 7), rng, 0.0, 1.0);
  auto s = testutil::random_tensor<double>(f.shape(), rng, 0.0, 1.0);

  model.zero_grad();
  {
    mcrcnn::Tape<double> t(mcrcnn::Mode::kTrain);
    auto fn = t.leaf(f);
    auto b = t.sub(fn, model.bcnn(t, fn));
    t.backward(t.background_loss(b, s));
  }

  auto loss_value = [&]() {
    mcrcnn::Tape<double> t(mcrcnn::Mode::kTrain);
    auto fn = t.leaf(f);
    auto b = t.sub(fn, model.bcnn(t, fn));
    return t.value(t.background_loss(b, s))[0];
  };

  for (auto* p : model.bcnn_parameters()) {
    if (norm_absorbed_bias(p->name, model.config().norm_interval)) {
      CHECK(p->grad.array().abs().maxCoeff() < 1e-12);
      continue;
    }
    auto res = mcrcnn::finite_diff_gradcheck(loss_value, p->value, p->grad, 1e-5, 40);
    INFO("parameter ", p->name, ": ", res.message, " worst analytic ", res.worst_analytic,
         " numeric ", res.worst_numeric);
    CHECK(res.finite);
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("second-phase loss gradients agree with finite differences") {
  mcrcnn::Rng rng(41);
  mcrcnn::McrcnnModel<double> model(tiny_config(), rng);
  auto f = testutil::random_tensor<double>(mcrcnn::Shape(1, 3, 8, 8), rng, 0.0, 1.0);
  auto residual = testutil::random_tensor<double>(f.shape(), rng, -0.5, 0.5);
  auto target = testutil::random_tensor<double>(mcrcnn::Shape(1, 1, 8, 8), rng, 0.0, 1.0);
  mcrcnn::Tensor<double> mask(target.shape(), 1.0);
  for (std::int64_t i = 0; i < target.size(); ++i) target[i] = target[i] > 0.5 ? 1.0 : 0.0;
  for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = (i % 7 == 0) ? 0.0 : 1.0;

  // The dropout mask must be identical across finite-difference evaluations,
  // so every forward replays the same stream.
  auto loss_value = [&]() {
    mcrcnn::Rng drop(97);
    mcrcnn::Tape<double> t(mcrcnn::Mode::kTrain);
    auto guidance = model.rpm(t, t.leaf(residual), drop);
    auto prob = model.scnn(t, t.leaf(f), guidance);
    return t.value(t.segmentation_loss(prob, target, mask))[0];
  };

  model.zero_grad();
  {
    mcrcnn::Rng drop(97);
    mcrcnn::Tape<double> t(mcrcnn::Mode::kTrain);
    auto guidance = model.rpm(t, t.leaf(residual), drop);
    auto prob = model.scnn(t, t.leaf(f), guidance);
    t.backward(t.segmentation_loss(prob, target, mask));
  }

  int checked = 0;
  for (auto* p : model.theta2_parameters()) {
    if (norm_absorbed_bias(p->name, model.config().norm_interval)) {
      CHECK(p->grad.array().abs().maxCoeff() < 1e-12);
      continue;
    }
    auto res = mcrcnn::finite_diff_gradcheck(loss_value, p->value, p->grad, 1e-5, 40);
    INFO("parameter ", p->name, ": ", res.message, " worst analytic ", res.worst_analytic,
         " numeric ", res.worst_numeric);
    CHECK(res.finite);
    CHECK(res.max_rel_err < 1e-3);
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("forward passes are bitwise deterministic for a fixed seed") {
  auto run = [](std::uint64_t seed) {
    mcrcnn::Rng rng(seed);
    mcrcnn::McrcnnModel<float> model(tiny_config(), rng);
    auto f = testutil::random_tensor<float>(mcrcnn::Shape(2, 3, 11, 13), rng, 0.0f, 1.0f);
    model.bcnn_forward(f, mcrcnn::Mode::kTrain);
    return model.infer_prob(f);
  };
  auto a = run(77), b = run(77);
  CHECK(a.same_bits(b));
}
