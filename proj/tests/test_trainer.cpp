#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "nuclearea/trainer.hpp"

using namespace nuclearea;

namespace {

NetworkParams<double> scalar_param(double w) {
  NetworkParams<double> p;
  p.names = {"w"};
  p.tensors.emplace_back(Shape{1}, w);
  return p;
}

ArchitectureConfig micro_config() {
  ArchitectureConfig c;
  c.num_classes = 2;
  c.patch_px = 16;
  c.narrow_width = 2;
  c.wide_width = 4;
  c.fc_width = 8;
  return c;
}

// Class 0: dark patches, class 1: bright patches, with per-pixel noise.
std::vector<PatchSample> toy_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PatchSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    Tensor<float> px({3, 16, 16});
    for (auto& v : px.values()) v = static_cast<float>((label ? 0.7 : 0.3) + 0.1 * rng.uniform(-1.0, 1.0));
    out.push_back({px, label, std::nullopt});
  }
  return out;
}

}  // namespace

TEST(LrSchedule, Examples) {
  const TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_schedule(0, cfg), 0.01);
  EXPECT_NEAR(lr_schedule(2000, cfg), 0.009, 1e-15);
  EXPECT_NEAR(lr_schedule(5000, cfg), 0.0081, 1e-15);
}

TEST(LrSchedule, PiecewiseConstantAndNonIncreasing) {
  const TrainConfig cfg;
  double prev = lr_schedule(0, cfg);
  for (std::size_t it = 1; it < 20000; it += 7) {
    const double lr = lr_schedule(it, cfg);
    EXPECT_LE(lr, prev);
    EXPECT_EQ(lr, lr_schedule((it / cfg.lr_step) * cfg.lr_step, cfg));
    prev = lr;
  }
}

TEST(SgdStep, ZeroGradientZeroDecayIsNoOp) {
  auto p = scalar_param(0.37);
  auto g = p.zeros_like();
  sgd_step(p, g, 0.1, 0.9, 0.0);
  EXPECT_EQ(p.tensors[0][0], 0.37);
}

TEST(SgdStep, HandIteratedMomentum) {
  auto p = scalar_param(1.0);
  auto g = scalar_param(1.0);
  sgd_step(p, g, 0.1, 0.9, 0.0);
  EXPECT_NEAR(p.velocity[0][0], -0.1, 1e-15);
  EXPECT_NEAR(p.tensors[0][0], 0.9, 1e-15);
  sgd_step(p, g, 0.1, 0.9, 0.0);
  EXPECT_NEAR(p.velocity[0][0], -0.19, 1e-15);
  EXPECT_NEAR(p.tensors[0][0], 0.71, 1e-15);
}

TEST(SgdStep, DecayOnly) {
  auto p = scalar_param(1.0);
  sgd_step(p, p.zeros_like(), 0.1, 0.9, 0.001);
  EXPECT_NEAR(p.tensors[0][0], 0.9999, 1e-15);
}

TEST(SgdStep, PlainGradientDescentWithoutMomentumOrDecay) {
  Rng rng(1);
  NetworkParams<float> p, g;
  p.names = g.names = {"a", "b"};
  for (Shape s : {Shape{4, 3}, Shape{5}}) {
    Tensor<float> w(s), d(s);
    for (auto& v : w.values()) v = static_cast<float>(rng.normal());
    for (auto& v : d.values()) v = static_cast<float>(rng.normal());
    p.tensors.push_back(w);
    g.tensors.push_back(d);
  }
  auto expected = p;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < p.tensors[i].size(); ++k)
      expected.tensors[i][k] = p.tensors[i][k] - 0.05f * g.tensors[i][k];
  sgd_step(p, g, 0.05, 0.0, 0.0);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE(p.tensors[i] == expected.tensors[i]);
}

TEST(SgdStep, ConvexQuadraticConvergesMonotonically) {
  // f(w) = 0.5 * k * (w - 3)^2, plain descent with lr < 1/k.
  const double k = 2.0, target = 3.0;
  auto p = scalar_param(-5.0);
  double prev = std::abs(p.tensors[0][0] - target);
  for (int i = 0; i < 100; ++i) {
    auto g = scalar_param(k * (p.tensors[0][0] - target));
    sgd_step(p, g, 0.3, 0.0, 0.0);
    const double gap = std::abs(p.tensors[0][0] - target);
    EXPECT_LE(gap, prev);
    prev = gap;
  }
  EXPECT_LT(prev, 1e-9);
}

TEST(SgdStep, NonFiniteGradientNamesTensor) {
  auto p = scalar_param(1.0);
  auto g = scalar_param(std::numeric_limits<double>::quiet_NaN());
  try {
    sgd_step(p, g, 0.1, 0.9, 0.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
  }
}

TEST(TrainConfigCheck, RejectsInvalid) {
  TrainConfig c;
  c.lr_factor = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainLoop, ZeroIterationsReturnsInitialParams) {
  const auto d = build_paper_architecture(micro_config());
  const auto init = init_params<float>(d, 1);
  TrainConfig cfg;
  cfg.max_iterations = 0;
  const VectorSource train(toy_samples(8, 1));
  const auto r = train_loop(d, init, train, toy_samples(4, 2), cfg);
  EXPECT_TRUE(r.history.empty());
  for (std::size_t i = 0; i < init.count(); ++i) EXPECT_TRUE(r.params.tensors[i] == init.tensors[i]);
}

TEST(TrainLoop, EmptyValidationRejected) {
  const auto d = build_paper_architecture(micro_config());
  TrainConfig cfg;
  cfg.max_iterations = 1;
  const VectorSource train(toy_samples(8, 1));
  EXPECT_THROW(train_loop(d, init_params<float>(d, 1), train, {}, cfg), DataError);
}

TEST(TrainLoop, ToyLossDescends) {
  const auto d = build_paper_architecture(micro_config());
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.max_iterations = 500;
  cfg.eval_interval = 100;
  cfg.patience_evals = 100;
  const VectorSource train(toy_samples(256, 3));
  const auto validation = toy_samples(64, 4);
  const auto init = init_params<float>(d, 2);
  const double before = validation_loss(d, init, validation);
  const auto r = train_loop(d, init, train, validation, cfg);
  ASSERT_EQ(r.history.size(), 5u);
  EXPECT_LT(r.history.back().train_loss, before);
  EXPECT_LT(r.best_val_loss, before);
  EXPECT_EQ(r.history[0].iteration, 100u);
}

TEST(TrainLoop, ReturnsBestSnapshotNotLastIterate) {
  const auto d = build_paper_architecture(micro_config());
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_iterations = 60;
  cfg.eval_interval = 10;
  cfg.patience_evals = 100;
  cfg.base_lr = 0.5;  // large steps make the validation loss non-monotone
  const VectorSource train(toy_samples(64, 5));
  const auto validation = toy_samples(16, 6);
  const auto r = train_loop(d, init_params<float>(d, 3), train, validation, cfg);
  EXPECT_DOUBLE_EQ(validation_loss(d, r.params, validation), r.best_val_loss);
  for (const auto& row : r.history) EXPECT_GE(row.val_loss, r.best_val_loss);
}

TEST(TrainLoop, PatienceStopsEarly) {
  const auto d = build_paper_architecture(micro_config());
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_iterations = 1000;
  cfg.eval_interval = 1;
  cfg.patience_evals = 2;
  cfg.base_lr = 1e-12;  // effectively frozen, so the loss cannot keep improving
  cfg.weight_decay = 0;
  const VectorSource train(toy_samples(16, 7));
  const auto r = train_loop(d, init_params<float>(d, 4), train, toy_samples(8, 8), cfg);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_LT(r.iterations, 1000u);
  EXPECT_EQ(r.history.size(), r.iterations);
}

TEST(TrainLoop, DeterministicForFixedThreadCount) {
  const auto d = build_paper_architecture(micro_config());
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_iterations = 20;
  cfg.eval_interval = 10;
  const VectorSource train(toy_samples(32, 9));
  const auto validation = toy_samples(8, 10);
  for (std::size_t threads : {1u, 3u}) {
    cfg.threads = threads;
    const auto a = train_loop(d, init_params<float>(d, 5), train, validation, cfg);
    const auto b = train_loop(d, init_params<float>(d, 5), train, validation, cfg);
    for (std::size_t i = 0; i < a.params.count(); ++i) EXPECT_TRUE(a.params.tensors[i] == b.params.tensors[i]);
  }
}
