// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "msma/error.hpp"
#include "msma/fitting.hpp"
#include "msma/renderer.hpp"
#include "msma/rng.hpp"
#include "oracles.hpp"

namespace msma {
namespace {

struct FitFixture : ::testing::Test {
  FaceBasis basis = synthetic_basis(31, 300);
  CameraModel camera = CameraModel::for_image(48, 48);
  AveragePoolEmbedder embedder;
  FaceCoefficients truth;
  FitTarget target;

  void SetUp() override {
    Rng rng(31);
    truth = default_initialization(basis, camera);
    for (double& v : truth.alpha) v = rng.normal(0, 2);
    for (double& v : truth.beta) v = rng.normal(0, 1);
    for (double& v : truth.gamma) v = rng.normal(0, 0.3);
    truth.rotation = {0.05, -0.1, 0.02};
    const RenderedFace r = render_face(truth, basis, camera);
    target.image = r.framebuffer.color;
    target.landmarks = project_landmarks(truth, basis, camera);
    target.mask = SkinMask(48, 48, 1.0);
  }

  static double shape_norm(const FaceCoefficients& c) {
    return std::sqrt(c.alpha.squaredNorm() + c.beta.squaredNorm() + c.gamma.squaredNorm());
  }

  FitConfig prior_only() const {
    FitConfig cfg;
    LossWeights& w = cfg.loss_weights;
    w.lambda_pho = w.lambda_per = w.lambda_lmk = w.lambda_refl = 0.0;
    cfg.convergence_tolerance = 0.0;
    return cfg;
  }
};

TEST(LrSchedule, StepDecayAndMonotone) {
  const FitConfig cfg;
  EXPECT_EQ(lr_schedule(0, cfg), 4e-4);
  EXPECT_EQ(lr_schedule(199, cfg), 4e-4);
  EXPECT_EQ(lr_schedule(200, cfg), 2e-4);
  EXPECT_EQ(lr_schedule(600, cfg), 5e-5);
  for (int i = 1; i < 2000; ++i) EXPECT_LE(lr_schedule(i, cfg), lr_schedule(i - 1, cfg));
  EXPECT_THROW(lr_schedule(-1, cfg), ParameterError);
}

TEST(FitConfig, Validation) {
  FitConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), ParameterError);
  EXPECT_NO_THROW(cfg.validate(true));
  cfg = FitConfig{};
  cfg.lr_decay_factor = 1.5;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = FitConfig{};
  cfg.max_iterations = -1;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = FitConfig{};
  cfg.loss_weights.lambda_lmk = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(cfg.validate(), ParameterError);
}

TEST(Adam, ReachesQuadraticMinimum) {
  // f(x) = |x - x*|^2 in 239 dimensions from zero; the step is bounded by the
  // rate, so the probe runs at 1e-2 (4e-4 travels at most 0.8 in 2000 steps).
  Rng rng(2);
  Eigen::VectorXd target(239);
  for (double& v : target) v = rng.normal();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(239);
  Adam adam(239);
  for (int it = 0; it < 2000; ++it) adam.step(x, 2.0 * (x - target), 1e-2);
  EXPECT_LT((x - target).norm(), 1e-4);
  EXPECT_EQ(adam.steps_taken(), 2000);
  EXPECT_THROW(adam.step(x, Eigen::VectorXd::Zero(3), 1e-2), ShapeError);
}

TEST(Adam, FirstStepMovesByTheRate) {
  Adam adam(3);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(3);
  adam.step(x, Eigen::Vector3d(2.0, -5.0, 0.0), Eigen::Vector3d(0.1, 0.2, 0.3));
  EXPECT_NEAR(x[0], -0.1, 1e-8);
  EXPECT_NEAR(x[1], 0.2, 1e-8);
  EXPECT_EQ(x[2], 0.0);
}

TEST_F(FitFixture, GroundTruthIsAFixedPointOfTheDataTerms) {
  FitConfig cfg;
  cfg.max_iterations = 10;
  const FitResult with_prior = fit_coefficients(target, basis, camera, cfg, embedder, truth);
  const LossWeights& w = cfg.loss_weights;
  const RegularizationLoss reg = coefficient_regularization(truth.alpha, truth.beta, truth.gamma, w);
  const TextureLoss refl = reflectance_loss(synthesize_texture(basis, truth.gamma), basis.skin);
  EXPECT_NEAR(with_prior.trace.records[0].total,
              w.lambda_3dmm * reg.value + w.lambda_refl * refl.value, 1e-12);

  cfg.loss_weights.lambda_3dmm = 0.0;
  cfg.loss_weights.lambda_refl = 0.0;
  const FitResult r = fit_coefficients(target, basis, camera, cfg, embedder, truth);
  EXPECT_LT(r.trace.records[0].total, 1e-12);
  EXPECT_LT((r.coefficients.pack() - truth.pack()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST_F(FitFixture, ZeroIterationsReturnsTheInitialisation) {
  FitConfig cfg;
  cfg.max_iterations = 0;
  const FitResult r = fit_coefficients(target, basis, camera, cfg, embedder, truth);
  EXPECT_EQ(r.coefficients, truth);
  EXPECT_TRUE(r.trace.records.empty());
}

TEST_F(FitFixture, TraceIsOrderedFiniteAndDeterministic) {
  FitConfig cfg;
  cfg.max_iterations = 40;
  const FitResult a = fit_coefficients(target, basis, camera, cfg, embedder);
  const FitResult b = fit_coefficients(target, basis, camera, cfg, embedder);
  ASSERT_EQ(a.trace.records.size(), 40u);
  for (std::size_t i = 0; i < a.trace.records.size(); ++i) {
    const FitRecord& ra = a.trace.records[i];
    EXPECT_EQ(ra.iteration, static_cast<int>(i));
    EXPECT_TRUE(std::isfinite(ra.total) && std::isfinite(ra.gradient_norm));
    EXPECT_EQ(ra.total, b.trace.records[i].total);
    EXPECT_EQ(ra.gradient_norm, b.trace.records[i].gradient_norm);
    EXPECT_EQ(ra.learning_rate, lr_schedule(ra.iteration, cfg));
  }
  EXPECT_EQ(a.coefficients, b.coefficients);
  EXPECT_LT(a.trace.records.back().total, a.trace.records.front().total);
}

TEST_F(FitFixture, StopsWhenTheLossSettles) {
  FitConfig cfg = prior_only();
  cfg.convergence_tolerance = 1e300;  // every change counts as settled
  const FitResult r = fit_coefficients(target, basis, camera, cfg, embedder, truth);
  EXPECT_EQ(r.trace.records.size(), 11u);
}

TEST_F(FitFixture, PriorOnlyFitShrinksCoefficientsTowardZero) {
  // Adam's momentum overshoots zero, so the norm is not monotone step by
  // step; its envelope sampled every 25 iterations is. With a constant rate
  // the norm crosses 1e-8; the default decay freezes it around 1e-3.
  FitConfig cfg = prior_only();
  cfg.lr_decay_factor = 1.0;
  FaceCoefficients init = truth;
  double previous = shape_norm(init);
  bool crossed = false;
  for (int k = 25; k <= 1000 && !crossed; k += 25) {
    cfg.max_iterations = k;
    const double n = shape_norm(fit_coefficients(target, basis, camera, cfg, embedder, init).coefficients);
    EXPECT_LT(n, previous) << "after " << k << " iterations";
    previous = n;
    crossed = n < 1e-8;
  }
  EXPECT_TRUE(crossed);

  FitConfig decayed = prior_only();
  decayed.max_iterations = 600;
  const FitResult r = fit_coefficients(target, basis, camera, decayed, embedder, init);
  EXPECT_LT(shape_norm(r.coefficients), 1e-2 * shape_norm(init));
  EXPECT_EQ(r.coefficients.translation, init.translation);
  EXPECT_EQ(r.coefficients.delta, init.delta);
}

TEST_F(FitFixture, OverflowingLossDiverges) {
  FitConfig cfg;
  cfg.max_iterations = 5;
  FaceCoefficients huge = truth;
  huge.alpha[0] = 1e200;  // the prior overflows to infinity
  cfg.loss_weights = prior_only().loss_weights;
  try {
    fit_coefficients(target, basis, camera, cfg, embedder, huge);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_TRUE(e.trace().records.empty());
  }
}

TEST_F(FitFixture, RejectsMismatchedTargets) {
  FitConfig cfg;
  FitTarget bad = target;
  bad.image = Image(32, 32);
  EXPECT_THROW(fit_coefficients(bad, basis, camera, cfg, embedder), ShapeError);
  bad = target;
  bad.image.at(5, 5, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(fit_coefficients(bad, basis, camera, cfg, embedder), ParameterError);
  bad = target;
  bad.mask.at(0, 0) = 1.5;
  EXPECT_THROW(fit_coefficients(bad, basis, camera, cfg, embedder), ParameterError);
  bad = target;
  bad.landmarks(3, 0) = -4.0;
  EXPECT_THROW(fit_coefficients(bad, basis, camera, cfg, embedder), ParameterError);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(fit_coefficients(target, basis, camera, cfg, embedder), ParameterError);
}

struct TrainFixture : FitFixture {
  CameraModel small = CameraModel::for_image(32, 32);
  std::vector<FitTarget> batch;
  NetworkParams params;

  void SetUp() override {
    FitFixture::SetUp();
    FitTarget t;
    t.image = render_face(truth, basis, small).framebuffer.color;
    t.landmarks = project_landmarks(truth, basis, small);
    t.mask = SkinMask(32, 32, 1.0);
    batch = {t};
    params = init_network({}, 5, default_initialization(basis, small));
  }
};

TEST_F(TrainFixture, ZeroRateLeavesParametersBitwise) {
  FitConfig cfg;
  cfg.learning_rate = 0.0;
  const NetworkParams before = params;
  TrainState state = make_train_state(params, cfg);
  train_step(params, state, batch, basis, small, cfg, embedder);
  std::vector<Tensor4> a, b;
  for_each_parameter(before, [&](const std::string&, const Tensor4& t) { a.push_back(t); });
  for_each_parameter(params, [&](const std::string&, const Tensor4& t) { b.push_back(t); });
  EXPECT_EQ(a, b);
  EXPECT_EQ(state.step, 1);
}

TEST_F(TrainFixture, IdenticalSamplesHaveIdenticalLosses) {
  const std::vector<FitTarget> twice{batch[0], batch[0]};
  const BatchLoss l = evaluate_batch(params, twice, basis, small, {}, embedder);
  ASSERT_EQ(l.per_sample.size(), 2u);
  EXPECT_EQ(l.per_sample[0], l.per_sample[1]);
  EXPECT_EQ(l.mean, l.per_sample[0]);
}

TEST_F(TrainFixture, SmallStepDescends) {
  FitConfig cfg;
  cfg.learning_rate = 1e-6;
  TrainState state = make_train_state(params, cfg);
  const BatchLoss before = train_step(params, state, batch, basis, small, cfg, embedder);
  const BatchLoss after = evaluate_batch(params, batch, basis, small, cfg.loss_weights, embedder);
  EXPECT_LT(after.mean, before.mean);
}

TEST_F(TrainFixture, RejectsBadBatches) {
  FitConfig cfg;
  TrainState state = make_train_state(params, cfg);
  EXPECT_THROW(train_step(params, state, {}, basis, small, cfg, embedder), ParameterError);
  TrainState wrong;
  EXPECT_THROW(train_step(params, wrong, batch, basis, small, cfg, embedder), StateError);
  cfg.loss_weights = prior_only().loss_weights;
  params.heads.alpha.bias[0] = 1e200;  // the prior overflows to infinity
  EXPECT_THROW(train_step(params, state, batch, basis, small, cfg, embedder), DivergenceError);
}

}  // namespace
}  // namespace msma
