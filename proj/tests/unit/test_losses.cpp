// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "msma/error.hpp"
#include "msma/fitting.hpp"
#include "msma/losses.hpp"
#include "msma/renderer.hpp"
#include "msma/rng.hpp"
#include "oracles.hpp"

namespace msma {
namespace {

Image random_image(int h, int w, Rng& rng) {
  Image im(h, w);
  for (double& v : im.data()) v = rng.uniform();
  return im;
}

SkinMask random_mask(int h, int w, Rng& rng) {
  SkinMask m(h, w);
  for (double& v : m.data()) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
  return m;
}

std::vector<std::uint8_t> random_coverage(std::size_t n, Rng& rng) {
  std::vector<std::uint8_t> c(n);
  for (auto& v : c) v = rng.uniform() < 0.7 ? 1 : 0;
  return c;
}

double photometric_oracle(const Image& t, const Image& r, const SkinMask& m,
                          const std::vector<std::uint8_t>& cov) {
  double num = 0.0, den = 0.0;
  for (int y = 0; y < t.height(); ++y)
    for (int x = 0; x < t.width(); ++x) {
      if (!cov[y * t.width() + x]) continue;
      const double d0 = r.at(y, x, 0) - t.at(y, x, 0);
      const double d1 = r.at(y, x, 1) - t.at(y, x, 1);
      const double d2 = r.at(y, x, 2) - t.at(y, x, 2);
      num += m.at(y, x) * std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
      den += m.at(y, x);
    }
  return num / den;
}

template <typename F>
void expect_image_gradient(const Image& grad, Image image, F value, double tol) {
  for (std::size_t i = 0; i < image.data().size(); ++i) {
    const double x0 = image.data()[i];
    image.data()[i] = x0 + 1e-6;
    const double fp = value(image);
    image.data()[i] = x0 - 1e-6;
    const double fm = value(image);
    image.data()[i] = x0;
    EXPECT_LT(oracle::relative_error(grad.data()[i], (fp - fm) / 2e-6), tol) << i;
  }
}

TEST(PhotometricLoss, MatchesOracleAndFiniteDifferences) {
  Rng rng(1);
  const Image t = random_image(6, 5, rng), r = random_image(6, 5, rng);
  const SkinMask m = random_mask(6, 5, rng);
  const auto cov = random_coverage(30, rng);
  const ImageLoss l = photometric_loss(t, r, m, cov);
  EXPECT_NEAR(l.value, photometric_oracle(t, r, m, cov), 1e-12);
  expect_image_gradient(l.grad, r, [&](const Image& x) { return photometric_loss(t, x, m, cov).value; },
                        1e-7);
}

TEST(PhotometricLoss, UnitResidualGivesSqrtThree) {
  const ImageLoss l = photometric_loss(Image(4, 4, 0.0), Image(4, 4, 1.0), SkinMask(4, 4, 1.0),
                                       std::vector<std::uint8_t>(16, 1));
  EXPECT_NEAR(l.value, std::sqrt(3.0), 1e-15);
  const ImageLoss z = photometric_loss(Image(4, 4, 0.5), Image(4, 4, 0.5), SkinMask(4, 4, 1.0),
                                       std::vector<std::uint8_t>(16, 1));
  EXPECT_EQ(z.value, 0.0);
  for (double g : z.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(PhotometricLoss, IgnoresPixelsOutsideMaskOrCoverage) {
  Rng rng(2);
  const Image t = random_image(5, 5, rng), r = random_image(5, 5, rng);
  SkinMask m = random_mask(5, 5, rng);
  m.at(0, 0) = 0.0;
  m.at(1, 1) = 0.7;
  auto cov = random_coverage(25, rng);
  cov[6] = 0;
  const double base = photometric_loss(t, r, m, cov).value;
  Image t2 = t;
  for (int c = 0; c < 3; ++c) {
    t2.at(0, 0, c) = 0.123 * (c + 1);
    t2.at(1, 1, c) = 0.456 * (c + 1);
  }
  EXPECT_EQ(photometric_loss(t2, r, m, cov).value, base);
}

TEST(PhotometricLoss, EmptyMaskIsDegenerate) {
  EXPECT_THROW(photometric_loss(Image(3, 3, 0.0), Image(3, 3, 1.0), SkinMask(3, 3, 0.0),
                                std::vector<std::uint8_t>(9, 1)),
               DegenerateError);
  EXPECT_THROW(photometric_loss(Image(3, 3, 0.0), Image(3, 3, 1.0), SkinMask(3, 3, 1.0),
                                std::vector<std::uint8_t>(9, 0)),
               DegenerateError);
  EXPECT_THROW(photometric_loss(Image(3, 3), Image(3, 4), SkinMask(3, 3, 1.0),
                                std::vector<std::uint8_t>(9, 1)),
               ShapeError);
}

TEST(PerceptualLoss, CosineOracleAndFiniteDifferences) {
  Rng rng(3);
  const AveragePoolEmbedder e(4);
  const Image t = random_image(9, 11, rng), r = random_image(9, 11, rng);
  const Eigen::VectorXd a = e.embed(t), b = e.embed(r);
  const ImageLoss l = perceptual_loss(e, t, r);
  EXPECT_NEAR(l.value, 1.0 - a.dot(b) / (a.norm() * b.norm()), 1e-14);
  expect_image_gradient(l.grad, r, [&](const Image& x) { return perceptual_loss(e, t, x).value; },
                        1e-7);
  EXPECT_NEAR(perceptual_loss(e, t, t).value, 0.0, 1e-14);
  Image scaled = t;
  for (double& v : scaled.data()) v *= 3.0;
  EXPECT_NEAR(perceptual_loss(e, t, scaled).value, 0.0, 1e-14);
  EXPECT_THROW(perceptual_loss(e, t, Image(9, 11, 0.0)), DegenerateError);
}

TEST(AveragePoolEmbedder, CellMeansOnUnevenGrid) {
  Image im(5, 5);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x)
      for (int c = 0; c < 3; ++c) im.at(y, x, c) = y * 5 + x + 100 * c;
  const Eigen::VectorXd e = AveragePoolEmbedder(2).embed(im);
  ASSERT_EQ(e.size(), 12);
  // Rows 0..2 and 2..4 overlap at row 2 (floor / ceil bounds).
  EXPECT_NEAR(e[0], (0 + 1 + 2 + 5 + 6 + 7 + 10 + 11 + 12) / 9.0, 1e-12);
  EXPECT_NEAR(e[3], (12 + 13 + 14 + 17 + 18 + 19 + 22 + 23 + 24) / 9.0, 1e-12);
  EXPECT_NEAR(e[4], e[0] + 100, 1e-12);
  EXPECT_THROW(AveragePoolEmbedder(0), ParameterError);
  EXPECT_THROW(AveragePoolEmbedder(8).embed(Image(4, 4)), ShapeError);
}

TEST(LandmarkLoss, WeightedMeanSquaredDistance) {
  const auto w = default_landmark_weights();
  for (int n = 0; n < kNumLandmarks; ++n) EXPECT_EQ(w[n], n >= 60 ? 20.0 : 1.0);
  const Points2 t = Points2::Zero(kNumLandmarks, 2);
  Points2 p = t;
  p(10, 0) = 3.0;
  p(10, 1) = 4.0;
  EXPECT_NEAR(landmark_loss(t, p, w).value, 25.0 / 68.0, 1e-15);
  p = t;
  p(62, 1) = -5.0;
  const LandmarkLoss l = landmark_loss(t, p, w);
  EXPECT_NEAR(l.value, 500.0 / 68.0, 1e-13);
  EXPECT_NEAR(l.grad(62, 1), 2.0 * 20.0 * -5.0 / 68.0, 1e-13);
  EXPECT_THROW(landmark_loss(Points2::Zero(3, 2), t, w), ShapeError);
}

TEST(LandmarkLoss, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  Points2 t(kNumLandmarks, 2), p(kNumLandmarks, 2);
  for (int i = 0; i < t.size(); ++i) {
    t.data()[i] = rng.normal(0, 30);
    p.data()[i] = rng.normal(0, 30);
  }
  const auto w = default_landmark_weights();
  const LandmarkLoss l = landmark_loss(t, p, w);
  for (int i = 0; i < p.size(); ++i) {
    Points2 a = p, b = p;
    a.data()[i] += 1e-2;  // quadratic, so central differences are exact
    b.data()[i] -= 1e-2;
    const double fd = (landmark_loss(t, a, w).value - landmark_loss(t, b, w).value) / 2e-2;
    EXPECT_LT(oracle::relative_error(l.grad.data()[i], fd), 1e-7);
  }
}

TEST(CoefficientRegularization, UnitVectorsGiveTheirWeights) {
  const LossWeights w;
  const auto e1 = [](int n) { return Eigen::VectorXd::Unit(n, 0); };
  const Eigen::VectorXd za = Eigen::VectorXd::Zero(80), zb = Eigen::VectorXd::Zero(64);
  EXPECT_NEAR(coefficient_regularization(e1(80), zb, za, w).value, 1.0, 1e-12);
  EXPECT_NEAR(coefficient_regularization(za, e1(64), za, w).value, 0.8, 1e-12);
  EXPECT_NEAR(coefficient_regularization(za, zb, e1(80), w).value, 0.017, 1e-12);
  Rng rng(5);
  Eigen::VectorXd a(80), b(64), g(80);
  for (double& v : a) v = rng.normal();
  for (double& v : b) v = rng.normal();
  for (double& v : g) v = rng.normal();
  const RegularizationLoss l = coefficient_regularization(a, b, g, w);
  EXPECT_NEAR(l.value, a.squaredNorm() + 0.8 * b.squaredNorm() + 0.017 * g.squaredNorm(), 1e-12);
  EXPECT_TRUE(l.grad_alpha.isApprox(2.0 * a, 1e-14));
  EXPECT_TRUE(l.grad_beta.isApprox(1.6 * b, 1e-14));
  EXPECT_TRUE(l.grad_gamma.isApprox(0.034 * g, 1e-14));
}

TEST(ReflectanceLoss, TwoPassOracleAndFiniteDifferences) {
  Rng rng(6);
  Vertices t(30, 3);
  for (int i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform();
  std::vector<std::uint8_t> skin(30);
  for (auto& s : skin) s = rng.uniform() < 0.6 ? 1 : 0;
  skin[0] = 1;
  Eigen::RowVector3d mean = Eigen::RowVector3d::Zero();
  int n = 0;
  for (int v = 0; v < 30; ++v)
    if (skin[v]) mean += t.row(v), ++n;
  mean /= n;
  double oracle_value = 0.0;
  for (int v = 0; v < 30; ++v)
    if (skin[v]) oracle_value += (t.row(v) - mean).squaredNorm();
  oracle_value /= n;
  const TextureLoss l = reflectance_loss(t, skin);
  EXPECT_NEAR(l.value, oracle_value, 1e-14);
  for (int i = 0; i < t.size(); ++i) {
    Vertices a = t, b = t;
    a.data()[i] += 1e-6;
    b.data()[i] -= 1e-6;
    const double fd = (reflectance_loss(a, skin).value - reflectance_loss(b, skin).value) / 2e-6;
    EXPECT_LT(oracle::relative_error(l.grad.data()[i], fd), 1e-8);
  }
  EXPECT_THROW(reflectance_loss(t, std::vector<std::uint8_t>(30, 0)), DegenerateError);
  EXPECT_THROW(reflectance_loss(t, std::vector<std::uint8_t>(3, 1)), ShapeError);
}

struct TotalFixture : ::testing::Test {
  FaceBasis basis = synthetic_basis(21, 300);
  CameraModel camera = CameraModel::for_image(48, 48);
  FaceCoefficients truth, guess;
  FitTarget target;
  AveragePoolEmbedder embedder;

  void SetUp() override {
    Rng rng(21);
    truth = default_initialization(basis, camera);
    for (double& v : truth.alpha) v = rng.normal(0, 2);
    for (double& v : truth.gamma) v = rng.normal(0, 0.3);
    const RenderedFace r = render_face(truth, basis, camera);
    target.image = r.framebuffer.color;
    target.landmarks = project_landmarks(truth, basis, camera);
    target.mask = SkinMask(48, 48, 1.0);
    guess = truth;
    for (double& v : guess.alpha) v += rng.normal(0, 1);
    for (double& v : guess.gamma) v += rng.normal(0, 0.2);
    guess.delta[0] += 0.1;
    guess.translation += Eigen::Vector3d(1.0, -2.0, 5.0);
  }
};

TEST_F(TotalFixture, BreakdownIsSelfConsistent) {
  const LossWeights w;
  const TotalLoss l = total_loss(guess, target, basis, camera, w, embedder);
  ASSERT_EQ(l.breakdown.terms.size(), 5u);
  const char* names[] = {"pho", "per", "lmk", "3dmm", "refl"};
  double sum = 0.0;
  for (int k = 0; k < 5; ++k) {
    const LossTerm& t = l.breakdown.terms[k];
    EXPECT_EQ(t.name, names[k]);
    EXPECT_EQ(t.weighted, t.lambda * t.unweighted);
    EXPECT_GT(t.unweighted, 0.0);
    sum += t.weighted;
  }
  EXPECT_NEAR(l.value(), sum, 1e-14);
  const nlohmann::json j = l.breakdown.to_json();
  EXPECT_EQ(j["total"].get<double>(), l.value());
  EXPECT_EQ(j["3dmm"]["lambda"].get<double>(), 3e-4);

  const TotalLoss no_grad = total_loss(guess, target, basis, camera, w, embedder, false);
  EXPECT_EQ(no_grad.value(), l.value());
  EXPECT_TRUE(no_grad.gradient.pack().isZero(0.0));
}

TEST_F(TotalFixture, LambdaScalingIsLinear) {
  LossWeights w;
  const TotalLoss a = total_loss(guess, target, basis, camera, w, embedder);
  w.lambda_lmk *= 3.0;
  w.lambda_refl *= 0.5;
  const TotalLoss b = total_loss(guess, target, basis, camera, w, embedder);
  EXPECT_NEAR(b.breakdown.terms[2].weighted, 3.0 * a.breakdown.terms[2].weighted, 1e-12);
  EXPECT_NEAR(b.breakdown.terms[4].weighted, 0.5 * a.breakdown.terms[4].weighted, 1e-12);
  EXPECT_EQ(b.breakdown.terms[0].weighted, a.breakdown.terms[0].weighted);
}

TEST_F(TotalFixture, ZeroLambdaTermsAreSkipped) {
  LossWeights w;
  w.lambda_pho = 0.0;
  w.lambda_per = 0.0;
  target.mask = SkinMask(48, 48, 0.0);
  target.image = Image(48, 48, 0.0);  // would make both image terms degenerate
  const TotalLoss l = total_loss(guess, target, basis, camera, w, embedder);
  EXPECT_EQ(l.breakdown.terms[0].unweighted, 0.0);
  EXPECT_EQ(l.breakdown.terms[1].unweighted, 0.0);
  w.lambda_pho = 1.0;
  EXPECT_THROW(total_loss(guess, target, basis, camera, w, embedder), DegenerateError);
  w.lambda_pho = -1.0;
  EXPECT_THROW(total_loss(guess, target, basis, camera, w, embedder), ParameterError);
}

TEST_F(TotalFixture, SmoothTermGradientMatchesFiniteDifferences) {
  LossWeights w;
  w.lambda_pho = 0.0;
  w.lambda_per = 0.0;
  const TotalLoss l = total_loss(guess, target, basis, camera, w, embedder);
  const Eigen::VectorXd x = guess.pack(), g = l.gradient.pack();
  for (int i = 0; i < x.size(); i += 7) {
    Eigen::VectorXd a = x, b = x;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double fd = (total_loss(FaceCoefficients::unpack(a), target, basis, camera, w, embedder, false)
                           .value() -
                       total_loss(FaceCoefficients::unpack(b), target, basis, camera, w, embedder, false)
                           .value()) /
                      2e-6;
    EXPECT_LT(oracle::relative_error(g[i], fd), 1e-6) << i;
  }
}

TEST_F(TotalFixture, ImageTermGradientOnAppearanceCoefficients) {
  const LossWeights w;
  const TotalLoss l = total_loss(guess, target, basis, camera, w, embedder);
  const PackedLayout L(basis.dims());
  const Eigen::VectorXd x = guess.pack(), g = l.gradient.pack();
  for (int i : {L.gamma, L.gamma + 5, L.gamma + 60, L.delta, L.delta + 2, L.delta + 7}) {
    Eigen::VectorXd a = x, b = x;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double fd = (total_loss(FaceCoefficients::unpack(a), target, basis, camera, w, embedder, false)
                           .value() -
                       total_loss(FaceCoefficients::unpack(b), target, basis, camera, w, embedder, false)
                           .value()) /
                      2e-6;
    EXPECT_LT(oracle::relative_error(g[i], fd), 1e-5) << i;
  }
}

}  // namespace
}  // namespace msma
