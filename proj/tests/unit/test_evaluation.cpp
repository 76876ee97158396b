// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "msma/error.hpp"
#include "msma/evaluation.hpp"
#include "msma/rng.hpp"
#include "oracles.hpp"

namespace msma {
namespace {

Mesh transformed(const Mesh& m, const AlignTransform& t) {
  return {t.apply(m.vertices), m.triangles};
}

AlignTransform similarity(double degrees_y, double scale, Eigen::Vector3d translation) {
  AlignTransform t;
  t.rotation =
      Eigen::AngleAxisd(degrees_y * std::numbers::pi / 180.0, Eigen::Vector3d::UnitY()).toRotationMatrix();
  t.scale = scale;
  t.translation = translation;
  return t;
}

Mesh centred_surface(int n, std::uint64_t seed, double amplitude) {
  Rng rng(seed);
  Mesh m = oracle::random_surface(n, rng, 1.0, amplitude);
  const Eigen::RowVector3d c = m.vertices.colwise().mean();
  m.vertices.rowwise() -= c;
  return m;
}

// Face-sized bump (+-40 mm) with fine relief on a strongly jittered grid.
// Regular sampling would let nearest-vertex matches lock onto grid offsets.
Mesh bump_surface(std::uint64_t seed) {
  Rng rng(seed);
  const int n = 33;
  Mesh m = oracle::random_surface(n, rng, 2.5, 0.0);
  for (int i = 0; i < m.num_vertices(); ++i) {
    const double x = m.vertices(i, 0) - 40.0 + rng.uniform(-1.2, 1.2);
    const double y = 1.2 * (m.vertices(i, 1) - 40.0) + rng.uniform(-1.2, 1.2);
    m.vertices.row(i) << x, y,
        30.0 * std::exp(-(x * x + 0.5 * y * y) / 800.0) + 3.0 * std::sin(x / 7.0) * std::cos(y / 9.0);
  }
  return m;
}

TEST(Icp, IdentityAndPureTranslation) {
  const Mesh m = bump_surface(1);
  const IcpResult id = icp_align(m, m);
  EXPECT_TRUE(id.transform.rotation.isIdentity(1e-12));
  EXPECT_EQ(id.residuals.front(), 0.0);

  AlignTransform shift;
  shift.translation = {5.0, 0.0, 0.0};
  const Mesh source = transformed(m, shift.inverse());  // target = source + (5, 0, 0)
  const IcpResult r = icp_align(source, m);
  EXPECT_LT((r.transform.translation - Eigen::Vector3d(5, 0, 0)).norm(), 1e-8);
  EXPECT_NEAR(r.transform.scale, 1.0, 1e-10);
  EXPECT_LT(r.residuals.back(), 1e-8);
}

TEST(Icp, RecoversRotationAndScale) {
  const Mesh target = bump_surface(2);
  const AlignTransform truth = similarity(10.0, 1.05, {0.3, -0.2, 0.1});
  const Mesh source = transformed(target, truth.inverse());
  const IcpResult r = icp_align(source, target);
  EXPECT_LT((r.transform.rotation - truth.rotation).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(r.transform.scale, 1.05, 1e-6);
  EXPECT_LT((r.transform.translation - truth.translation).norm(), 1e-6);
  for (std::size_t i = 1; i < r.residuals.size(); ++i) EXPECT_LE(r.residuals[i], r.residuals[i - 1]);
  EXPECT_LT(r.residuals.back(), 1e-6);

  IcpOptions rigid;
  rigid.allow_scale = false;
  EXPECT_EQ(icp_align(source, target, rigid).transform.scale, 1.0);
}

TEST(Icp, RejectsDegenerateInputs) {
  const Mesh m = centred_surface(4, 3, 0.1);
  EXPECT_THROW(icp_align(Mesh{}, m), AlignmentError);
  Mesh point;
  point.vertices = Vertices::Ones(5, 3);
  EXPECT_THROW(icp_align(point, m), AlignmentError);
}

TEST(AlignTransform, InverseRoundTrip) {
  const AlignTransform t = similarity(33.0, 0.7, {1, 2, 3});
  const Mesh m = centred_surface(5, 4, 0.5);
  EXPECT_TRUE(t.inverse().apply(t.apply(m.vertices)).isApprox(m.vertices, 1e-12));
}

TEST(Crop, MatchesBruteForceFilter) {
  const Mesh ico = oracle::icosahedron(1.0);
  const Mesh c = crop_by_radius(ico, 0, 1.2);
  int expected = 0;
  for (int i = 0; i < 12; ++i) expected += (ico.vertices.row(i) - ico.vertices.row(0)).norm() <= 1.2;
  EXPECT_EQ(c.num_vertices(), expected);
  EXPECT_EQ(c.num_vertices(), 6);
  EXPECT_EQ(c.triangles.size(), 5u);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.vertices.row(0), ico.vertices.row(0));

  const Mesh all = crop_by_radius(ico, 3, std::numeric_limits<double>::infinity());
  EXPECT_EQ(all.vertices, ico.vertices);
  EXPECT_EQ(all.triangles, ico.triangles);

  EXPECT_THROW(crop_by_radius(ico, 0, 0.1), CropError);
  EXPECT_EQ(crop_by_radius(ico, 0, 0.1, false).num_vertices(), 1);
  EXPECT_THROW(crop_by_radius(ico, 12, 1.0), ParameterError);
}

TEST(ClosestPoint, MatchesOracleAndBarycentrics) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::Vector3d p, a, b, c;
    for (Eigen::Vector3d* v : {&p, &a, &b, &c})
      for (int k = 0; k < 3; ++k) (*v)[k] = rng.normal(0, 2);
    const TrianglePoint t = closest_point_on_triangle(p, a, b, c);
    EXPECT_LT((t.point - oracle::closest_on_triangle(p, a, b, c)).norm(), 1e-9);
    EXPECT_NEAR(t.bary.sum(), 1.0, 1e-12);
    EXPECT_GE(t.bary.minCoeff(), -1e-12);
    EXPECT_LT((t.bary[0] * a + t.bary[1] * b + t.bary[2] * c - t.point).norm(), 1e-9);
  }
}

TEST(Metrics, MatchExhaustiveOracles) {
  const Mesh target = centred_surface(9, 6, 0.5);
  Rng rng(6);
  Mesh source;
  source.vertices.resize(60, 3);
  for (int i = 0; i < 60; ++i)
    source.vertices.row(i) << rng.uniform(-4, 4), rng.uniform(-4, 4), rng.normal(0, 0.8);
  std::vector<double> per;
  EXPECT_NEAR(point_to_plane_rmse(source, target, &per), oracle::point_to_plane_rmse(source, target), 1e-9);
  EXPECT_EQ(per.size(), 60u);
  EXPECT_NEAR(point_to_point_rmse(source, target), oracle::point_to_point_rmse(source, target), 1e-12);
  EXPECT_TRUE(mesh_vertex_normals(target).isApprox(oracle::area_weighted_normals(target), 1e-12));
}

TEST(Metrics, LiftedPlaneAndOrdering) {
  Mesh plane;
  plane.vertices.resize(25, 3);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) plane.vertices.row(y * 5 + x) << x, y, 0.0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const int a = y * 5 + x;
      plane.triangles.push_back({a, a + 1, a + 6});
      plane.triangles.push_back({a, a + 6, a + 5});
    }
  const double h = 0.37;
  Mesh lifted = plane;
  lifted.vertices.col(2).setConstant(h);
  EXPECT_NEAR(point_to_plane_rmse(lifted, plane), h, 1e-12);
  EXPECT_NEAR(point_to_point_rmse(lifted, plane), h, 1e-12);

  Mesh offset = lifted;
  offset.vertices.col(0).array() += 0.3;
  offset.vertices.col(1).array() += 0.2;
  for (int i = 0; i < 25; ++i)
    offset.vertices(i, 0) = std::min(offset.vertices(i, 0), 4.0);
  for (int i = 0; i < 25; ++i)
    offset.vertices(i, 1) = std::min(offset.vertices(i, 1), 4.0);
  EXPECT_NEAR(point_to_plane_rmse(offset, plane), h, 1e-12);
  EXPECT_LE(point_to_plane_rmse(offset, plane), point_to_point_rmse(offset, plane));
  EXPECT_GT(point_to_point_rmse(offset, plane), h);

  EXPECT_THROW(point_to_plane_rmse(lifted, Mesh{plane.vertices, {}}), MetricError);
}

TEST(Metrics, RigidMotionInvariance) {
  const Mesh target = centred_surface(8, 7, 0.6);
  Mesh source = centred_surface(8, 8, 0.6);
  const AlignTransform t = similarity(47.0, 1.0, {10, -3, 2});
  const double p2plane = point_to_plane_rmse(source, target);
  const double p2point = point_to_point_rmse(source, target);
  EXPECT_NEAR(point_to_plane_rmse(transformed(source, t), transformed(target, t)), p2plane, 1e-9);
  EXPECT_NEAR(point_to_point_rmse(transformed(source, t), transformed(target, t)), p2point, 1e-9);
}

TEST(NearestSearch, GridMatchesBruteForce) {
  Rng rng(9);
  Vertices items(1500, 3), queries(300, 3);
  for (int i = 0; i < items.size(); ++i) items.data()[i] = rng.normal(0, 10);
  for (int i = 0; i < queries.size(); ++i) queries.data()[i] = rng.normal(0, 15);
  const std::vector<int> nn = nearest_vertices(queries, items);
  for (int q = 0; q < queries.rows(); ++q)
    EXPECT_EQ(nn[q], oracle::nearest_vertex(queries.row(q).transpose(), items));

  std::vector<Eigen::AlignedBox3d> boxes;
  for (int i = 0; i < items.rows(); ++i) {
    const Eigen::Vector3d p = items.row(i).transpose();
    boxes.emplace_back(p, p);
  }
  const NearestSearch search(boxes, queries, [&](const Eigen::Vector3d& q, int i) {
    return (items.row(i).transpose() - q).squaredNorm();
  });
  EXPECT_TRUE(search.uses_grid());
  for (int q = 0; q < queries.rows(); ++q) {
    const auto [index, d2] = search.nearest(queries.row(q).transpose());
    EXPECT_EQ(index, nn[q]);
    EXPECT_NEAR(d2, (items.row(index) - queries.row(q)).squaredNorm(), 1e-12);
  }
}

TEST(Protocol, SimilarityCopyScoresZero) {
  const Mesh gt = bump_surface(10);
  const int nose = 16 * 33 + 16;
  const Mesh pred = transformed(gt, similarity(3.0, 0.98, {1, 0.5, -1}));
  ProtocolOptions opt;
  opt.crop_radius = 30.0;
  const ProtocolResult r = evaluate_reconstruction(pred, gt, nose, opt);
  EXPECT_LT(r.rmse, 1e-6);
  EXPECT_LT(r.cropped_ground_truth.num_vertices(), gt.num_vertices());
  EXPECT_EQ(r.per_vertex.size(), static_cast<std::size_t>(r.cropped_ground_truth.num_vertices()));
  opt.metric = EvalMetric::kPointToPoint;
  EXPECT_LT(evaluate_reconstruction(pred, gt, nose, opt).rmse, 1e-6);

  Mesh noisy = gt;
  Rng rng(10);
  for (int i = 0; i < noisy.num_vertices(); ++i) noisy.vertices(i, 2) += rng.normal(0, 0.05);
  opt.metric = EvalMetric::kPointToPlane;
  const double e = evaluate_reconstruction(noisy, gt, nose, opt).rmse;
  EXPECT_GT(e, 0.0);
  EXPECT_LT(e, 0.1);
}

}  // namespace
}  // namespace msma
