// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Geometric evaluation: similarity ICP, nose-centred radius cropping, and
// point-to-plane / point-to-point RMSE between meshes (millimetres).

#pragma once

#include <functional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "msma/morphable_model.hpp"

namespace msma {

struct Mesh {
  Vertices vertices;
  std::vector<Triangle> triangles;

  int num_vertices() const { return static_cast<int>(vertices.rows()); }
  /// Throws ShapeError when a triangle index is out of range.
  void validate() const;
};

/// x -> scale * R x + t.
struct AlignTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double scale = 1.0;

  Vertices apply(const Vertices& points) const;
  AlignTransform inverse() const;
};

/// Exact nearest-neighbour queries over a fixed item set. Items are indexed
/// 0..n-1 and described by axis-aligned boxes; the distance callback returns
/// the exact squared distance from the query to an item. Ties resolve to the
/// lower index. Small sets (< 1000 items) are scanned exhaustively; larger
/// ones go through a uniform grid whose bounds also cover every query passed
/// at construction, which keeps the ring search exact.
class NearestSearch {
 public:
  using Distance = std::function<double(const Eigen::Vector3d&, int)>;

  NearestSearch(const std::vector<Eigen::AlignedBox3d>& boxes, const Vertices& queries,
                Distance distance);
  /// Index of the nearest item and its squared distance.
  std::pair<int, double> nearest(const Eigen::Vector3d& q) const;
  bool uses_grid() const { return !cells_.empty(); }

 private:
  std::vector<Eigen::AlignedBox3d> boxes_;
  Distance distance_;
  Eigen::Vector3d origin_;
  double cell_ = 1.0;
  Eigen::Vector3i dims_ = Eigen::Vector3i::Ones();
  std::vector<std::vector<int>> cells_;
};

/// Nearest target vertex for every source point (exact, lower index on ties).
std::vector<int> nearest_vertices(const Vertices& source, const Vertices& target);

/// Closest point on triangle (a, b, c) to p, with its barycentric weights.
struct TrianglePoint {
  Eigen::Vector3d point;
  Eigen::Vector3d bary;
};
TrianglePoint closest_point_on_triangle(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                        const Eigen::Vector3d& b, const Eigen::Vector3d& c);

struct IcpOptions {
  bool allow_scale = true;
  int max_iterations = 200;
  /// Stop once the relative residual change drops below this value.
  double tolerance = 1e-10;
};

struct IcpResult {
  AlignTransform transform;  // maps source into the target frame
  /// RMS nearest-vertex distance before the first update and after each
  /// accepted update; non-increasing.
  std::vector<double> residuals;
};

/// Point-to-point ICP with closed-form similarity updates. Throws
/// AlignmentError when either point set is empty or the matched points are
/// all coincident.
IcpResult icp_align(const Mesh& source, const Mesh& target, const IcpOptions& options = {});

/// Vertices within `radius` of vertex `center` and the triangles whose three
/// corners survive, reindexed in original order. Throws CropError when no
/// triangle survives (or, with require_triangles false, never for a valid
/// centre, since the centre itself always survives).
Mesh crop_by_radius(const Mesh& mesh, int center, double radius,
                    bool require_triangles = true);

/// Unit area-weighted vertex normals (zero where undefined).
Vertices mesh_vertex_normals(const Mesh& mesh);

/// RMS over source vertices of |(p - q) . n_q|, where q is the closest point
/// on the target surface and n_q the barycentric blend of target vertex
/// normals, renormalised. Throws MetricError without target triangles.
double point_to_plane_rmse(const Mesh& source, const Mesh& target,
                           std::vector<double>* per_vertex = nullptr);

/// RMS over source vertices of the distance to the nearest target vertex.
double point_to_point_rmse(const Mesh& source, const Mesh& target,
                           std::vector<double>* per_vertex = nullptr);

enum class EvalMetric { kPointToPlane, kPointToPoint };

struct ProtocolOptions {
  double crop_radius = 95.0;
  EvalMetric metric = EvalMetric::kPointToPlane;
  IcpOptions icp;
};

struct ProtocolResult {
  double rmse = 0.0;
  IcpResult icp;
  Mesh cropped_ground_truth;
  Mesh aligned_prediction;        // prediction mapped into the ground-truth frame
  std::vector<double> per_vertex;  // one per cropped ground-truth vertex
};

/// Crop the ground truth around `nose_vertex`, align it to the prediction
/// with similarity ICP, map the prediction back into the ground-truth frame,
/// and measure from each cropped ground-truth vertex.
ProtocolResult evaluate_reconstruction(const Mesh& prediction, const Mesh& ground_truth,
                                       int nose_vertex, const ProtocolOptions& options = {});

}  // namespace msma
