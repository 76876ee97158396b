// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Geometry>

#include "msma/error.hpp"

namespace msma {

void Mesh::validate() const {
  const int V = num_vertices();
  for (const Triangle& t : triangles) {
    for (int k : t) {
      if (k < 0 || k >= V) {
        throw ShapeError("mesh: triangle index " + std::to_string(k) + " out of range");
      }
    }
  }
}

Vertices AlignTransform::apply(const Vertices& points) const {
  Vertices out(points.rows(), 3);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    out.row(i) = (scale * rotation * points.row(i).transpose() + translation).transpose();
  }
  return out;
}

AlignTransform AlignTransform::inverse() const {
  AlignTransform inv;
  inv.rotation = rotation.transpose();
  inv.scale = 1.0 / scale;
  inv.translation = -inv.scale * (inv.rotation * translation);
  return inv;
}

// ---------------------------------------------------------------------------
// nearest search

namespace {

constexpr int kBruteForceLimit = 1000;

bool better(double d, int i, double best_d, int best_i) {
  return d < best_d || (d == best_d && i < best_i);
}

}  // namespace

NearestSearch::NearestSearch(const std::vector<Eigen::AlignedBox3d>& boxes,
                             const Vertices& queries, Distance distance)
    : boxes_(boxes), distance_(std::move(distance)) {
  const int n = static_cast<int>(boxes_.size());
  if (n < kBruteForceLimit) return;

  Eigen::AlignedBox3d bounds;
  for (const auto& b : boxes_) bounds.extend(b);
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    bounds.extend(Eigen::Vector3d(queries.row(i).transpose()));
  }
  const Eigen::Vector3d extent = bounds.sizes().cwiseMax(1e-9);
  // Roughly one item per cell, capped so sparse layouts stay cheap.
  const double volume = extent.prod();
  cell_ = std::cbrt(volume / n);
  const double min_cell = extent.maxCoeff() / 256.0;
  cell_ = std::max(cell_, min_cell);
  for (int a = 0; a < 3; ++a) {
    dims_[a] = std::max(1, static_cast<int>(std::ceil(extent[a] / cell_)));
  }
  origin_ = bounds.min();
  cells_.assign(static_cast<std::size_t>(dims_.prod()), {});
  auto cell_of = [&](const Eigen::Vector3d& p) {
    Eigen::Vector3i c;
    for (int a = 0; a < 3; ++a) {
      c[a] = std::clamp(static_cast<int>(std::floor((p[a] - origin_[a]) / cell_)), 0,
                        dims_[a] - 1);
    }
    return c;
  };
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3i lo = cell_of(boxes_[i].min());
    const Eigen::Vector3i hi = cell_of(boxes_[i].max());
    for (int z = lo.z(); z <= hi.z(); ++z) {
      for (int y = lo.y(); y <= hi.y(); ++y) {
        for (int x = lo.x(); x <= hi.x(); ++x) {
          cells_[(static_cast<std::size_t>(z) * dims_.y() + y) * dims_.x() + x].push_back(i);
        }
      }
    }
  }
}

std::pair<int, double> NearestSearch::nearest(const Eigen::Vector3d& q) const {
  int best_i = -1;
  double best_d = std::numeric_limits<double>::infinity();
  if (cells_.empty()) {
    for (int i = 0; i < static_cast<int>(boxes_.size()); ++i) {
      const double d = distance_(q, i);
      if (better(d, i, best_d, best_i)) {
        best_d = d;
        best_i = i;
      }
    }
    return {best_i, best_d};
  }
  Eigen::Vector3i qc;
  for (int a = 0; a < 3; ++a) {
    qc[a] = std::clamp(static_cast<int>(std::floor((q[a] - origin_[a]) / cell_)), 0,
                       dims_[a] - 1);
  }
  const int max_ring = dims_.maxCoeff();
  for (int r = 0; r <= max_ring; ++r) {
    for (int z = qc.z() - r; z <= qc.z() + r; ++z) {
      if (z < 0 || z >= dims_.z()) continue;
      for (int y = qc.y() - r; y <= qc.y() + r; ++y) {
        if (y < 0 || y >= dims_.y()) continue;
        for (int x = qc.x() - r; x <= qc.x() + r; ++x) {
          if (x < 0 || x >= dims_.x()) continue;
          const int ring = std::max({std::abs(x - qc.x()), std::abs(y - qc.y()),
                                     std::abs(z - qc.z())});
          if (ring != r) continue;
          for (int i : cells_[(static_cast<std::size_t>(z) * dims_.y() + y) * dims_.x() + x]) {
            const double d = distance_(q, i);
            if (better(d, i, best_d, best_i)) {
              best_d = d;
              best_i = i;
            }
          }
        }
      }
    }
    // Cells beyond ring r lie at least r cells away from q.
    const double bound = r * cell_;
    if (best_i >= 0 && best_d < bound * bound) break;
  }
  return {best_i, best_d};
}

std::vector<int> nearest_vertices(const Vertices& source, const Vertices& target) {
  if (target.rows() == 0) throw ShapeError("nearest_vertices: empty target");
  std::vector<Eigen::AlignedBox3d> boxes;
  boxes.reserve(target.rows());
  for (Eigen::Index i = 0; i < target.rows(); ++i) {
    const Eigen::Vector3d p = target.row(i).transpose();
    boxes.emplace_back(p, p);
  }
  const NearestSearch search(boxes, source, [&](const Eigen::Vector3d& q, int i) {
    return (target.row(i).transpose() - q).squaredNorm();
  });
  std::vector<int> out(source.rows());
  for (Eigen::Index i = 0; i < source.rows(); ++i) {
    out[i] = search.nearest(source.row(i).transpose()).first;
  }
  return out;
}

// ---------------------------------------------------------------------------
// closest point on a triangle

namespace {

TrianglePoint closest_on_segment(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                 const Eigen::Vector3d& b, int ia, int ib) {
  const Eigen::Vector3d ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  TrianglePoint r;
  r.point = a + t * ab;
  r.bary.setZero();
  r.bary[ia] = 1.0 - t;
  r.bary[ib] += t;
  return r;
}

}  // namespace

TrianglePoint closest_point_on_triangle(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                        const Eigen::Vector3d& b, const Eigen::Vector3d& c) {
  const Eigen::Vector3d ab = b - a;
  const Eigen::Vector3d ac = c - a;
  if (ab.cross(ac).squaredNorm() == 0.0) {
    // Degenerate: best of the three edges.
    TrianglePoint best = closest_on_segment(p, a, b, 0, 1);
    for (const TrianglePoint& cand :
         {closest_on_segment(p, b, c, 1, 2), closest_on_segment(p, c, a, 2, 0)}) {
      if ((cand.point - p).squaredNorm() < (best.point - p).squaredNorm()) best = cand;
    }
    return best;
  }
  // Voronoi-region walk over vertices, edges, then the face.
  const Eigen::Vector3d ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return {a, {1.0, 0.0, 0.0}};
  const Eigen::Vector3d bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return {b, {0.0, 1.0, 0.0}};
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return {a + v * ab, {1.0 - v, v, 0.0}};
  }
  const Eigen::Vector3d cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return {c, {0.0, 0.0, 1.0}};
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return {a + w * ac, {1.0 - w, 0.0, w}};
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return {b + w * (c - b), {0.0, 1.0 - w, w}};
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom;
  const double w = vc * denom;
  return {a + ab * v + ac * w, {1.0 - v - w, v, w}};
}

// ---------------------------------------------------------------------------
// ICP

namespace {

double rms_to(const Vertices& points, const Vertices& target, const std::vector<int>& nn) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    acc += (points.row(i) - target.row(nn[i])).squaredNorm();
  }
  return std::sqrt(acc / static_cast<double>(points.rows()));
}

bool all_coincident(const Eigen::Matrix3Xd& pts) {
  const Eigen::Vector3d mean = pts.rowwise().mean();
  return (pts.colwise() - mean).squaredNorm() == 0.0;
}

}  // namespace

IcpResult icp_align(const Mesh& source, const Mesh& target, const IcpOptions& options) {
  if (source.vertices.rows() == 0 || target.vertices.rows() == 0) {
    throw AlignmentError("icp_align: source and target must be non-empty");
  }
  if (options.max_iterations < 0 || !(options.tolerance >= 0.0)) {
    throw ParameterError("icp_align: invalid iteration count or tolerance");
  }
  const Vertices& src = source.vertices;
  const Vertices& tgt = target.vertices;
  const Eigen::Matrix3Xd src_cols = src.transpose();
  if (all_coincident(src_cols)) {
    throw AlignmentError("icp_align: source points are all coincident");
  }

  IcpResult result;
  std::vector<int> nn = nearest_vertices(src, tgt);
  double residual = rms_to(src, tgt, nn);
  result.residuals.push_back(residual);

  for (int it = 0; it < options.max_iterations && residual > 0.0; ++it) {
    Eigen::Matrix3Xd matched(3, src.rows());
    for (Eigen::Index i = 0; i < src.rows(); ++i) matched.col(i) = tgt.row(nn[i]).transpose();
    if (all_coincident(matched)) {
      throw AlignmentError("icp_align: matched target points are all coincident");
    }
    const Eigen::Matrix4d h = Eigen::umeyama(src_cols, matched, options.allow_scale);
    AlignTransform candidate;
    candidate.scale = options.allow_scale ? h.block<3, 3>(0, 0).col(0).norm() : 1.0;
    candidate.rotation = h.block<3, 3>(0, 0) / candidate.scale;
    candidate.translation = h.block<3, 1>(0, 3);

    const Vertices moved = candidate.apply(src);
    const std::vector<int> next_nn = nearest_vertices(moved, tgt);
    const double next = rms_to(moved, tgt, next_nn);
    if (next > residual) break;  // keep the last accepted transform
    const double change = (residual - next) / residual;
    result.transform = candidate;
    result.residuals.push_back(next);
    residual = next;
    nn = next_nn;
    if (change < options.tolerance) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// cropping and metrics

Mesh crop_by_radius(const Mesh& mesh, int center, double radius, bool require_triangles) {
  if (center < 0 || center >= mesh.num_vertices()) {
    throw ParameterError("crop_by_radius: centre vertex " + std::to_string(center) +
                         " out of range");
  }
  if (!(radius >= 0.0)) throw ParameterError("crop_by_radius: radius must be >= 0");
  const Eigen::RowVector3d c = mesh.vertices.row(center);
  std::vector<int> remap(mesh.num_vertices(), -1);
  int kept = 0;
  for (int i = 0; i < mesh.num_vertices(); ++i) {
    if ((mesh.vertices.row(i) - c).norm() <= radius) remap[i] = kept++;
  }
  Mesh out;
  out.vertices.resize(kept, 3);
  for (int i = 0; i < mesh.num_vertices(); ++i) {
    if (remap[i] >= 0) out.vertices.row(remap[i]) = mesh.vertices.row(i);
  }
  for (const Triangle& t : mesh.triangles) {
    if (remap[t[0]] >= 0 && remap[t[1]] >= 0 && remap[t[2]] >= 0) {
      out.triangles.push_back({remap[t[0]], remap[t[1]], remap[t[2]]});
    }
  }
  if (require_triangles && out.triangles.empty()) {
    throw CropError("crop_by_radius: no triangle lies within " + std::to_string(radius) +
                    " mm of vertex " + std::to_string(center));
  }
  return out;
}

Vertices mesh_vertex_normals(const Mesh& mesh) {
  return vertex_normals(mesh.vertices, mesh.triangles).normals;
}

double point_to_plane_rmse(const Mesh& source, const Mesh& target,
                           std::vector<double>* per_vertex) {
  if (target.triangles.empty()) {
    throw MetricError("point_to_plane_rmse: target has no triangles");
  }
  if (source.vertices.rows() == 0) {
    throw MetricError("point_to_plane_rmse: source is empty");
  }
  target.validate();
  const Vertices normals = mesh_vertex_normals(target);
  const Vertices& tv = target.vertices;
  std::vector<Eigen::AlignedBox3d> boxes;
  boxes.reserve(target.triangles.size());
  for (const Triangle& t : target.triangles) {
    Eigen::AlignedBox3d b(Eigen::Vector3d(tv.row(t[0]).transpose()));
    b.extend(Eigen::Vector3d(tv.row(t[1]).transpose()));
    b.extend(Eigen::Vector3d(tv.row(t[2]).transpose()));
    boxes.push_back(b);
  }
  auto corner = [&](int tri, int k) -> Eigen::Vector3d {
    return tv.row(target.triangles[tri][k]).transpose();
  };
  const NearestSearch search(boxes, source.vertices, [&](const Eigen::Vector3d& q, int i) {
    return (closest_point_on_triangle(q, corner(i, 0), corner(i, 1), corner(i, 2)).point - q)
        .squaredNorm();
  });
  if (per_vertex) per_vertex->assign(source.vertices.rows(), 0.0);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < source.vertices.rows(); ++i) {
    const Eigen::Vector3d p = source.vertices.row(i).transpose();
    const int tri = search.nearest(p).first;
    const TrianglePoint cp = closest_point_on_triangle(p, corner(tri, 0), corner(tri, 1),
                                                       corner(tri, 2));
    Eigen::Vector3d n = Eigen::Vector3d::Zero();
    for (int k = 0; k < 3; ++k) {
      n += cp.bary[k] * normals.row(target.triangles[tri][k]).transpose();
    }
    if (n.norm() == 0.0) {
      n = (corner(tri, 1) - corner(tri, 0)).cross(corner(tri, 2) - corner(tri, 0));
    }
    const double len = n.norm();
    // A fully degenerate neighbourhood falls back to the Euclidean distance.
    const double d = len > 0.0 ? std::abs((p - cp.point).dot(n / len)) : (p - cp.point).norm();
    if (per_vertex) (*per_vertex)[i] = d;
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(source.vertices.rows()));
}

double point_to_point_rmse(const Mesh& source, const Mesh& target,
                           std::vector<double>* per_vertex) {
  if (source.vertices.rows() == 0 || target.vertices.rows() == 0) {
    throw MetricError("point_to_point_rmse: meshes must be non-empty");
  }
  const std::vector<int> nn = nearest_vertices(source.vertices, target.vertices);
  if (per_vertex) per_vertex->assign(source.vertices.rows(), 0.0);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < source.vertices.rows(); ++i) {
    const double d2 = (source.vertices.row(i) - target.vertices.row(nn[i])).squaredNorm();
    if (per_vertex) (*per_vertex)[i] = std::sqrt(d2);
    acc += d2;
  }
  return std::sqrt(acc / static_cast<double>(source.vertices.rows()));
}

ProtocolResult evaluate_reconstruction(const Mesh& prediction, const Mesh& ground_truth,
                                       int nose_vertex, const ProtocolOptions& options) {
  ProtocolResult r;
  r.cropped_ground_truth = crop_by_radius(ground_truth, nose_vertex, options.crop_radius);
  r.icp = icp_align(r.cropped_ground_truth, prediction, options.icp);
  r.aligned_prediction.vertices = r.icp.transform.inverse().apply(prediction.vertices);
  r.aligned_prediction.triangles = prediction.triangles;
  r.rmse = options.metric == EvalMetric::kPointToPlane
               ? point_to_plane_rmse(r.cropped_ground_truth, r.aligned_prediction, &r.per_vertex)
               : point_to_point_rmse(r.cropped_ground_truth, r.aligned_prediction, &r.per_vertex);
  return r;
}

}  // namespace msma
