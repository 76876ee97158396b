// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Independent reference implementations used by the tests. Everything here
// is written as plainly as possible (nested loops, exhaustive search) and
// shares no code with the library beyond its data types.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "msma/evaluation.hpp"
#include "msma/morphable_model.hpp"
#include "msma/rng.hpp"
#include "msma/tensor.hpp"

namespace msma::oracle {

inline Tensor4 random_tensor(Shape4 shape, Rng& rng, double stddev = 1.0) {
  Tensor4 t(shape);
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

inline double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  if (!(a.shape() == b.shape())) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Direct cross-correlation with zero padding.
inline Tensor4 conv2d(const Tensor4& x, const Tensor4& k, int stride, int dilation, int groups,
                      int padding) {
  const int cin_g = x.c() / groups;
  const int cout_g = k.n() / groups;
  const int ho = (x.h() + 2 * padding - dilation * (k.h() - 1) - 1) / stride + 1;
  const int wo = (x.w() + 2 * padding - dilation * (k.w() - 1) - 1) / stride + 1;
  Tensor4 y({x.n(), k.n(), ho, wo});
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < k.n(); ++o)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double s = 0.0;
          const int g = o / cout_g;
          for (int ci = 0; ci < cin_g; ++ci)
            for (int a = 0; a < k.h(); ++a)
              for (int b = 0; b < k.w(); ++b) {
                const int yy = i * stride - padding + a * dilation;
                const int xx = j * stride - padding + b * dilation;
                if (yy < 0 || yy >= x.h() || xx < 0 || xx >= x.w()) continue;
                s += x.at(n, g * cin_g + ci, yy, xx) * k.at(o, ci, a, b);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

/// Per-pixel dense matrix-vector product with a (out, in, 1, 1) kernel.
inline Tensor4 pointwise(const Tensor4& x, const Tensor4& k) {
  Eigen::MatrixXd W(k.n(), k.c());
  for (int o = 0; o < k.n(); ++o)
    for (int i = 0; i < k.c(); ++i) W(o, i) = k.at(o, i, 0, 0);
  Tensor4 y({x.n(), k.n(), x.h(), x.w()});
  for (int n = 0; n < x.n(); ++n)
    for (int r = 0; r < x.h(); ++r)
      for (int c = 0; c < x.w(); ++c) {
        Eigen::VectorXd v(x.c());
        for (int i = 0; i < x.c(); ++i) v[i] = x.at(n, i, r, c);
        const Eigen::VectorXd out = W * v;
        for (int o = 0; o < k.n(); ++o) y.at(n, o, r, c) = out[o];
      }
  return y;
}

inline Tensor4 multiply(const Tensor4& a, const Tensor4& b) {
  Tensor4 y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b[i];
  return y;
}

/// Straight-line multi-scale large-kernel attention: per channel third,
/// depthwise k x k then dilated depthwise k x k, pointwise mix, gated by a
/// depthwise k x k of the same segment; concatenated, projected and added
/// back with the scale.
inline Tensor4 mlka(const Tensor4& x, const std::array<Tensor4, 3>& depthwise,
                    const std::array<Tensor4, 3>& dilated, const std::array<Tensor4, 3>& pw,
                    const std::array<Tensor4, 3>& gate, const Tensor4& projection, double scale) {
  const int c = x.c() / 3;
  const int ks[3] = {3, 5, 7};
  const int ds[3] = {2, 3, 4};
  Tensor4 cat({x.n(), x.c(), x.h(), x.w()});
  for (int b = 0; b < 3; ++b) {
    Tensor4 seg({x.n(), c, x.h(), x.w()});
    for (int n = 0; n < x.n(); ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < x.h(); ++i)
          for (int j = 0; j < x.w(); ++j) seg.at(n, ch, i, j) = x.at(n, b * c + ch, i, j);
    const int k = ks[b];
    const int d = ds[b];
    const Tensor4 dw = conv2d(seg, depthwise[b], 1, 1, c, k / 2);
    const Tensor4 dl = conv2d(dw, dilated[b], 1, d, c, d * (k / 2));
    const Tensor4 lka = pointwise(dl, pw[b]);
    const Tensor4 g = conv2d(seg, gate[b], 1, 1, c, k / 2);
    const Tensor4 prod = multiply(lka, g);
    for (int n = 0; n < x.n(); ++n)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < x.h(); ++i)
          for (int j = 0; j < x.w(); ++j) cat.at(n, b * c + ch, i, j) = prod.at(n, ch, i, j);
  }
  const Tensor4 proj = pointwise(cat, projection);
  Tensor4 out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale * proj[i];
  return out;
}

/// Central difference of a scalar function of a flat vector at entry i.
inline double central_difference(const std::function<double(std::span<const double>)>& f,
                                 std::vector<double> x, std::size_t i, double eps) {
  const double x0 = x[i];
  x[i] = x0 + eps;
  const double fp = f(x);
  x[i] = x0 - eps;
  const double fm = f(x);
  return (fp - fm) / (2.0 * eps);
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

// ---------------------------------------------------------------------------
// geometry

/// Closest point on a triangle by projecting onto its plane and, when the
/// projection falls outside, taking the best of the three edge segments.
inline Eigen::Vector3d closest_on_triangle(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                           const Eigen::Vector3d& b, const Eigen::Vector3d& c) {
  auto on_segment = [](const Eigen::Vector3d& q, const Eigen::Vector3d& s0,
                       const Eigen::Vector3d& s1) -> Eigen::Vector3d {
    const Eigen::Vector3d d = s1 - s0;
    const double len2 = d.squaredNorm();
    if (len2 == 0.0) return s0;
    const double t = std::clamp((q - s0).dot(d) / len2, 0.0, 1.0);
    return s0 + t * d;
  };
  const Eigen::Vector3d n = (b - a).cross(c - a);
  if (n.squaredNorm() > 0.0) {
    const Eigen::Vector3d q = p - n * ((p - a).dot(n) / n.squaredNorm());
    // Inside test via signed sub-areas.
    const double s0 = n.dot((b - a).cross(q - a));
    const double s1 = n.dot((c - b).cross(q - b));
    const double s2 = n.dot((a - c).cross(q - c));
    if (s0 >= 0 && s1 >= 0 && s2 >= 0) return q;
  }
  Eigen::Vector3d best = on_segment(p, a, b);
  for (const Eigen::Vector3d& cand : {on_segment(p, b, c), on_segment(p, c, a)}) {
    if ((cand - p).squaredNorm() < (best - p).squaredNorm()) best = cand;
  }
  return best;
}

/// Exhaustive nearest vertex (lowest index on ties).
inline int nearest_vertex(const Eigen::Vector3d& q, const Vertices& v) {
  int best = -1;
  double bd = std::numeric_limits<double>::infinity();
  for (int i = 0; i < v.rows(); ++i) {
    const double d = (v.row(i).transpose() - q).squaredNorm();
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  return best;
}

inline double point_to_point_rmse(const Mesh& source, const Mesh& target) {
  double sum = 0.0;
  for (int i = 0; i < source.num_vertices(); ++i) {
    const Eigen::Vector3d p = source.vertices.row(i).transpose();
    sum += (target.vertices.row(nearest_vertex(p, target.vertices)).transpose() - p).squaredNorm();
  }
  return std::sqrt(sum / source.num_vertices());
}

inline Vertices area_weighted_normals(const Mesh& m) {
  Vertices n = Vertices::Zero(m.num_vertices(), 3);
  for (const Triangle& t : m.triangles) {
    const Eigen::Vector3d a = m.vertices.row(t[0]).transpose();
    const Eigen::Vector3d b = m.vertices.row(t[1]).transpose();
    const Eigen::Vector3d c = m.vertices.row(t[2]).transpose();
    const Eigen::RowVector3d fn = (b - a).cross(c - a).transpose();
    for (int k = 0; k < 3; ++k) n.row(t[k]) += fn;
  }
  for (int i = 0; i < n.rows(); ++i) {
    const double len = n.row(i).norm();
    if (len > 0.0) n.row(i) /= len;
  }
  return n;
}

/// Point-to-plane RMSE by scanning every target triangle for each source
/// vertex; the normal at the foot point blends the corner normals with
/// barycentric weights solved from a 2x2 system.
inline double point_to_plane_rmse(const Mesh& source, const Mesh& target) {
  const Vertices normals = area_weighted_normals(target);
  double sum = 0.0;
  for (int i = 0; i < source.num_vertices(); ++i) {
    const Eigen::Vector3d p = source.vertices.row(i).transpose();
    double bd = std::numeric_limits<double>::infinity();
    Eigen::Vector3d foot;
    int best = -1;
    for (std::size_t t = 0; t < target.triangles.size(); ++t) {
      const Triangle& tr = target.triangles[t];
      const Eigen::Vector3d q =
          closest_on_triangle(p, target.vertices.row(tr[0]).transpose(),
                              target.vertices.row(tr[1]).transpose(),
                              target.vertices.row(tr[2]).transpose());
      const double d = (q - p).squaredNorm();
      if (d < bd) {
        bd = d;
        foot = q;
        best = static_cast<int>(t);
      }
    }
    const Triangle& tr = target.triangles[best];
    const Eigen::Vector3d a = target.vertices.row(tr[0]).transpose();
    const Eigen::Vector3d e1 = target.vertices.row(tr[1]).transpose() - a;
    const Eigen::Vector3d e2 = target.vertices.row(tr[2]).transpose() - a;
    Eigen::Matrix2d G;
    G << e1.dot(e1), e1.dot(e2), e1.dot(e2), e2.dot(e2);
    const Eigen::Vector2d uv = G.ldlt().solve(Eigen::Vector2d(e1.dot(foot - a), e2.dot(foot - a)));
    const Eigen::Vector3d n = ((1 - uv[0] - uv[1]) * normals.row(tr[0]) +
                               uv[0] * normals.row(tr[1]) + uv[1] * normals.row(tr[2]))
                                  .transpose()
                                  .normalized();
    const double h = (p - foot).dot(n);
    sum += h * h;
  }
  return std::sqrt(sum / source.num_vertices());
}

inline Mesh icosahedron(double radius = 1.0) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Mesh m;
  m.vertices.resize(12, 3);
  m.vertices << -1, t, 0, 1, t, 0, -1, -t, 0, 1, -t, 0, 0, -1, t, 0, 1, t, 0, -1, -t, 0, 1, -t, t,
      0, -1, t, 0, 1, -t, 0, -1, -t, 0, 1;
  for (int i = 0; i < 12; ++i) m.vertices.row(i) *= radius / m.vertices.row(i).norm();
  m.triangles = {{0, 11, 5}, {0, 5, 1},   {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                 {1, 5, 9},  {5, 11, 4},  {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                 {3, 9, 4},  {3, 4, 2},   {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                 {4, 9, 5},  {2, 4, 11},  {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  return m;
}

/// Random bumpy height-field mesh on an n x n grid.
inline Mesh random_surface(int n, Rng& rng, double spacing = 1.0, double amplitude = 0.3) {
  Mesh m;
  m.vertices.resize(n * n, 3);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      m.vertices.row(y * n + x) << x * spacing + rng.uniform(-0.2, 0.2),
          y * spacing + rng.uniform(-0.2, 0.2), rng.normal(0.0, amplitude);
  for (int y = 0; y + 1 < n; ++y)
    for (int x = 0; x + 1 < n; ++x) {
      const int a = y * n + x;
      m.triangles.push_back({a, a + 1, a + n + 1});
      m.triangles.push_back({a, a + n + 1, a + n});
    }
  return m;
}

}  // namespace msma::oracle
