// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/morphable_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <Eigen/Geometry>

#include "msma/error.hpp"
#include "msma/rng.hpp"

namespace msma {

namespace {

using Eigen::Vector3d;

Vector3d row3(const Vertices& v, int i) { return v.row(i).transpose(); }

void require_length(const Eigen::VectorXd& v, Eigen::Index expected,
                    const char* what) {
  if (v.size() != expected) {
    throw ShapeError(std::string(what) + ": expected length " +
                     std::to_string(expected) + ", got " +
                     std::to_string(v.size()));
  }
}

}  // namespace

void FaceBasis::validate() const {
  const Eigen::Index rows = mean_shape.size();
  if (rows == 0 || rows % 3 != 0) {
    throw ShapeError("basis: mean shape length must be a positive multiple of 3");
  }
  if (mean_texture.size() != rows || id.rows() != rows || exp.rows() != rows ||
      tex.rows() != rows) {
    throw ShapeError("basis: all arrays must share row count 3V = " +
                     std::to_string(rows));
  }
  const int V = num_vertices();
  for (std::size_t t = 0; t < triangles.size(); ++t) {
    for (int idx : triangles[t]) {
      if (idx < 0 || idx >= V) {
        throw ShapeError("basis: triangle " + std::to_string(t) +
                         " references vertex " + std::to_string(idx) +
                         " outside [0, " + std::to_string(V) + ")");
      }
    }
  }
  if (landmarks.size() != kNumLandmarks) {
    throw ShapeError("basis: expected 68 landmark indices, found " +
                     std::to_string(landmarks.size()));
  }
  for (int idx : landmarks) {
    if (idx < 0 || idx >= V) {
      throw ShapeError("basis: landmark vertex " + std::to_string(idx) +
                       " out of range");
    }
  }
  if (skin.size() != static_cast<std::size_t>(V)) {
    throw ShapeError("basis: expected " + std::to_string(V) +
                     " skin flags, found " + std::to_string(skin.size()));
  }
}

// ---------------------------------------------------------------------------
// coefficients

PackedLayout::PackedLayout(const BasisDims& d)
    : alpha(0),
      beta(d.id),
      translation(d.id + d.exp),
      rotation(d.id + d.exp + 3),
      delta(d.id + d.exp + 6),
      gamma(d.id + d.exp + 15),
      total(d.coefficient_count()) {}

FaceCoefficients FaceCoefficients::zeros(const BasisDims& dims) {
  FaceCoefficients c;
  c.alpha = Eigen::VectorXd::Zero(dims.id);
  c.beta = Eigen::VectorXd::Zero(dims.exp);
  c.gamma = Eigen::VectorXd::Zero(dims.tex);
  return c;
}

Eigen::VectorXd FaceCoefficients::pack() const {
  const PackedLayout L(dims());
  Eigen::VectorXd out(L.total);
  out.segment(L.alpha, alpha.size()) = alpha;
  out.segment(L.beta, beta.size()) = beta;
  out.segment<3>(L.translation) = translation;
  out.segment<3>(L.rotation) = rotation;
  out.segment<9>(L.delta) = delta;
  out.segment(L.gamma, gamma.size()) = gamma;
  return out;
}

FaceCoefficients FaceCoefficients::unpack(const Eigen::VectorXd& packed,
                                          const BasisDims& dims) {
  const PackedLayout L(dims);
  require_length(packed, L.total, "unpack coefficients");
  FaceCoefficients c;
  c.alpha = packed.segment(L.alpha, dims.id);
  c.beta = packed.segment(L.beta, dims.exp);
  c.translation = packed.segment<3>(L.translation);
  c.rotation = packed.segment<3>(L.rotation);
  c.delta = packed.segment<9>(L.delta);
  c.gamma = packed.segment(L.gamma, dims.tex);
  return c;
}

void FaceCoefficients::wrap_angles() {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  for (int i = 0; i < 3; ++i) {
    double a = std::remainder(rotation[i], kTwoPi);  // [-pi, pi]
    if (a <= -std::numbers::pi) a += kTwoPi;
    rotation[i] = a;
  }
}

bool FaceCoefficients::operator==(const FaceCoefficients& o) const {
  return alpha.size() == o.alpha.size() && beta.size() == o.beta.size() &&
         gamma.size() == o.gamma.size() && alpha == o.alpha &&
         beta == o.beta && gamma == o.gamma && rotation == o.rotation &&
         translation == o.translation && delta == o.delta;
}

// ---------------------------------------------------------------------------
// synthesis

Vertices synthesize_shape(const FaceBasis& basis, const Eigen::VectorXd& alpha,
                          const Eigen::VectorXd& beta) {
  require_length(alpha, basis.id.cols(), "synthesize_shape alpha");
  require_length(beta, basis.exp.cols(), "synthesize_shape beta");
  const Eigen::VectorXd flat =
      basis.mean_shape + basis.id * alpha + basis.exp * beta;
  return Eigen::Map<const Vertices>(flat.data(), basis.num_vertices(), 3);
}

Vertices synthesize_texture(const FaceBasis& basis,
                            const Eigen::VectorXd& gamma) {
  require_length(gamma, basis.tex.cols(), "synthesize_texture gamma");
  const Eigen::VectorXd flat = basis.mean_texture + basis.tex * gamma;
  return Eigen::Map<const Vertices>(flat.data(), basis.num_vertices(), 3);
}

// ---------------------------------------------------------------------------
// normals

namespace {

// Unnormalised area-weighted normal sums.
Vertices accumulate_face_normals(const Vertices& v,
                                 const std::vector<Triangle>& triangles) {
  Vertices m = Vertices::Zero(v.rows(), 3);
  for (const Triangle& t : triangles) {
    const Vector3d a = row3(v, t[0]);
    const Vector3d e1 = row3(v, t[1]) - a;
    const Vector3d e2 = row3(v, t[2]) - a;
    const Vector3d n = e1.cross(e2);
    for (int k : t) m.row(k) += n.transpose();
  }
  return m;
}

void check_triangles(const std::vector<Triangle>& triangles, Eigen::Index V) {
  for (const Triangle& t : triangles) {
    for (int k : t) {
      if (k < 0 || k >= V) {
        throw ShapeError("vertex_normals: triangle index " + std::to_string(k) +
                         " out of range");
      }
    }
  }
}

}  // namespace

VertexNormals vertex_normals(const Vertices& vertices,
                             const std::vector<Triangle>& triangles) {
  check_triangles(triangles, vertices.rows());
  VertexNormals out;
  out.normals = accumulate_face_normals(vertices, triangles);
  for (Eigen::Index i = 0; i < out.normals.rows(); ++i) {
    const double len = out.normals.row(i).norm();
    if (len > 0.0 && std::isfinite(len)) {
      out.normals.row(i) /= len;
    } else {
      out.normals.row(i).setZero();
      ++out.degenerate_vertices;
    }
  }
  return out;
}

Vertices vertex_normals_backward(const Vertices& vertices,
                                 const std::vector<Triangle>& triangles,
                                 const Vertices& grad_normals) {
  check_triangles(triangles, vertices.rows());
  if (grad_normals.rows() != vertices.rows()) {
    throw ShapeError("vertex_normals_backward: gradient row count mismatch");
  }
  const Vertices m = accumulate_face_normals(vertices, triangles);
  // Through the normalisation n = m / |m|.
  Vertices grad_m = Vertices::Zero(m.rows(), 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double len = m.row(i).norm();
    if (!(len > 0.0) || !std::isfinite(len)) continue;
    const Vector3d n = m.row(i).transpose() / len;
    const Vector3d g = grad_normals.row(i).transpose();
    grad_m.row(i) = ((g - n * n.dot(g)) / len).transpose();
  }
  // Through the per-face cross products.
  Vertices grad_v = Vertices::Zero(vertices.rows(), 3);
  for (const Triangle& t : triangles) {
    const Vector3d a = row3(vertices, t[0]);
    const Vector3d e1 = row3(vertices, t[1]) - a;
    const Vector3d e2 = row3(vertices, t[2]) - a;
    const Vector3d G = row3(grad_m, t[0]) + row3(grad_m, t[1]) + row3(grad_m, t[2]);
    const Vector3d g1 = e2.cross(G);
    const Vector3d g2 = G.cross(e1);
    grad_v.row(t[0]) -= (g1 + g2).transpose();
    grad_v.row(t[1]) += g1.transpose();
    grad_v.row(t[2]) += g2.transpose();
  }
  return grad_v;
}

// ---------------------------------------------------------------------------
// synthetic basis

namespace {

struct GridLayout {
  int rows;
  int cols;
};

// Near-square grid holding exactly V vertices; the last row may be partial
// but never holds a single vertex (it would have no incident triangle).
GridLayout choose_grid(int V) {
  int cols = std::max(2, static_cast<int>(std::lround(std::sqrt(V * 0.85))));
  while (V % cols == 1) ++cols;
  return {(V + cols - 1) / cols, cols};
}

// Approximate 68-point layout in a face box of [-1, 1]^2 (y down).
std::array<Eigen::Vector2d, kNumLandmarks> canonical_landmarks() {
  std::array<Eigen::Vector2d, kNumLandmarks> p;
  const double pi = std::numbers::pi;
  for (int k = 0; k <= 16; ++k) {  // jaw
    const double t = k / 16.0;
    p[k] = {-0.9 * std::cos(pi * t), -0.25 + 1.2 * std::sin(pi * t)};
  }
  for (int k = 0; k < 5; ++k) {  // brows
    const double s = k / 4.0;
    const double y = -0.55 - 0.08 * std::sin(pi * s);
    p[17 + k] = {-0.75 + 0.6 * s, y};
    p[22 + k] = {0.15 + 0.6 * s, -0.55 - 0.08 * std::sin(pi * (1.0 - s))};
  }
  for (int k = 0; k < 4; ++k) p[27 + k] = {0.0, -0.42 + 0.14 * k};  // bridge
  for (int k = 0; k < 5; ++k) p[31 + k] = {-0.2 + 0.1 * k, 0.12};   // nostrils
  const double eye_angles[6] = {180, 120, 60, 0, -60, -120};
  for (int k = 0; k < 6; ++k) {
    const double a = eye_angles[k] * pi / 180.0;
    p[36 + k] = {-0.42 + 0.16 * std::cos(a), -0.32 - 0.06 * std::sin(a)};
    p[42 + k] = {0.42 - 0.16 * std::cos(a), -0.32 - 0.06 * std::sin(a)};
  }
  for (int k = 0; k < 12; ++k) {  // outer lip, from the left corner over the top
    const double a = pi - 2.0 * pi * k / 12.0;
    p[48 + k] = {0.35 * std::cos(a), 0.45 - 0.15 * std::sin(a)};
  }
  for (int k = 0; k < 8; ++k) {  // inner lip
    const double a = pi - 2.0 * pi * k / 8.0;
    p[60 + k] = {0.22 * std::cos(a), 0.45 - 0.06 * std::sin(a)};
  }
  return p;
}

// Random smooth scalar field over the (u, v) parameter square.
class SmoothField {
 public:
  SmoothField(Rng& rng, int order) : order_(order) {
    coeffs_.resize((order + 1) * (order + 1));
    for (int p = 0; p <= order; ++p) {
      for (int q = 0; q <= order; ++q) {
        coeffs_[p * (order + 1) + q] = rng.normal() / (1.0 + p + q);
      }
    }
  }

  double operator()(double u, double v) const {
    const double pi = std::numbers::pi;
    double acc = 0.0;
    for (int p = 0; p <= order_; ++p) {
      const double cu = std::cos(p * pi * (u + 1.0) / 2.0);
      for (int q = 0; q <= order_; ++q) {
        acc += coeffs_[p * (order_ + 1) + q] * cu *
               std::cos(q * pi * (v + 1.0) / 2.0);
      }
    }
    return acc;
  }

 private:
  int order_;
  std::vector<double> coeffs_;
};

// Modified Gram-Schmidt with one re-orthogonalisation pass. Columns are
// also made orthogonal to the orthonormal columns of `exclude`.
void orthonormalize_columns(Eigen::MatrixXd& A, const Eigen::MatrixXd& exclude) {
  for (Eigen::Index j = 0; j < A.cols(); ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index k = 0; k < exclude.cols(); ++k) {
        A.col(j) -= exclude.col(k).dot(A.col(j)) * exclude.col(k);
      }
      for (Eigen::Index k = 0; k < j; ++k) {
        const double proj = A.col(k).dot(A.col(j));
        A.col(j) -= proj * A.col(k);
      }
    }
    const double len = A.col(j).norm();
    if (!(len > 1e-9)) {
      throw ParameterError("synthetic_basis: basis columns are linearly dependent");
    }
    A.col(j) /= len;
  }
}

double gauss2(double x, double y, double cx, double cy, double s) {
  const double dx = x - cx;
  const double dy = y - cy;
  return std::exp(-(dx * dx + dy * dy) / (2.0 * s * s));
}

}  // namespace

FaceBasis synthetic_basis(std::uint64_t seed, int V, const BasisDims& dims) {
  if (V < kNumLandmarks) {
    throw ParameterError("synthetic_basis: need at least 68 vertices, got " +
                         std::to_string(V));
  }
  if (dims.id < 0 || dims.exp < 0 || dims.tex < 0 || dims.id > 3 * V ||
      dims.exp > 3 * V || dims.tex > 3 * V) {
    throw ParameterError("synthetic_basis: basis dimension exceeds 3V");
  }
  const GridLayout grid = choose_grid(V);
  const double pi = std::numbers::pi;
  const double theta_max = 70.0 * pi / 180.0;
  const double phi_max = 60.0 * pi / 180.0;

  std::vector<Eigen::Vector2d> uv(V);
  FaceBasis b;
  b.mean_shape.resize(3 * V);
  b.mean_texture.resize(3 * V);
  for (int i = 0; i < V; ++i) {
    const int r = i / grid.cols;
    const int c = i % grid.cols;
    const double u = -1.0 + 2.0 * c / (grid.cols - 1);
    const double v = -1.0 + 2.0 * r / (grid.rows - 1);
    uv[i] = {u, v};
    const double theta = u * theta_max;
    const double phi = v * phi_max;
    const double x = 80.0 * std::sin(theta) * std::cos(phi);
    const double y = 100.0 * std::sin(phi);
    double z = 70.0 * (1.0 - std::cos(theta) * std::cos(phi));
    z -= 22.0 * gauss2(x, y, 0.0, 0.0, 12.0);      // nose
    z += 7.0 * gauss2(x, y, -33.0, -28.0, 9.0);    // eye sockets
    z += 7.0 * gauss2(x, y, 33.0, -28.0, 9.0);
    z -= 4.0 * gauss2(x, y, 0.0, 40.0, 14.0);      // lips
    z -= 6.0 * gauss2(x, y, 0.0, 78.0, 18.0);      // chin
    b.mean_shape.segment<3>(3 * i) = Vector3d(x, y, z);
  }

  // Front-facing (toward -z) winding.
  for (int r = 0; r + 1 < grid.rows; ++r) {
    for (int c = 0; c + 1 < grid.cols; ++c) {
      const int a = r * grid.cols + c;
      const int right = a + 1;
      const int down = a + grid.cols;
      const int diag = down + 1;
      if (down >= V) continue;
      if (right < V) b.triangles.push_back({a, down, right});
      if (diag < V) b.triangles.push_back({right, down, diag});
    }
  }

  // Landmarks snap to the closest vertex in parameter space; ties resolve to
  // the lower index.
  const auto canon = canonical_landmarks();
  for (const Eigen::Vector2d& p : canon) {
    const Eigen::Vector2d target = 0.85 * p;
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < V; ++i) {
      const double d = (uv[i] - target).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    b.landmarks.push_back(best);
  }

  // Skin: inside the face oval, outside eyes and mouth.
  b.skin.resize(V);
  for (int i = 0; i < V; ++i) {
    const double x = uv[i].x() / 0.85;
    const double y = uv[i].y() / 0.85;
    const bool oval = x * x / (0.95 * 0.95) + y * y / 1.05 <= 1.0;
    auto in_ellipse = [&](double cx, double cy, double rx, double ry) {
      const double dx = (x - cx) / rx;
      const double dy = (y - cy) / ry;
      return dx * dx + dy * dy <= 1.0;
    };
    const bool eye = in_ellipse(-0.42, -0.32, 0.22, 0.12) ||
                     in_ellipse(0.42, -0.32, 0.22, 0.12);
    const bool mouth = in_ellipse(0.0, 0.45, 0.4, 0.2);
    b.skin[i] = oval && !eye && !mouth ? 1 : 0;

    Vector3d rgb(0.78, 0.57, 0.47);
    if (mouth) rgb = Vector3d(0.68, 0.36, 0.36);
    if (eye) rgb = Vector3d(0.62, 0.55, 0.52);
    rgb += 0.04 * (1.0 - x * x) * Vector3d(0.5, 0.3, 0.2);
    b.mean_texture.segment<3>(3 * i) = rgb;
  }

  // Infinitesimal similarity motions of the mean shape (translation,
  // rotation, scale). Shape bases are kept orthogonal to them, as bases
  // learned from aligned scans are, so pose and shape stay separable.
  Eigen::MatrixXd rigid = Eigen::MatrixXd::Zero(3 * V, 7);
  {
    Vector3d centroid = Vector3d::Zero();
    for (int i = 0; i < V; ++i) centroid += b.mean_shape.segment<3>(3 * i);
    centroid /= V;
    for (int i = 0; i < V; ++i) {
      const Vector3d p = b.mean_shape.segment<3>(3 * i) - centroid;
      for (int a = 0; a < 3; ++a) {
        rigid(3 * i + a, a) = 1.0;
        rigid.block<3, 1>(3 * i, 3 + a) = Vector3d::Unit(a).cross(p);
      }
      rigid.block<3, 1>(3 * i, 6) = p;
    }
    orthonormalize_columns(rigid, Eigen::MatrixXd(3 * V, 0));
  }

  Rng rng(seed);
  constexpr int kOrder = 7;
  auto build = [&](int cols, const Eigen::MatrixXd& exclude, auto&& weight) {
    Eigen::MatrixXd A(3 * V, cols);
    for (int k = 0; k < cols; ++k) {
      const SmoothField fx(rng, kOrder);
      const SmoothField fy(rng, kOrder);
      const SmoothField fz(rng, kOrder);
      for (int i = 0; i < V; ++i) {
        const double u = uv[i].x();
        const double v = uv[i].y();
        const Vector3d w = weight(u, v);
        A(3 * i + 0, k) = w.x() * fx(u, v);
        A(3 * i + 1, k) = w.y() * fy(u, v);
        A(3 * i + 2, k) = w.z() * fz(u, v);
      }
    }
    orthonormalize_columns(A, exclude);
    return A;
  };
  b.id = build(dims.id, rigid, [](double, double) { return Vector3d(0.8, 0.8, 1.4); });
  Eigen::MatrixXd rigid_id(3 * V, rigid.cols() + b.id.cols());
  rigid_id << rigid, b.id;
  b.exp = build(dims.exp, rigid_id, [](double u, double v) {
    const double w = 0.4 + std::exp(-(u * u + (v - 0.38) * (v - 0.38)) / 0.25);
    return Vector3d(w, w, w);
  });
  b.tex = build(dims.tex, Eigen::MatrixXd(3 * V, 0), [](double, double) { return Vector3d(1.0, 1.0, 1.0); });
  return b;
}

}  // namespace msma
