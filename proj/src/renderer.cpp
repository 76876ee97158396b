// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msma/error.hpp"
#include "msma/illumination.hpp"

namespace msma {

namespace {

using Vec2 = Eigen::Vector2d;

double raw_edge(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

bool lex_less(const Vec2& a, const Vec2& b) {
  return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
}

// Evaluated from the lexicographically smaller endpoint so that two
// triangles sharing an edge get exactly negated values.
double edge_function(const Vec2& a, const Vec2& b, const Vec2& p) {
  return lex_less(a, b) ? raw_edge(a, b, p) : -raw_edge(b, a, p);
}

// Antisymmetric in d, so exactly one of two triangles traversing a shared
// edge in opposite directions owns pixel centres on it.
bool owns_edge(const Vec2& d) {
  return d.y() < 0.0 || (d.y() == 0.0 && d.x() > 0.0);
}

bool inside(double e, const Vec2& direction) {
  return e > 0.0 || (e == 0.0 && owns_edge(direction));
}

Vec2 position(const Points2& p, int i) { return p.row(i).transpose(); }

}  // namespace

std::size_t Framebuffer::covered_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

Framebuffer rasterize(const Points2& positions, const Eigen::VectorXd& depth,
                      const std::vector<Triangle>& triangles,
                      const Vertices& attributes, const RasterOptions& options) {
  if (options.height < 1 || options.width < 1) {
    throw ParameterError("rasterize: image size must be positive");
  }
  const Eigen::Index V = positions.rows();
  if (depth.size() != V || attributes.rows() != V) {
    throw ShapeError("rasterize: positions, depths and attributes must share "
                     "the vertex count");
  }
  if (!positions.allFinite() || !depth.allFinite()) {
    throw ParameterError("rasterize: projected points must be finite");
  }
  for (const Triangle& t : triangles) {
    for (int k : t) {
      if (k < 0 || k >= V) {
        throw ShapeError("rasterize: triangle index " + std::to_string(k) +
                         " out of range");
      }
    }
  }

  const int H = options.height;
  const int W = options.width;
  Framebuffer fb;
  fb.height = H;
  fb.width = W;
  fb.color = Image(H, W, 0.0);
  fb.depth.assign(static_cast<std::size_t>(H) * W, 0.0);
  fb.mask.assign(static_cast<std::size_t>(H) * W, 0);
  fb.records.assign(static_cast<std::size_t>(H) * W, PixelRecord{});

  for (std::size_t t = 0; t < triangles.size(); ++t) {
    const Triangle& tri = triangles[t];
    const Vec2 a = position(positions, tri[0]);
    const Vec2 b = position(positions, tri[1]);
    const Vec2 c = position(positions, tri[2]);
    const double area = raw_edge(a, b, c);
    if (area == 0.0) continue;
    if (options.cull_back_faces && area > 0.0) continue;
    const double s = area > 0.0 ? 1.0 : -1.0;
    const Vec2 d0 = s * (c - b);
    const Vec2 d1 = s * (a - c);
    const Vec2 d2 = s * (b - a);

    const double min_x = std::min({a.x(), b.x(), c.x()});
    const double max_x = std::max({a.x(), b.x(), c.x()});
    const double min_y = std::min({a.y(), b.y(), c.y()});
    const double max_y = std::max({a.y(), b.y(), c.y()});
    const int x0 = std::max(0, static_cast<int>(std::ceil(min_x - 0.5)));
    const int x1 = std::min(W - 1, static_cast<int>(std::floor(max_x - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(min_y - 0.5)));
    const int y1 = std::min(H - 1, static_cast<int>(std::floor(max_y - 0.5)));

    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const Vec2 p(x + 0.5, y + 0.5);
        const double e0 = s * edge_function(b, c, p);
        const double e1 = s * edge_function(c, a, p);
        const double e2 = s * edge_function(a, b, p);
        if (!inside(e0, d0) || !inside(e1, d1) || !inside(e2, d2)) continue;
        const double sum = e0 + e1 + e2;
        if (!(sum > 0.0)) continue;
        const std::array<double, 3> bary{e0 / sum, e1 / sum, e2 / sum};
        const double z = bary[0] * depth[tri[0]] + bary[1] * depth[tri[1]] +
                         bary[2] * depth[tri[2]];
        const std::size_t pix = static_cast<std::size_t>(y) * W + x;
        if (fb.mask[pix] && !(z < fb.depth[pix])) continue;
        fb.mask[pix] = 1;
        fb.depth[pix] = z;
        fb.records[pix] = {static_cast<int>(t), bary};
        for (int ch = 0; ch < 3; ++ch) {
          fb.color.at(y, x, ch) = bary[0] * attributes(tri[0], ch) +
                                  bary[1] * attributes(tri[1], ch) +
                                  bary[2] * attributes(tri[2], ch);
        }
      }
    }
  }

  if (options.keep_records) {
    fb.inputs = std::make_shared<RasterInputs>(
        RasterInputs{positions, depth, triangles, attributes});
  }
  return fb;
}

RasterGradients rasterize_backward(const Framebuffer& fb,
                                   const Image& grad_color) {
  if (!fb.inputs) {
    throw StateError("rasterize_backward: framebuffer carries no records");
  }
  if (grad_color.height() != fb.height || grad_color.width() != fb.width) {
    throw ShapeError("rasterize_backward: gradient image size mismatch");
  }
  const RasterInputs& in = *fb.inputs;
  RasterGradients g;
  g.attributes = Vertices::Zero(in.attributes.rows(), 3);
  g.positions = Points2::Zero(in.positions.rows(), 2);
  for (int y = 0; y < fb.height; ++y) {
    for (int x = 0; x < fb.width; ++x) {
      const PixelRecord& rec = fb.record(y, x);
      if (rec.triangle < 0) continue;
      const Eigen::Vector3d go(grad_color.at(y, x, 0), grad_color.at(y, x, 1),
                               grad_color.at(y, x, 2));
      if (go.isZero(0.0)) continue;
      const Triangle& tri = in.triangles[rec.triangle];
      for (int i = 0; i < 3; ++i) g.attributes.row(tri[i]) += rec.bary[i] * go.transpose();

      const Vec2 a = position(in.positions, tri[0]);
      const Vec2 b = position(in.positions, tri[1]);
      const Vec2 c = position(in.positions, tri[2]);
      const double area = raw_edge(a, b, c);
      // d e_i / d p for e0 = edge(b, c), e1 = edge(c, a), e2 = edge(a, b).
      const std::array<Vec2, 3> de{Vec2(-(c.y() - b.y()), c.x() - b.x()),
                                   Vec2(-(a.y() - c.y()), a.x() - c.x()),
                                   Vec2(-(b.y() - a.y()), b.x() - a.x())};
      Vec2 h = Vec2::Zero();
      for (int i = 0; i < 3; ++i) {
        h += go.dot(in.attributes.row(tri[i]).transpose()) * de[i] / area;
      }
      for (int j = 0; j < 3; ++j) g.positions.row(tri[j]) -= rec.bary[j] * h.transpose();
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// face pipeline

RenderedFace render_face(const FaceCoefficients& coefficients,
                         const FaceBasis& basis, const CameraModel& camera,
                         const RenderOptions& options) {
  RenderedFace r;
  r.vertices = synthesize_shape(basis, coefficients.alpha, coefficients.beta);
  r.normals = vertex_normals(r.vertices, basis.triangles).normals;
  r.texture = synthesize_texture(basis, coefficients.gamma);
  r.shaded = shade_texture(r.texture, r.normals, coefficients.delta);
  r.projection = project(r.vertices, coefficients.rotation,
                         coefficients.translation, camera);
  RasterOptions ro;
  ro.height = camera.height;
  ro.width = camera.width;
  ro.cull_back_faces = options.cull_back_faces;
  r.framebuffer = rasterize(r.projection.points, r.projection.depth,
                            basis.triangles, r.shaded, ro);
  std::vector<double>& rgb = r.framebuffer.color.data();
  r.clamped.assign(rgb.size(), 0);
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    if (rgb[i] < 0.0 || rgb[i] > 1.0) {
      rgb[i] = std::clamp(rgb[i], 0.0, 1.0);
      r.clamped[i] = 1;
    }
  }
  return r;
}

namespace {

// alpha/beta gradients from a per-vertex position gradient.
void accumulate_shape_gradient(const FaceBasis& basis, const Vertices& grad_v,
                               FaceCoefficients& out) {
  const Eigen::Map<const Eigen::VectorXd> flat(grad_v.data(), grad_v.size());
  out.alpha += basis.id.transpose() * flat;
  out.beta += basis.exp.transpose() * flat;
}

}  // namespace

FaceCoefficients render_face_backward(const RenderedFace& r,
                                      const FaceCoefficients& coefficients,
                                      const FaceBasis& basis,
                                      const CameraModel& camera,
                                      const Image& grad_color) {
  Image g = grad_color;
  if (g.data().size() != r.clamped.size()) {
    throw ShapeError("render_face_backward: gradient image size mismatch");
  }
  for (std::size_t i = 0; i < r.clamped.size(); ++i) {
    if (r.clamped[i]) g.data()[i] = 0.0;
  }
  const RasterGradients rg = rasterize_backward(r.framebuffer, g);
  const ShadeGradients sg = shade_texture_backward(r.texture, r.normals,
                                                   coefficients.delta,
                                                   rg.attributes);
  const ProjectionGradients pg =
      project_backward(r.vertices, coefficients.rotation,
                       coefficients.translation, camera, rg.positions);
  const Vertices grad_v =
      pg.vertices + vertex_normals_backward(r.vertices, basis.triangles, sg.normals);

  FaceCoefficients out = FaceCoefficients::zeros(basis.dims());
  accumulate_shape_gradient(basis, grad_v, out);
  const Eigen::Map<const Eigen::VectorXd> tex_flat(sg.texture.data(),
                                                   sg.texture.size());
  out.gamma = basis.tex.transpose() * tex_flat;
  out.delta = sg.delta;
  out.rotation = pg.rotation;
  out.translation = pg.translation;
  return out;
}

Points2 project_landmarks(const FaceCoefficients& coefficients,
                          const FaceBasis& basis, const CameraModel& camera) {
  if (basis.landmarks.size() != kNumLandmarks) {
    throw ShapeError("project_landmarks: basis must carry 68 landmark indices");
  }
  const Vertices v = synthesize_shape(basis, coefficients.alpha, coefficients.beta);
  Vertices lm(kNumLandmarks, 3);
  for (int k = 0; k < kNumLandmarks; ++k) lm.row(k) = v.row(basis.landmarks[k]);
  return project(lm, coefficients.rotation, coefficients.translation, camera)
      .points;
}

FaceCoefficients project_landmarks_backward(const FaceCoefficients& coefficients,
                                            const FaceBasis& basis,
                                            const CameraModel& camera,
                                            const Points2& grad_landmarks) {
  if (grad_landmarks.rows() != kNumLandmarks) {
    throw ShapeError("project_landmarks_backward: expected 68 gradient rows");
  }
  const Vertices v = synthesize_shape(basis, coefficients.alpha, coefficients.beta);
  Vertices lm(kNumLandmarks, 3);
  for (int k = 0; k < kNumLandmarks; ++k) lm.row(k) = v.row(basis.landmarks[k]);
  const ProjectionGradients pg =
      project_backward(lm, coefficients.rotation, coefficients.translation,
                       camera, grad_landmarks);
  Vertices grad_v = Vertices::Zero(v.rows(), 3);
  for (int k = 0; k < kNumLandmarks; ++k) grad_v.row(basis.landmarks[k]) += pg.vertices.row(k);

  FaceCoefficients out = FaceCoefficients::zeros(basis.dims());
  accumulate_shape_gradient(basis, grad_v, out);
  out.rotation = pg.rotation;
  out.translation = pg.translation;
  return out;
}

}  // namespace msma
