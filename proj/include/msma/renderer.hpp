// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Hard z-buffered triangle rasterizer with analytic gradients.
//
// Barycentric coordinates are computed in screen space from the projected
// 2D positions. Pixel (x, y) is sampled at its centre (x + 0.5, y + 0.5).
// The nearest depth wins; at equal depth the lower triangle index wins.
// Pixel centres lying exactly on an edge follow a top-left rule evaluated
// on a canonical edge direction, so shared edges are covered exactly once.
//
// Gradients: attribute gradients are exact. Position gradients come from the
// barycentric-weight derivatives at covered pixels only; coverage changes at
// occlusion boundaries and silhouettes carry no gradient.
//
// Back-face culling: front faces have negative signed screen area in pixel
// coordinates (y down), i.e. they appear counter-clockwise on screen. This is
// the camera-space normal test evaluated on the projected triangle.

#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "msma/camera.hpp"
#include "msma/image.hpp"
#include "msma/morphable_model.hpp"

namespace msma {

struct PixelRecord {
  int triangle = -1;  // -1 when the pixel is not covered
  std::array<double, 3> bary{0.0, 0.0, 0.0};
};

struct RasterInputs {
  Points2 positions;
  Eigen::VectorXd depth;
  std::vector<Triangle> triangles;
  Vertices attributes;
};

struct RasterOptions {
  int height = 224;
  int width = 224;
  bool cull_back_faces = true;
  /// Keep a copy of the inputs so rasterize_backward can run.
  bool keep_records = true;
};

struct Framebuffer {
  int height = 0;
  int width = 0;
  Image color;                      // background (0, 0, 0)
  std::vector<double> depth;        // 0 where uncovered
  std::vector<std::uint8_t> mask;   // 1 where covered
  std::vector<PixelRecord> records; // one per pixel
  std::shared_ptr<const RasterInputs> inputs;

  bool covered(int y, int x) const {
    return mask[static_cast<std::size_t>(y) * width + x] != 0;
  }
  const PixelRecord& record(int y, int x) const {
    return records[static_cast<std::size_t>(y) * width + x];
  }
  std::size_t covered_count() const;
};

Framebuffer rasterize(const Points2& positions, const Eigen::VectorXd& depth,
                      const std::vector<Triangle>& triangles,
                      const Vertices& attributes, const RasterOptions& options);

struct RasterGradients {
  Vertices attributes;
  Points2 positions;
};

/// Throws StateError when the framebuffer was produced without records.
RasterGradients rasterize_backward(const Framebuffer& framebuffer,
                                   const Image& grad_color);

struct RenderOptions {
  bool cull_back_faces = true;
};

/// Forward state of the full face pipeline, kept for the backward pass.
struct RenderedFace {
  Framebuffer framebuffer;  // colours clamped to [0, 1]
  Vertices vertices;
  Vertices normals;
  Vertices texture;
  Vertices shaded;
  Projection projection;
  /// Per pixel and channel: 1 where the interpolated colour was clamped.
  std::vector<std::uint8_t> clamped;
};

/// synthesize_shape -> vertex_normals -> shade_texture -> project ->
/// rasterize, then clamp colours to [0, 1].
RenderedFace render_face(const FaceCoefficients& coefficients,
                         const FaceBasis& basis, const CameraModel& camera,
                         const RenderOptions& options = {});

/// Gradient of a loss w.r.t. every coefficient given its gradient w.r.t. the
/// rendered colour image. Clamped channels pass no gradient.
FaceCoefficients render_face_backward(const RenderedFace& rendered,
                                      const FaceCoefficients& coefficients,
                                      const FaceBasis& basis,
                                      const CameraModel& camera,
                                      const Image& grad_color);

/// 68 x 2 image positions of the landmark vertices.
Points2 project_landmarks(const FaceCoefficients& coefficients,
                          const FaceBasis& basis, const CameraModel& camera);

/// Gradient w.r.t. alpha, beta, rotation and translation (other fields zero).
FaceCoefficients project_landmarks_backward(const FaceCoefficients& coefficients,
                                            const FaceBasis& basis,
                                            const CameraModel& camera,
                                            const Points2& grad_landmarks);

}  // namespace msma
