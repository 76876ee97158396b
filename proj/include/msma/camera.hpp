// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>

#include <Eigen/Core>

#include "msma/morphable_model.hpp"

namespace msma {

/// R = Rz(euler.z) * Ry(euler.y) * Rx(euler.x), acting on column vectors.
struct EulerRotation {
  Eigen::Matrix3d matrix;
  /// d matrix / d euler[k].
  std::array<Eigen::Matrix3d, 3> partials;
};

EulerRotation rotation_matrix(const Eigen::Vector3d& euler);

enum class CameraMode { kWeakPerspective, kPerspective };

/// Image coordinates are in pixels with the origin at the top-left corner
/// of the first pixel; pixel (x, y) has its centre at (x + 0.5, y + 0.5).
struct CameraModel {
  CameraMode mode = CameraMode::kPerspective;
  double focal_length = 1015.0;
  double cx = 112.0;
  double cy = 112.0;
  int height = 224;
  int width = 224;
  /// Perspective mode requires camera-space z above this value.
  double near_threshold = 1e-6;

  /// Perspective camera for an H x W image with focal 1015 px at 224 px
  /// width, scaled proportionally, and the principal point at the centre.
  static CameraModel for_image(int height, int width);
  void validate() const;
};

struct Projection {
  Points2 points;          // V x 2 pixels
  Eigen::VectorXd depth;   // camera-space z
  Vertices camera_points;  // R * s + t
};

Projection project(const Vertices& vertices, const Eigen::Vector3d& euler,
                   const Eigen::Vector3d& translation,
                   const CameraModel& camera);

struct ProjectionGradients {
  Vertices vertices;
  Eigen::Vector3d rotation = Eigen::Vector3d::Zero();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

/// Chains a gradient w.r.t. the projected image points back to vertices,
/// Euler angles, and translation. Depth carries no gradient.
ProjectionGradients project_backward(const Vertices& vertices,
                                     const Eigen::Vector3d& euler,
                                     const Eigen::Vector3d& translation,
                                     const CameraModel& camera,
                                     const Points2& grad_points);

}  // namespace msma
