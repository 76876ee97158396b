// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/camera.hpp"

#include <cmath>
#include <string>

#include "msma/error.hpp"

namespace msma {

EulerRotation rotation_matrix(const Eigen::Vector3d& euler) {
  const double cx = std::cos(euler.x()), sx = std::sin(euler.x());
  const double cy = std::cos(euler.y()), sy = std::sin(euler.y());
  const double cz = std::cos(euler.z()), sz = std::sin(euler.z());
  Eigen::Matrix3d Rx, Ry, Rz, dRx, dRy, dRz;
  Rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
  Ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
  Rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
  dRx << 0, 0, 0, 0, -sx, -cx, 0, cx, -sx;
  dRy << -sy, 0, cy, 0, 0, 0, -cy, 0, -sy;
  dRz << -sz, -cz, 0, cz, -sz, 0, 0, 0, 0;
  EulerRotation r;
  r.matrix = Rz * Ry * Rx;
  r.partials = {Rz * Ry * dRx, Rz * dRy * Rx, dRz * Ry * Rx};
  return r;
}

CameraModel CameraModel::for_image(int height, int width) {
  CameraModel cam;
  cam.height = height;
  cam.width = width;
  cam.focal_length = 1015.0 * width / 224.0;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.validate();
  return cam;
}

void CameraModel::validate() const {
  if (height < 1 || width < 1) {
    throw ParameterError("camera: image size must be positive");
  }
  if (!(focal_length > 0.0) || !std::isfinite(focal_length)) {
    throw ParameterError("camera: focal length must be > 0");
  }
  if (!(cx >= 0.0 && cx <= width && cy >= 0.0 && cy <= height)) {
    throw ParameterError("camera: principal point outside the image");
  }
}

Projection project(const Vertices& vertices, const Eigen::Vector3d& euler,
                   const Eigen::Vector3d& translation,
                   const CameraModel& camera) {
  camera.validate();
  const Eigen::Matrix3d R = rotation_matrix(euler).matrix;
  const Eigen::Index V = vertices.rows();
  Projection p;
  p.camera_points.resize(V, 3);
  p.points.resize(V, 2);
  p.depth.resize(V);
  for (Eigen::Index i = 0; i < V; ++i) {
    const Eigen::Vector3d q = R * vertices.row(i).transpose() + translation;
    p.camera_points.row(i) = q.transpose();
    p.depth[i] = q.z();
    if (camera.mode == CameraMode::kPerspective) {
      if (!(q.z() > camera.near_threshold)) {
        throw ProjectionError("projection: vertex " + std::to_string(i) +
                                  " lies behind the camera (z = " +
                                  std::to_string(q.z()) + ")",
                              static_cast<int>(i));
      }
      p.points(i, 0) = camera.focal_length * q.x() / q.z() + camera.cx;
      p.points(i, 1) = camera.focal_length * q.y() / q.z() + camera.cy;
    } else {
      p.points(i, 0) = camera.focal_length * q.x() + camera.cx;
      p.points(i, 1) = camera.focal_length * q.y() + camera.cy;
    }
  }
  return p;
}

ProjectionGradients project_backward(const Vertices& vertices,
                                     const Eigen::Vector3d& euler,
                                     const Eigen::Vector3d& translation,
                                     const CameraModel& camera,
                                     const Points2& grad_points) {
  if (grad_points.rows() != vertices.rows()) {
    throw ShapeError("project_backward: gradient row count mismatch");
  }
  const EulerRotation rot = rotation_matrix(euler);
  const double f = camera.focal_length;
  ProjectionGradients g;
  g.vertices = Vertices::Zero(vertices.rows(), 3);
  for (Eigen::Index i = 0; i < vertices.rows(); ++i) {
    const double gu = grad_points(i, 0);
    const double gv = grad_points(i, 1);
    if (gu == 0.0 && gv == 0.0) continue;
    const Eigen::Vector3d s = vertices.row(i).transpose();
    const Eigen::Vector3d q = rot.matrix * s + translation;
    Eigen::Vector3d gq;
    if (camera.mode == CameraMode::kPerspective) {
      const double iz = 1.0 / q.z();
      gq << f * iz * gu, f * iz * gv,
          -f * iz * iz * (q.x() * gu + q.y() * gv);
    } else {
      gq << f * gu, f * gv, 0.0;
    }
    g.translation += gq;
    g.vertices.row(i) = (rot.matrix.transpose() * gq).transpose();
    for (int k = 0; k < 3; ++k) g.rotation[k] += gq.dot(rot.partials[k] * s);
  }
  return g;
}

}  // namespace msma
