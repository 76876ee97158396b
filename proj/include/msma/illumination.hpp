// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Real spherical harmonics of bands 0-2 in the orthonormal convention, order
// [Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22], and per-vertex shading
// with a single scalar irradiance shared by the three colour channels.

#pragma once

#include <Eigen/Core>

#include "msma/morphable_model.hpp"

namespace msma {

/// Throws ParameterError when | |n| - 1 | > 1e-6.
ShVector sh_basis(const Eigen::Vector3d& normal);

/// Jacobian d Psi / d n of the polynomial form of each basis function
/// (row k is the gradient of Psi_k).
Eigen::Matrix<double, 9, 3> sh_basis_gradient(const Eigen::Vector3d& normal);

/// Delta that yields unit irradiance everywhere: (2 sqrt(pi), 0, ..., 0).
ShVector unit_irradiance_delta();

/// shaded_v = texture_v * sum_k delta_k Psi_k(n_v).
Vertices shade_texture(const Vertices& texture, const Vertices& normals,
                       const ShVector& delta);

struct ShadeGradients {
  Vertices texture;
  Vertices normals;
  ShVector delta = ShVector::Zero();
};

ShadeGradients shade_texture_backward(const Vertices& texture,
                                      const Vertices& normals,
                                      const ShVector& delta,
                                      const Vertices& grad_shaded);

}  // namespace msma
