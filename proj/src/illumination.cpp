// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/illumination.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "msma/error.hpp"

namespace msma {

namespace {

const double kPi = std::numbers::pi;
const double kC0 = 0.5 * std::sqrt(1.0 / kPi);
const double kC1 = std::sqrt(3.0 / (4.0 * kPi));
const double kC2 = 0.5 * std::sqrt(15.0 / kPi);
const double kC20 = 0.25 * std::sqrt(5.0 / kPi);
const double kC22 = 0.25 * std::sqrt(15.0 / kPi);

ShVector sh_polynomial(const Eigen::Vector3d& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  ShVector psi;
  psi << kC0, kC1 * y, kC1 * z, kC1 * x, kC2 * x * y, kC2 * y * z,
      kC20 * (3.0 * z * z - 1.0), kC2 * x * z, kC22 * (x * x - y * y);
  return psi;
}

void require_unit(const Eigen::Vector3d& n) {
  if (!(std::abs(n.norm() - 1.0) <= 1e-6)) {
    throw ParameterError("sh_basis: normal must have unit length, |n| = " +
                         std::to_string(n.norm()));
  }
}

void require_rows(const Vertices& a, const Vertices& b, const char* what) {
  if (a.rows() != b.rows()) {
    throw ShapeError(std::string(what) + ": vertex count mismatch (" +
                     std::to_string(a.rows()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
}

}  // namespace

ShVector sh_basis(const Eigen::Vector3d& normal) {
  require_unit(normal);
  return sh_polynomial(normal);
}

Eigen::Matrix<double, 9, 3> sh_basis_gradient(const Eigen::Vector3d& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  Eigen::Matrix<double, 9, 3> J;
  J << 0, 0, 0,
       0, kC1, 0,
       0, 0, kC1,
       kC1, 0, 0,
       kC2 * y, kC2 * x, 0,
       0, kC2 * z, kC2 * y,
       0, 0, 6.0 * kC20 * z,
       kC2 * z, 0, kC2 * x,
       2.0 * kC22 * x, -2.0 * kC22 * y, 0;
  return J;
}

ShVector unit_irradiance_delta() {
  ShVector d = ShVector::Zero();
  d[0] = 2.0 * std::sqrt(kPi);
  return d;
}

Vertices shade_texture(const Vertices& texture, const Vertices& normals,
                       const ShVector& delta) {
  require_rows(texture, normals, "shade_texture");
  Vertices out(texture.rows(), 3);
  for (Eigen::Index i = 0; i < texture.rows(); ++i) {
    const double irradiance = delta.dot(sh_basis(normals.row(i).transpose()));
    out.row(i) = texture.row(i) * irradiance;
  }
  return out;
}

ShadeGradients shade_texture_backward(const Vertices& texture,
                                      const Vertices& normals,
                                      const ShVector& delta,
                                      const Vertices& grad_shaded) {
  require_rows(texture, normals, "shade_texture_backward");
  require_rows(texture, grad_shaded, "shade_texture_backward");
  ShadeGradients g;
  g.texture.resize(texture.rows(), 3);
  g.normals.resize(texture.rows(), 3);
  for (Eigen::Index i = 0; i < texture.rows(); ++i) {
    const Eigen::Vector3d n = normals.row(i).transpose();
    const ShVector psi = sh_basis(n);
    const double irradiance = delta.dot(psi);
    const double g_irr = grad_shaded.row(i).dot(texture.row(i));
    g.texture.row(i) = grad_shaded.row(i) * irradiance;
    g.delta += g_irr * psi;
    g.normals.row(i) = (g_irr * (sh_basis_gradient(n).transpose() * delta)).transpose();
  }
  return g;
}

}  // namespace msma
