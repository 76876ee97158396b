// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Linear face model: shape = mean + identity basis * alpha + expression
// basis * beta, albedo = mean + texture basis * gamma. Coordinates are in
// millimetres in a camera-aligned frame (x right, y down, z away from the
// viewer), so a face at identity pose looks toward -z.

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace msma {

using Vertices = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;
using Triangle = std::array<int, 3>;
using ShVector = Eigen::Matrix<double, 9, 1>;

inline constexpr int kNumLandmarks = 68;
inline constexpr int kNoseTipLandmark = 30;

struct BasisDims {
  int id = 80;
  int exp = 64;
  int tex = 80;

  /// Length of the packed coefficient vector (239 at the defaults).
  int coefficient_count() const { return id + exp + tex + 3 + 3 + 9; }
  bool operator==(const BasisDims&) const = default;
};

struct FaceBasis {
  Eigen::VectorXd mean_shape;    // 3V, interleaved xyz
  Eigen::VectorXd mean_texture;  // 3V, interleaved rgb in [0, 1]
  Eigen::MatrixXd id;            // 3V x dims.id
  Eigen::MatrixXd exp;           // 3V x dims.exp
  Eigen::MatrixXd tex;           // 3V x dims.tex
  std::vector<Triangle> triangles;
  std::vector<int> landmarks;        // 68 vertex indices
  std::vector<std::uint8_t> skin;    // V flags, 1 = skin

  int num_vertices() const { return static_cast<int>(mean_shape.size() / 3); }
  BasisDims dims() const {
    return {static_cast<int>(id.cols()), static_cast<int>(exp.cols()),
            static_cast<int>(tex.cols())};
  }
  /// Throws ShapeError when any invariant on sizes or indices fails.
  void validate() const;
};

/// Packed order is (alpha, beta, translation, rotation, delta, gamma).
struct FaceCoefficients {
  Eigen::VectorXd alpha;
  Eigen::VectorXd beta;
  Eigen::VectorXd gamma;
  Eigen::Vector3d rotation = Eigen::Vector3d::Zero();     // Euler x, y, z (rad)
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();  // mm
  ShVector delta = ShVector::Zero();

  static FaceCoefficients zeros(const BasisDims& dims = {});
  static FaceCoefficients unpack(const Eigen::VectorXd& packed,
                                 const BasisDims& dims = {});
  Eigen::VectorXd pack() const;
  BasisDims dims() const {
    return {static_cast<int>(alpha.size()), static_cast<int>(beta.size()),
            static_cast<int>(gamma.size())};
  }
  /// Maps every Euler angle into (-pi, pi].
  void wrap_angles();
  bool operator==(const FaceCoefficients& o) const;
};

/// Offsets of each attribute inside the packed vector.
struct PackedLayout {
  int alpha, beta, translation, rotation, delta, gamma, total;
  explicit PackedLayout(const BasisDims& dims);
};

Vertices synthesize_shape(const FaceBasis& basis, const Eigen::VectorXd& alpha,
                          const Eigen::VectorXd& beta);
Vertices synthesize_texture(const FaceBasis& basis,
                            const Eigen::VectorXd& gamma);

struct VertexNormals {
  Vertices normals;
  /// Vertices whose incident faces are all degenerate (or that have none);
  /// their normal is left at zero.
  int degenerate_vertices = 0;
};

/// Area-weighted unit vertex normals; orientation follows the winding.
VertexNormals vertex_normals(const Vertices& vertices,
                             const std::vector<Triangle>& triangles);

/// Gradient of a loss w.r.t. vertex positions given its gradient w.r.t. the
/// normals returned by vertex_normals.
Vertices vertex_normals_backward(const Vertices& vertices,
                                 const std::vector<Triangle>& triangles,
                                 const Vertices& grad_normals);

/// Deterministic stand-in for a licensed face model: a face-like surface of
/// roughly +-90 mm with smooth, orthonormalised bases.
FaceBasis synthetic_basis(std::uint64_t seed, int num_vertices,
                          const BasisDims& dims = {});

}  // namespace msma
