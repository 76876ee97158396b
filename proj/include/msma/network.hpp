// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// The coefficient regressor: a residual backbone producing a four-level
// pyramid, multi-scale fusion (MSF) of the last three levels, one multi-scale
// large-kernel attention (MLKA) block per fused level, and six pooled affine
// heads.
//
// Every block returns its output with a backward closure that maps the
// output gradient to the input gradient and accumulates parameter gradients
// into a caller-supplied structure of the same layout as the parameters.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msma/morphable_model.hpp"
#include "msma/tensor.hpp"

namespace msma {

struct NetworkConfig {
  int stem_width = 6;
  std::array<int, 4> widths{12, 24, 48, 96};
  BasisDims dims;

  /// Pyramid widths of the full-size reference model, used for shape checks.
  static NetworkConfig reference();
  /// Throws ParameterError on non-positive widths.
  void validate() const;
};

// ---------------------------------------------------------------------------
// parameters

struct ResidualStageParams {
  Tensor4 conv1;     // (out, in, 3, 3), stride 2
  Tensor4 conv2;     // (out, out, 3, 3)
  Tensor4 shortcut;  // (out, in, 1, 1), stride 2
};

struct BackboneParams {
  Tensor4 stem;  // (stem_width, 3, 3, 3), stride 2
  std::array<ResidualStageParams, 4> stages;
};

/// Kernels aligning one pyramid level to another. Upsampling holds a single
/// (C_target, C_source, 1, 1) projection; downsampling holds one 3x3
/// stride-2 kernel per halving; same-level alignment holds none.
struct MsfAlignParams {
  std::vector<Tensor4> kernels;
};

struct MsfParams {
  /// align[r][j]: level j aligned to retained level r + 1 (r = 0, 1, 2).
  std::array<std::array<MsfAlignParams, 4>, 3> align;
};

struct MlkaBranchParams {
  Tensor4 depthwise;  // (c, 1, k, k)
  Tensor4 dilated;    // (c, 1, k, k), dilation d
  Tensor4 pointwise;  // (c, c, 1, 1)
  Tensor4 gate;       // (c, 1, k, k)
};

struct MlkaParams {
  std::array<MlkaBranchParams, 3> branches;  // (k, d) = (3, 2), (5, 3), (7, 4)
  Tensor4 projection;                        // (C, C, 1, 1)
  Tensor4 scale;                             // (1, 1, 1, 1)
};

struct AffineParams {
  Tensor4 weight;  // (out, in, 1, 1)
  Tensor4 bias;    // (out, 1, 1, 1)
};

struct HeadParams {
  AffineParams alpha, beta;         // from the lowest-resolution fused map
  AffineParams gamma, rotation;     // from the middle map
  AffineParams delta, translation;  // from the highest-resolution map
};

struct NetworkParams {
  NetworkConfig config;
  BackboneParams backbone;
  MsfParams msf;
  std::array<MlkaParams, 3> mlka;  // per retained level, high to low resolution
  HeadParams heads;
};

/// MLKA kernel size and dilation of branch b.
struct MlkaBranchShape {
  int kernel;
  int dilation;
};
inline constexpr std::array<MlkaBranchShape, 3> kMlkaBranches{{{3, 2}, {5, 3}, {7, 4}}};

MlkaParams init_mlka(int channels, std::uint64_t seed, double scale = 0.5);

/// Seeded He-style initialisation. Head weights start small and head biases
/// equal `head_bias` (packed into the six heads).
NetworkParams init_network(const NetworkConfig& config, std::uint64_t seed,
                           const FaceCoefficients& head_bias);

/// Same layout as `params`, every tensor zero.
NetworkParams zeros_like(const NetworkParams& params);

/// Visits every learnable tensor in a fixed order with a stable name such as
/// "backbone.stage2.conv1" or "mlka1.branch0.gate".
void for_each_parameter(NetworkParams& params,
                        const std::function<void(const std::string&, Tensor4&)>& fn);
void for_each_parameter(const NetworkParams& params,
                        const std::function<void(const std::string&, const Tensor4&)>& fn);
std::size_t parameter_count(const NetworkParams& params);

// ---------------------------------------------------------------------------
// blocks

template <class Params>
struct BlockResult {
  Tensor4 output;
  /// grad_output -> grad_input; adds parameter gradients into `grads`.
  std::function<Tensor4(const Tensor4&, Params&)> backward;
};

struct FeaturePyramid {
  std::array<Tensor4, 4> levels;  // strides 4, 8, 16, 32
};

struct BackboneResult {
  FeaturePyramid pyramid;
  std::function<Tensor4(const FeaturePyramid&, BackboneParams&)> backward;
};

/// Input N x 3 x H x W with H and W divisible by 32.
BackboneResult backbone_forward(const Tensor4& image, const BackboneParams& params);

/// Aligns `source` to `target` (N must agree). Direction follows the size
/// ratio, which must be a power of two; the kernel count must match it.
BlockResult<MsfAlignParams> msf_align(const Tensor4& source, const Shape4& target,
                                      const MsfAlignParams& params);

struct MsfFuseResult {
  Tensor4 output;
  /// Returns one gradient per pyramid level.
  std::function<std::array<Tensor4, 4>(const Tensor4&, MsfParams&)> backward;
};

/// ReLU(F_i + sum_{j != i} Align(F_j -> F_i)) for level i in {1, 2, 3}.
/// Throws StateError when any level is missing.
MsfFuseResult msf_fuse(const FeaturePyramid& pyramid, int level,
                       const MsfParams& params);

/// F_out = F_in + Proj(concat_k(LKA_k(F_k) * X_k(F_k))) * scale. With
/// scale == 0 the output is a copy of the input.
BlockResult<MlkaParams> mlka_block(const Tensor4& input, const MlkaParams& params);

struct HeadsResult {
  Tensor4 coefficients;  // (N, 239, 1, 1), packed order
  /// Gradient w.r.t. the packed output -> gradients w.r.t. (low, mid, high).
  std::function<std::array<Tensor4, 3>(const Tensor4&, HeadParams&)> backward;
};

HeadsResult regression_heads(const Tensor4& fused_low, const Tensor4& fused_mid,
                             const Tensor4& fused_high, const HeadParams& params,
                             const BasisDims& dims);

/// Row n of a (N, P, 1, 1) packed tensor as FaceCoefficients.
FaceCoefficients coefficients_row(const Tensor4& packed, int n, const BasisDims& dims);

struct NetworkResult {
  Tensor4 coefficients;  // (N, P, 1, 1)
  std::function<NetworkParams(const Tensor4&)> backward;
};

/// backbone -> msf_fuse(1, 2, 3) -> mlka per level -> heads.
NetworkResult network_forward(const Tensor4& image, const NetworkParams& params);

// ---------------------------------------------------------------------------
// shape inference (runs the same size arithmetic without arithmetic on data)

struct NetworkShapes {
  std::array<Shape4, 4> pyramid;
  std::array<Shape4, 3> fused;  // levels 1, 2, 3 after fusion
  std::array<Shape4, 3> mlka;
  std::array<int, 6> head_outputs;  // alpha, beta, gamma, rotation, delta, translation
  int packed_length = 0;
};

Shape4 msf_align_shape(const Shape4& source, const Shape4& target,
                       const std::vector<Shape4>& kernels);
NetworkShapes infer_shapes(const NetworkConfig& config, const Shape4& input);

}  // namespace msma
