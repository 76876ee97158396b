// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// The weakly supervised objective: photometric, perceptual, landmark,
// coefficient-prior and skin-reflectance terms, each returning its value and
// the gradient w.r.t. its direct input, plus total_loss which chains every
// term back to the face coefficients.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "msma/camera.hpp"
#include "msma/image.hpp"
#include "msma/morphable_model.hpp"

namespace msma {

/// Landmark weights: 20 on the inner-mouth points (60-67), 1 elsewhere.
std::array<double, kNumLandmarks> default_landmark_weights();

struct LossWeights {
  // Outer balance weights.
  double lambda_pho = 1.92;
  double lambda_per = 0.2;
  double lambda_lmk = 1.6e-3;
  double lambda_3dmm = 3e-4;
  double lambda_refl = 5.0;
  // Coefficient prior.
  double lambda_alpha = 1.0;
  double lambda_beta = 0.8;
  double lambda_gamma = 1.7e-2;
  std::array<double, kNumLandmarks> landmark_weights = default_landmark_weights();

  /// Throws ParameterError on any negative or non-finite weight.
  void validate() const;
};

struct ImageLoss {
  double value = 0.0;
  Image grad;  // w.r.t. the rendered image
};

/// A-weighted mean over covered pixels of the per-pixel RGB L2 norm of the
/// residual. `coverage` has one flag per pixel. The gradient at a pixel with
/// an exactly zero residual is taken as 0. Throws DegenerateError when the
/// weights sum to zero over the covered pixels.
ImageLoss photometric_loss(const Image& target, const Image& rendered,
                           const SkinMask& mask,
                           const std::vector<std::uint8_t>& coverage);

/// Image -> fixed-length feature vector with a vector-Jacobian product.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Eigen::VectorXd embed(const Image& image) const = 0;
  /// Gradient w.r.t. the image of <grad_embedding, embed(image)>.
  virtual Image embed_backward(const Image& image,
                               const Eigen::VectorXd& grad_embedding) const = 0;
};

/// Adaptive average pooling to grid x grid cells per channel, flattened
/// channel-major (c, row, col). Cell bounds follow floor(i*H/g) ..
/// ceil((i+1)*H/g), so any image size of at least grid x grid works.
class AveragePoolEmbedder final : public Embedder {
 public:
  explicit AveragePoolEmbedder(int grid = 8);
  Eigen::VectorXd embed(const Image& image) const override;
  Image embed_backward(const Image& image,
                       const Eigen::VectorXd& grad_embedding) const override;
  int grid() const { return grid_; }

 private:
  int grid_;
};

/// 1 - cos(embed(target), embed(rendered)). Throws DegenerateError when
/// either embedding has zero norm.
ImageLoss perceptual_loss(const Embedder& embedder, const Image& target,
                          const Image& rendered);

struct LandmarkLoss {
  double value = 0.0;
  Points2 grad;  // w.r.t. predicted landmarks
};

/// (1/68) sum_n w_n |p_n - p'_n|^2.
LandmarkLoss landmark_loss(const Points2& target, const Points2& predicted,
                           const std::array<double, kNumLandmarks>& weights);

struct RegularizationLoss {
  double value = 0.0;
  Eigen::VectorXd grad_alpha, grad_beta, grad_gamma;
};

RegularizationLoss coefficient_regularization(const Eigen::VectorXd& alpha,
                                              const Eigen::VectorXd& beta,
                                              const Eigen::VectorXd& gamma,
                                              const LossWeights& weights);

struct TextureLoss {
  double value = 0.0;
  Vertices grad;
};

/// Mean over flagged vertices of |T_v - mean_T|^2, where mean_T is the mean
/// albedo of the flagged vertices. Throws DegenerateError when no vertex is
/// flagged.
TextureLoss reflectance_loss(const Vertices& texture,
                             const std::vector<std::uint8_t>& skin_flags);

/// What the fit compares against.
struct FitTarget {
  Image image;
  Points2 landmarks;  // 68 x 2 pixels
  SkinMask mask;
};

struct LossTerm {
  std::string name;  // pho, per, lmk, 3dmm, refl
  double unweighted = 0.0;
  double lambda = 0.0;
  double weighted = 0.0;
};

struct LossBreakdown {
  std::vector<LossTerm> terms;  // fixed order pho, per, lmk, 3dmm, refl
  double total = 0.0;

  /// {"pho": {"unweighted": .., "weighted": .., "lambda": ..}, ...,
  ///  "total": ..}
  nlohmann::json to_json() const;
};

struct TotalLoss {
  LossBreakdown breakdown;
  FaceCoefficients gradient;  // zeros when not requested
  double value() const { return breakdown.total; }
};

/// lambda_pho L_pho + lambda_per L_per + lambda_lmk L_lmk
///   + lambda_3dmm L_3dmm + lambda_refl L_refl,
/// with the prior applied once. Terms whose lambda is 0 are not evaluated and
/// report 0, so their preconditions (non-empty mask, ...) do not apply.
TotalLoss total_loss(const FaceCoefficients& coefficients,
                     const FitTarget& target, const FaceBasis& basis,
                     const CameraModel& camera, const LossWeights& weights,
                     const Embedder& embedder, bool compute_gradient = true);

}  // namespace msma
