// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Analysis-by-synthesis: adaptive-moment descent on the face coefficients
// of a single image, and one-step weakly supervised training of the toy
// regressor over a batch.

#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "msma/camera.hpp"
#include "msma/error.hpp"
#include "msma/losses.hpp"
#include "msma/morphable_model.hpp"
#include "msma/network.hpp"

namespace msma {

/// Per-attribute multipliers on the learning rate. The coefficients live on
/// very different scales (radians, millimetres, unit-norm basis weights), so
/// one step size cannot serve them all.
struct LearningRateScales {
  double alpha = 1000.0;
  double beta = 1000.0;
  double gamma = 50.0;
  double rotation = 5.0;
  double translation = 1000.0;  // 0.4 mm per step at the base rate
  double delta = 10.0;
};

struct FitConfig {
  int max_iterations = 500;
  double learning_rate = 4e-4;
  double lr_decay_factor = 0.5;
  int lr_decay_interval = 200;
  double convergence_tolerance = 1e-7;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  LossWeights loss_weights;
  LearningRateScales lr_scales;
  std::uint64_t seed = 0;

  /// Throws ParameterError when any invariant fails. Training accepts a zero
  /// learning rate (a null step); fitting does not.
  void validate(bool allow_zero_rate = false) const;
};

/// base * factor^floor(iteration / interval).
double lr_schedule(int iteration, const FitConfig& config);

struct FitRecord {
  int iteration = 0;
  double total = 0.0;
  LossBreakdown breakdown;
  double gradient_norm = 0.0;
  double learning_rate = 0.0;
};

struct FitTrace {
  std::vector<FitRecord> records;
};

/// A non-finite loss or gradient; carries the iterations recorded so far.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, FitTrace trace)
      : Error(message), trace_(std::move(trace)) {}
  const FitTrace& trace() const { return trace_; }

 private:
  FitTrace trace_;
};

/// Bias-corrected adaptive-moment optimiser over a flat vector.
class Adam {
 public:
  Adam(Eigen::Index size, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8);
  /// x <- x - lr_i * m_hat_i / (sqrt(v_hat_i) + eps), element-wise rates.
  void step(Eigen::VectorXd& x, const Eigen::VectorXd& grad,
            const Eigen::VectorXd& learning_rates);
  void step(Eigen::VectorXd& x, const Eigen::VectorXd& grad, double learning_rate);
  int steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, epsilon_;
  Eigen::VectorXd m_, v_;
  int t_ = 0;
};

/// All zeros except unit-irradiance lighting and a translation that centres
/// the mean face with its half-extent spanning 40% of the shorter image side.
FaceCoefficients default_initialization(const FaceBasis& basis,
                                        const CameraModel& camera);

struct FitResult {
  FaceCoefficients coefficients;
  FitTrace trace;
};

/// Each iteration evaluates the loss at the current coefficients, records
/// it, and then steps. Stops after max_iterations or once the relative loss
/// change stays below the tolerance for 10 consecutive iterations.
FitResult fit_coefficients(const FitTarget& target, const FaceBasis& basis,
                           const CameraModel& camera, const FitConfig& config,
                           const Embedder& embedder);
FitResult fit_coefficients(const FitTarget& target, const FaceBasis& basis,
                           const CameraModel& camera, const FitConfig& config,
                           const Embedder& embedder, const FaceCoefficients& init);

// ---------------------------------------------------------------------------
// network training

struct TrainState {
  std::vector<Adam> moments;  // one per parameter tensor, visit order
  int step = 0;
};

TrainState make_train_state(const NetworkParams& params, const FitConfig& config);

struct BatchLoss {
  double mean = 0.0;
  std::vector<double> per_sample;
};

/// Stacks the batch images into an N x 3 x H x W tensor.
Tensor4 stack_images(const std::vector<FitTarget>& batch);

/// Mean objective over the batch for the coefficients the network predicts.
BatchLoss evaluate_batch(const NetworkParams& params, const std::vector<FitTarget>& batch,
                         const FaceBasis& basis, const CameraModel& camera,
                         const LossWeights& weights, const Embedder& embedder);

/// One optimiser step on every network parameter against the batch mean
/// loss. Returns the pre-step batch loss.
BatchLoss train_step(NetworkParams& params, TrainState& state,
                     const std::vector<FitTarget>& batch, const FaceBasis& basis,
                     const CameraModel& camera, const FitConfig& config,
                     const Embedder& embedder);

}  // namespace msma
