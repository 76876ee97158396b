// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/fitting.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "msma/illumination.hpp"

namespace msma {

void FitConfig::validate(bool allow_zero_rate) const {
  if (max_iterations < 0) throw ParameterError("fit: max_iterations must be >= 0");
  const bool rate_ok = allow_zero_rate ? learning_rate >= 0.0 : learning_rate > 0.0;
  if (!rate_ok || !std::isfinite(learning_rate)) {
    throw ParameterError("fit: learning_rate must be positive");
  }
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw ParameterError("fit: lr_decay_factor must lie in (0, 1]");
  }
  if (lr_decay_interval < 1) throw ParameterError("fit: lr_decay_interval must be >= 1");
  if (!(convergence_tolerance >= 0.0)) {
    throw ParameterError("fit: convergence_tolerance must be >= 0");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ParameterError("fit: moment decays must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ParameterError("fit: epsilon must be positive");
  const LearningRateScales& s = lr_scales;
  for (double v : {s.alpha, s.beta, s.gamma, s.rotation, s.translation, s.delta}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ParameterError("fit: learning-rate scales must be finite and >= 0");
    }
  }
  loss_weights.validate();
}

double lr_schedule(int iteration, const FitConfig& config) {
  if (iteration < 0) throw ParameterError("lr_schedule: iteration must be >= 0");
  return config.learning_rate *
         std::pow(config.lr_decay_factor, iteration / config.lr_decay_interval);
}

// ---------------------------------------------------------------------------

Adam::Adam(Eigen::Index size, double beta1, double beta2, double epsilon)
    : beta1_(beta1),
      beta2_(beta2),
      epsilon_(epsilon),
      m_(Eigen::VectorXd::Zero(size)),
      v_(Eigen::VectorXd::Zero(size)) {}

void Adam::step(Eigen::VectorXd& x, const Eigen::VectorXd& grad,
                const Eigen::VectorXd& lr) {
  if (x.size() != m_.size() || grad.size() != m_.size() || lr.size() != m_.size()) {
    throw ShapeError("Adam: vector length mismatch");
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double m_hat = m_[i] / c1;
    const double v_hat = v_[i] / c2;
    x[i] -= lr[i] * m_hat / (std::sqrt(v_hat) + epsilon_);
  }
}

void Adam::step(Eigen::VectorXd& x, const Eigen::VectorXd& grad, double learning_rate) {
  step(x, grad, Eigen::VectorXd::Constant(x.size(), learning_rate));
}

// ---------------------------------------------------------------------------

FaceCoefficients default_initialization(const FaceBasis& basis,
                                        const CameraModel& camera) {
  basis.validate();
  FaceCoefficients c = FaceCoefficients::zeros(basis.dims());
  c.delta = unit_irradiance_delta();
  const Eigen::Map<const Vertices> mean(basis.mean_shape.data(), basis.num_vertices(), 3);
  const Eigen::RowVector3d lo = mean.colwise().minCoeff();
  const Eigen::RowVector3d hi = mean.colwise().maxCoeff();
  const Eigen::RowVector3d centre = mean.colwise().mean();
  const double half_extent = 0.5 * std::max(hi.x() - lo.x(), hi.y() - lo.y());
  const double span = 0.4 * std::min(camera.height, camera.width);
  c.translation = Eigen::Vector3d(-centre.x(), -centre.y(),
                                  camera.focal_length * half_extent / span - lo.z());
  return c;
}

namespace {

Eigen::VectorXd learning_rates(const FitConfig& config, const BasisDims& dims,
                               double lr) {
  const PackedLayout L(dims);
  const LearningRateScales& s = config.lr_scales;
  Eigen::VectorXd rates(L.total);
  rates.segment(L.alpha, dims.id).setConstant(lr * s.alpha);
  rates.segment(L.beta, dims.exp).setConstant(lr * s.beta);
  rates.segment(L.translation, 3).setConstant(lr * s.translation);
  rates.segment(L.rotation, 3).setConstant(lr * s.rotation);
  rates.segment(L.delta, 9).setConstant(lr * s.delta);
  rates.segment(L.gamma, dims.tex).setConstant(lr * s.gamma);
  return rates;
}

void check_target(const FitTarget& target, const CameraModel& camera) {
  if (target.image.height() != camera.height || target.image.width() != camera.width) {
    throw ShapeError("fit: image is " + std::to_string(target.image.height()) + "x" +
                     std::to_string(target.image.width()) + " but the camera expects " +
                     std::to_string(camera.height) + "x" + std::to_string(camera.width));
  }
  if (target.mask.height() != camera.height || target.mask.width() != camera.width) {
    throw ShapeError("fit: mask size does not match the image");
  }
  for (double v : target.image.data()) {
    if (!std::isfinite(v)) throw ParameterError("fit: target image has a non-finite pixel");
  }
  target.mask.validate();
  if (target.landmarks.rows() != kNumLandmarks) {
    throw ShapeError("fit: expected 68 landmarks");
  }
  for (int n = 0; n < kNumLandmarks; ++n) {
    const double x = target.landmarks(n, 0);
    const double y = target.landmarks(n, 1);
    if (!(x >= 0.0 && x <= camera.width && y >= 0.0 && y <= camera.height)) {
      throw ParameterError("fit: landmark " + std::to_string(n) +
                           " lies outside the image");
    }
  }
}

}  // namespace

FitResult fit_coefficients(const FitTarget& target, const FaceBasis& basis,
                           const CameraModel& camera, const FitConfig& config,
                           const Embedder& embedder) {
  return fit_coefficients(target, basis, camera, config, embedder,
                          default_initialization(basis, camera));
}

FitResult fit_coefficients(const FitTarget& target, const FaceBasis& basis,
                           const CameraModel& camera, const FitConfig& config,
                           const Embedder& embedder, const FaceCoefficients& init) {
  config.validate();
  camera.validate();
  basis.validate();
  check_target(target, camera);
  const BasisDims dims = basis.dims();
  if (!(init.dims() == dims)) throw ShapeError("fit: initial coefficients do not fit the basis");

  FitResult result;
  FaceCoefficients current = init;
  Eigen::VectorXd x = current.pack();
  Adam adam(x.size(), config.beta1, config.beta2, config.epsilon);
  double previous = std::numeric_limits<double>::quiet_NaN();
  int calm = 0;

  for (int it = 0; it < config.max_iterations; ++it) {
    const TotalLoss loss =
        total_loss(current, target, basis, camera, config.loss_weights, embedder);
    const Eigen::VectorXd grad = loss.gradient.pack();
    if (!std::isfinite(loss.value()) || !grad.allFinite()) {
      throw DivergenceError("fit: non-finite loss or gradient at iteration " +
                                std::to_string(it),
                            result.trace);
    }
    const double lr = lr_schedule(it, config);
    result.trace.records.push_back({it, loss.value(), loss.breakdown, grad.norm(), lr});

    if (std::isfinite(previous)) {
      const double change = std::abs(loss.value() - previous) /
                            std::max(std::abs(previous), std::numeric_limits<double>::min());
      calm = change < config.convergence_tolerance ? calm + 1 : 0;
      if (calm >= 10) break;
    }
    previous = loss.value();

    adam.step(x, grad, learning_rates(config, dims, lr));
    current = FaceCoefficients::unpack(x, dims);
    current.wrap_angles();
    x = current.pack();
  }
  result.coefficients = current;
  return result;
}

// ---------------------------------------------------------------------------
// training

TrainState make_train_state(const NetworkParams& params, const FitConfig& config) {
  TrainState s;
  for_each_parameter(params, [&](const std::string&, const Tensor4& t) {
    s.moments.emplace_back(static_cast<Eigen::Index>(t.size()), config.beta1,
                           config.beta2, config.epsilon);
  });
  return s;
}

Tensor4 stack_images(const std::vector<FitTarget>& batch) {
  if (batch.empty()) throw ParameterError("train: batch is empty");
  const int H = batch[0].image.height();
  const int W = batch[0].image.width();
  Tensor4 t({static_cast<int>(batch.size()), 3, H, W});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Image& im = batch[n].image;
    if (im.height() != H || im.width() != W) {
      throw ShapeError("train: batch images differ in size");
    }
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) t.at(static_cast<int>(n), c, y, x) = im.at(y, x, c);
      }
    }
  }
  return t;
}

namespace {

struct BatchEvaluation {
  BatchLoss loss;
  Tensor4 grad_packed;
};

BatchEvaluation evaluate(const Tensor4& packed, const std::vector<FitTarget>& batch,
                         const FaceBasis& basis, const CameraModel& camera,
                         const LossWeights& weights, const Embedder& embedder,
                         bool with_gradient) {
  const BasisDims dims = basis.dims();
  const int N = static_cast<int>(batch.size());
  BatchEvaluation e;
  e.grad_packed = packed.zeros_like();
  double sum = 0.0;
  for (int n = 0; n < N; ++n) {
    const FaceCoefficients c = coefficients_row(packed, n, dims);
    const TotalLoss l = total_loss(c, batch[n], basis, camera, weights, embedder,
                                   with_gradient);
    e.loss.per_sample.push_back(l.value());
    sum += l.value();
    if (with_gradient) {
      const Eigen::VectorXd g = l.gradient.pack() / N;
      for (int k = 0; k < g.size(); ++k) e.grad_packed.at(n, k, 0, 0) = g[k];
    }
  }
  e.loss.mean = sum / N;
  return e;
}

}  // namespace

BatchLoss evaluate_batch(const NetworkParams& params, const std::vector<FitTarget>& batch,
                         const FaceBasis& basis, const CameraModel& camera,
                         const LossWeights& weights, const Embedder& embedder) {
  const NetworkResult net = network_forward(stack_images(batch), params);
  return evaluate(net.coefficients, batch, basis, camera, weights, embedder, false).loss;
}

BatchLoss train_step(NetworkParams& params, TrainState& state,
                     const std::vector<FitTarget>& batch, const FaceBasis& basis,
                     const CameraModel& camera, const FitConfig& config,
                     const Embedder& embedder) {
  config.validate(/*allow_zero_rate=*/true);
  if (!(params.config.dims == basis.dims())) {
    throw ShapeError("train: network and basis dimensions differ");
  }
  const NetworkResult net = network_forward(stack_images(batch), params);
  const BatchEvaluation e = evaluate(net.coefficients, batch, basis, camera,
                                     config.loss_weights, embedder, true);
  if (!std::isfinite(e.loss.mean)) {
    throw DivergenceError("train: non-finite batch loss", {});
  }
  const NetworkParams grads = net.backward(e.grad_packed);

  std::vector<const Tensor4*> grad_tensors;
  for_each_parameter(grads, [&](const std::string&, const Tensor4& t) {
    grad_tensors.push_back(&t);
  });
  if (state.moments.size() != grad_tensors.size()) {
    throw StateError("train: optimiser state does not match the parameters");
  }
  for (const Tensor4* g : grad_tensors) {
    for (double v : g->values()) {
      if (!std::isfinite(v)) throw DivergenceError("train: non-finite gradient", {});
    }
  }
  const double lr = lr_schedule(state.step, config);
  std::size_t k = 0;
  for_each_parameter(params, [&](const std::string&, Tensor4& t) {
    const Tensor4& g = *grad_tensors[k];
    Eigen::Map<Eigen::VectorXd> x(t.values().data(), static_cast<Eigen::Index>(t.size()));
    Eigen::VectorXd xv = x;
    const Eigen::Map<const Eigen::VectorXd> gv(g.values().data(),
                                               static_cast<Eigen::Index>(g.size()));
    state.moments[k].step(xv, gv, lr);
    x = xv;
    ++k;
  });
  ++state.step;
  return e.loss;
}

}  // namespace msma
