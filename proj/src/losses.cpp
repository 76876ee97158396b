// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/losses.hpp"

#include <cmath>
#include <string>

#include "msma/error.hpp"
#include "msma/renderer.hpp"

namespace msma {

std::array<double, kNumLandmarks> default_landmark_weights() {
  std::array<double, kNumLandmarks> w;
  w.fill(1.0);
  for (int i = 60; i < 68; ++i) w[i] = 20.0;
  return w;
}

void LossWeights::validate() const {
  const std::array<std::pair<const char*, double>, 8> named{{
      {"lambda_pho", lambda_pho},
      {"lambda_per", lambda_per},
      {"lambda_lmk", lambda_lmk},
      {"lambda_3dmm", lambda_3dmm},
      {"lambda_refl", lambda_refl},
      {"lambda_alpha", lambda_alpha},
      {"lambda_beta", lambda_beta},
      {"lambda_gamma", lambda_gamma},
  }};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ParameterError(std::string("loss weight ") + name +
                           " must be finite and non-negative");
    }
  }
  for (double v : landmark_weights) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ParameterError("landmark weights must be finite and non-negative");
    }
  }
}

// ---------------------------------------------------------------------------

ImageLoss photometric_loss(const Image& target, const Image& rendered,
                           const SkinMask& mask,
                           const std::vector<std::uint8_t>& coverage) {
  const int H = target.height();
  const int W = target.width();
  if (rendered.height() != H || rendered.width() != W || mask.height() != H ||
      mask.width() != W || coverage.size() != target.pixel_count()) {
    throw ShapeError("photometric_loss: image, render, mask and coverage sizes "
                     "must match");
  }
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < coverage.size(); ++i) {
    if (coverage[i]) weight_sum += mask.data()[i];
  }
  if (!(weight_sum > 0.0)) {
    throw DegenerateError("photometric_loss: skin mask is empty over the "
                          "rendered face region");
  }
  ImageLoss out;
  out.grad = Image(H, W, 0.0);
  double acc = 0.0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      const double a = mask.data()[p];
      if (!coverage[p] || a == 0.0) continue;
      double r[3];
      double sq = 0.0;
      for (int c = 0; c < 3; ++c) {
        r[c] = rendered.at(y, x, c) - target.at(y, x, c);
        sq += r[c] * r[c];
      }
      const double norm = std::sqrt(sq);
      acc += a * norm;
      if (norm > 0.0) {
        for (int c = 0; c < 3; ++c) {
          out.grad.at(y, x, c) = a * r[c] / (norm * weight_sum);
        }
      }
    }
  }
  out.value = acc / weight_sum;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Cell {
  int y0, y1, x0, x1;  // half-open
};

Cell pool_cell(int gy, int gx, int grid, int H, int W) {
  // floor(i*H/g) .. ceil((i+1)*H/g)
  return {gy * H / grid, ((gy + 1) * H + grid - 1) / grid, gx * W / grid,
          ((gx + 1) * W + grid - 1) / grid};
}

}  // namespace

AveragePoolEmbedder::AveragePoolEmbedder(int grid) : grid_(grid) {
  if (grid < 1) throw ParameterError("AveragePoolEmbedder: grid must be >= 1");
}

Eigen::VectorXd AveragePoolEmbedder::embed(const Image& image) const {
  const int H = image.height();
  const int W = image.width();
  if (H < grid_ || W < grid_) {
    throw ShapeError("AveragePoolEmbedder: image smaller than the pooling grid");
  }
  Eigen::VectorXd e(3 * grid_ * grid_);
  for (int c = 0; c < 3; ++c) {
    for (int gy = 0; gy < grid_; ++gy) {
      for (int gx = 0; gx < grid_; ++gx) {
        const Cell cell = pool_cell(gy, gx, grid_, H, W);
        double s = 0.0;
        for (int y = cell.y0; y < cell.y1; ++y) {
          for (int x = cell.x0; x < cell.x1; ++x) s += image.at(y, x, c);
        }
        const int n = (cell.y1 - cell.y0) * (cell.x1 - cell.x0);
        e[(c * grid_ + gy) * grid_ + gx] = s / n;
      }
    }
  }
  return e;
}

Image AveragePoolEmbedder::embed_backward(
    const Image& image, const Eigen::VectorXd& grad_embedding) const {
  const int H = image.height();
  const int W = image.width();
  if (grad_embedding.size() != 3 * grid_ * grid_) {
    throw ShapeError("AveragePoolEmbedder: embedding gradient length mismatch");
  }
  Image g(H, W, 0.0);
  for (int c = 0; c < 3; ++c) {
    for (int gy = 0; gy < grid_; ++gy) {
      for (int gx = 0; gx < grid_; ++gx) {
        const Cell cell = pool_cell(gy, gx, grid_, H, W);
        const int n = (cell.y1 - cell.y0) * (cell.x1 - cell.x0);
        const double v = grad_embedding[(c * grid_ + gy) * grid_ + gx] / n;
        for (int y = cell.y0; y < cell.y1; ++y) {
          for (int x = cell.x0; x < cell.x1; ++x) g.at(y, x, c) += v;
        }
      }
    }
  }
  return g;
}

ImageLoss perceptual_loss(const Embedder& embedder, const Image& target,
                          const Image& rendered) {
  if (target.height() != rendered.height() || target.width() != rendered.width()) {
    throw ShapeError("perceptual_loss: image sizes differ");
  }
  const Eigen::VectorXd et = embedder.embed(target);
  const Eigen::VectorXd er = embedder.embed(rendered);
  if (et.size() != er.size()) {
    throw ShapeError("perceptual_loss: embedding lengths differ");
  }
  const double nt = et.norm();
  const double nr = er.norm();
  if (!(nt > 0.0) || !(nr > 0.0)) {
    throw DegenerateError("perceptual_loss: zero-norm embedding");
  }
  ImageLoss out;
  if (et / nt == er / nr) {
    // Exact minimiser: report the analytic zero rather than rounding noise.
    out.value = 0.0;
    out.grad = Image(rendered.height(), rendered.width(), 0.0);
    return out;
  }
  const double cosine = et.dot(er) / (nt * nr);
  out.value = 1.0 - cosine;
  // d(1 - cos)/d er = -(et / (|et||er|) - cos * er / |er|^2)
  const Eigen::VectorXd g = -(et / (nt * nr) - cosine * er / (nr * nr));
  out.grad = embedder.embed_backward(rendered, g);
  return out;
}

// ---------------------------------------------------------------------------

LandmarkLoss landmark_loss(const Points2& target, const Points2& predicted,
                           const std::array<double, kNumLandmarks>& weights) {
  if (target.rows() != kNumLandmarks || predicted.rows() != kNumLandmarks) {
    throw ShapeError("landmark_loss: expected 68 landmarks on both sides");
  }
  LandmarkLoss out;
  out.grad = Points2::Zero(kNumLandmarks, 2);
  double acc = 0.0;
  for (int n = 0; n < kNumLandmarks; ++n) {
    const Eigen::RowVector2d d = predicted.row(n) - target.row(n);
    acc += weights[n] * d.squaredNorm();
    out.grad.row(n) = 2.0 * weights[n] * d / kNumLandmarks;
  }
  out.value = acc / kNumLandmarks;
  return out;
}

RegularizationLoss coefficient_regularization(const Eigen::VectorXd& alpha,
                                              const Eigen::VectorXd& beta,
                                              const Eigen::VectorXd& gamma,
                                              const LossWeights& w) {
  RegularizationLoss out;
  out.value = w.lambda_alpha * alpha.squaredNorm() +
              w.lambda_beta * beta.squaredNorm() +
              w.lambda_gamma * gamma.squaredNorm();
  out.grad_alpha = 2.0 * w.lambda_alpha * alpha;
  out.grad_beta = 2.0 * w.lambda_beta * beta;
  out.grad_gamma = 2.0 * w.lambda_gamma * gamma;
  return out;
}

TextureLoss reflectance_loss(const Vertices& texture,
                             const std::vector<std::uint8_t>& skin_flags) {
  if (static_cast<Eigen::Index>(skin_flags.size()) != texture.rows()) {
    throw ShapeError("reflectance_loss: one skin flag per vertex required");
  }
  Eigen::RowVector3d mean = Eigen::RowVector3d::Zero();
  int n = 0;
  for (Eigen::Index v = 0; v < texture.rows(); ++v) {
    if (skin_flags[v]) {
      mean += texture.row(v);
      ++n;
    }
  }
  if (n == 0) throw DegenerateError("reflectance_loss: no skin vertex flagged");
  mean /= n;
  TextureLoss out;
  out.grad = Vertices::Zero(texture.rows(), 3);
  double acc = 0.0;
  for (Eigen::Index v = 0; v < texture.rows(); ++v) {
    if (!skin_flags[v]) continue;
    const Eigen::RowVector3d d = texture.row(v) - mean;
    acc += d.squaredNorm();
    // Deviations sum to zero, so the mean's own dependence cancels.
    out.grad.row(v) = 2.0 * d / n;
  }
  out.value = acc / n;
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json LossBreakdown::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const LossTerm& t : terms) {
    j[t.name] = {{"unweighted", t.unweighted},
                 {"weighted", t.weighted},
                 {"lambda", t.lambda}};
  }
  j["total"] = total;
  return j;
}

TotalLoss total_loss(const FaceCoefficients& c, const FitTarget& target,
                     const FaceBasis& basis, const CameraModel& camera,
                     const LossWeights& w, const Embedder& embedder,
                     bool compute_gradient) {
  w.validate();
  const BasisDims dims = basis.dims();
  if (!(c.dims() == dims)) {
    throw ShapeError("total_loss: coefficient and basis dimensions differ");
  }
  TotalLoss out;
  out.gradient = FaceCoefficients::zeros(dims);
  LossTerm pho{"pho", 0.0, w.lambda_pho, 0.0};
  LossTerm per{"per", 0.0, w.lambda_per, 0.0};
  LossTerm lmk{"lmk", 0.0, w.lambda_lmk, 0.0};
  LossTerm reg{"3dmm", 0.0, w.lambda_3dmm, 0.0};
  LossTerm refl{"refl", 0.0, w.lambda_refl, 0.0};

  auto add_gradient = [&](const FaceCoefficients& g, double scale) {
    out.gradient.alpha += scale * g.alpha;
    out.gradient.beta += scale * g.beta;
    out.gradient.gamma += scale * g.gamma;
    out.gradient.rotation += scale * g.rotation;
    out.gradient.translation += scale * g.translation;
    out.gradient.delta += scale * g.delta;
  };

  if (w.lambda_pho != 0.0 || w.lambda_per != 0.0) {
    if (target.image.height() != camera.height ||
        target.image.width() != camera.width) {
      throw ShapeError("total_loss: target image does not match the camera");
    }
    const RenderedFace rendered = render_face(c, basis, camera);
    const Image& ir = rendered.framebuffer.color;
    Image grad_image(camera.height, camera.width, 0.0);
    if (w.lambda_pho != 0.0) {
      const ImageLoss l =
          photometric_loss(target.image, ir, target.mask, rendered.framebuffer.mask);
      pho.unweighted = l.value;
      for (std::size_t i = 0; i < grad_image.data().size(); ++i) {
        grad_image.data()[i] += w.lambda_pho * l.grad.data()[i];
      }
    }
    if (w.lambda_per != 0.0) {
      const ImageLoss l = perceptual_loss(embedder, target.image, ir);
      per.unweighted = l.value;
      for (std::size_t i = 0; i < grad_image.data().size(); ++i) {
        grad_image.data()[i] += w.lambda_per * l.grad.data()[i];
      }
    }
    if (compute_gradient) {
      add_gradient(render_face_backward(rendered, c, basis, camera, grad_image), 1.0);
    }
  }

  if (w.lambda_lmk != 0.0) {
    const Points2 predicted = project_landmarks(c, basis, camera);
    const LandmarkLoss l = landmark_loss(target.landmarks, predicted, w.landmark_weights);
    lmk.unweighted = l.value;
    if (compute_gradient) {
      add_gradient(project_landmarks_backward(c, basis, camera, l.grad), w.lambda_lmk);
    }
  }

  if (w.lambda_3dmm != 0.0) {
    const RegularizationLoss l = coefficient_regularization(c.alpha, c.beta, c.gamma, w);
    reg.unweighted = l.value;
    if (compute_gradient) {
      out.gradient.alpha += w.lambda_3dmm * l.grad_alpha;
      out.gradient.beta += w.lambda_3dmm * l.grad_beta;
      out.gradient.gamma += w.lambda_3dmm * l.grad_gamma;
    }
  }

  if (w.lambda_refl != 0.0) {
    const Vertices texture = synthesize_texture(basis, c.gamma);
    const TextureLoss l = reflectance_loss(texture, basis.skin);
    refl.unweighted = l.value;
    if (compute_gradient) {
      const Eigen::Map<const Eigen::VectorXd> flat(l.grad.data(), l.grad.size());
      out.gradient.gamma += w.lambda_refl * (basis.tex.transpose() * flat);
    }
  }

  out.breakdown.terms = {pho, per, lmk, reg, refl};
  double total = 0.0;
  for (LossTerm& t : out.breakdown.terms) {
    t.weighted = t.lambda * t.unweighted;
    total += t.weighted;
  }
  out.breakdown.total = total;
  return out;
}

}  // namespace msma
