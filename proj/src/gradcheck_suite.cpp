// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <utility>

#include "msma/camera.hpp"
#include "msma/error.hpp"
#include "msma/fitting.hpp"
#include "msma/gradcheck.hpp"
#include "msma/illumination.hpp"
#include "msma/losses.hpp"
#include "msma/morphable_model.hpp"
#include "msma/network.hpp"
#include "msma/renderer.hpp"
#include "msma/rng.hpp"
#include "msma/tensor.hpp"

namespace msma {

bool GradcheckSuiteResult::passed() const {
  return !cases.empty() &&
         std::all_of(cases.begin(), cases.end(), [](const GradcheckCase& c) { return c.passed(); });
}

double GradcheckSuiteResult::max_relative_error() const {
  double m = 0.0;
  for (const GradcheckCase& c : cases) m = std::max(m, c.max_relative_error);
  return m;
}

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> modules = {"tensor", "geometry", "losses", "network"};
  return modules;
}

namespace {

using Signature = std::vector<int>;
using StableObjective = std::function<std::pair<double, Signature>()>;
using Objective = std::function<double()>;

double relative_error(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
}

struct Tally {
  double max_error = 0.0;
  std::size_t entries = 0;
  std::size_t skipped = 0;

  void add(const Tally& o) {
    max_error = std::max(max_error, o.max_error);
    entries += o.entries;
    skipped += o.skipped;
  }
};

struct ProbeOptions {
  double eps = 1e-6;
  std::size_t max_entries = 0;  // 0 = every entry
  /// Extra attempts at eps / 10, eps / 100 when a probe straddles a kink or
  /// changes the rasterised signature.
  int refinements = 2;
};

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (k == 0 || k >= n) return idx;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.next() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Central differences of `f` over sampled entries of `storage`, which the
/// objective reads; the storage is restored afterwards.
Tally probe(std::span<double> storage, std::span<const double> analytic, const StableObjective& f,
            const ProbeOptions& options, Rng& rng) {
  if (storage.size() != analytic.size()) {
    throw ShapeError("gradcheck suite: analytic gradient length mismatch");
  }
  const Signature base = f().second;
  Tally tally;
  for (std::size_t i : sample_indices(storage.size(), options.max_entries, rng)) {
    const double x0 = storage[i];
    double best = std::numeric_limits<double>::infinity();
    double eps = options.eps;
    for (int attempt = 0; attempt <= options.refinements; ++attempt, eps /= 10.0) {
      storage[i] = x0 + eps;
      const auto [plus, sig_plus] = f();
      storage[i] = x0 - eps;
      const auto [minus, sig_minus] = f();
      storage[i] = x0;
      if (sig_plus != base || sig_minus != base) continue;
      if (!std::isfinite(plus) || !std::isfinite(minus) || !std::isfinite(analytic[i])) {
        throw GradcheckError("gradcheck suite: non-finite value at entry " + std::to_string(i));
      }
      best = std::min(best, relative_error(analytic[i], (plus - minus) / (2.0 * eps)));
      if (best <= kGradcheckTolerance) break;
    }
    if (std::isinf(best)) {
      ++tally.skipped;
    } else {
      tally.max_error = std::max(tally.max_error, best);
      ++tally.entries;
    }
  }
  return tally;
}

StableObjective unsigned_objective(Objective f) {
  return [f = std::move(f)]() { return std::make_pair(f(), Signature{}); };
}

Tally probe(std::span<double> storage, std::span<const double> analytic, const Objective& f,
            const ProbeOptions& options, Rng& rng) {
  return probe(storage, analytic, unsigned_objective(f), options, rng);
}

double weighted_sum(std::span<const double> values, std::span<const double> weights) {
  if (values.size() != weights.size()) throw ShapeError("gradcheck suite: probe weight size mismatch");
  return std::inner_product(values.begin(), values.end(), weights.begin(), 0.0);
}

template <class M>
std::span<double> span_of(M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <class M>
std::span<const double> cspan_of(const M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

Tensor4 random_tensor(const Shape4& shape, Rng& rng, double scale = 1.0, double min_abs = 0.0) {
  Tensor4 t(shape);
  for (double& v : t.values()) {
    double x = 0.0;
    do {
      x = rng.normal(0.0, scale);
    } while (std::abs(x) < min_abs);
    v = x;
  }
  return t;
}

Vertices random_vertices(Eigen::Index rows, Rng& rng, double lo, double hi) {
  Vertices v(rows, 3);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.uniform(lo, hi);
  return v;
}

Signature raster_signature(const Framebuffer& fb, const std::vector<std::uint8_t>* clamped = nullptr) {
  Signature s;
  s.reserve(fb.records.size() + (clamped ? clamped->size() : 0));
  for (const PixelRecord& r : fb.records) s.push_back(r.triangle);
  if (clamped) s.insert(s.end(), clamped->begin(), clamped->end());
  return s;
}

// Parameter visitors for block-level checks.
std::vector<Tensor4*> tensors_of(MlkaParams& p) {
  std::vector<Tensor4*> out;
  for (MlkaBranchParams& b : p.branches) {
    out.insert(out.end(), {&b.depthwise, &b.dilated, &b.pointwise, &b.gate});
  }
  out.insert(out.end(), {&p.projection, &p.scale});
  return out;
}

std::vector<Tensor4*> tensors_of(HeadParams& p) {
  std::vector<Tensor4*> out;
  for (AffineParams* a : {&p.alpha, &p.beta, &p.gamma, &p.rotation, &p.delta, &p.translation}) {
    out.insert(out.end(), {&a->weight, &a->bias});
  }
  return out;
}

std::vector<Tensor4*> tensors_of(MsfAlignParams& p) {
  std::vector<Tensor4*> out;
  for (Tensor4& k : p.kernels) out.push_back(&k);
  return out;
}

std::vector<Tensor4*> tensors_of(BackboneParams& p) {
  std::vector<Tensor4*> out{&p.stem};
  for (ResidualStageParams& s : p.stages) out.insert(out.end(), {&s.conv1, &s.conv2, &s.shortcut});
  return out;
}

template <class P>
P zeroed(P p) {
  for (Tensor4* t : tensors_of(p)) *t = Tensor4(t->shape());
  return p;
}

/// Checks a parameterised block: the probe is sum(w * output) over its
/// input and every parameter tensor.
template <class P>
Tally check_block(Tensor4& input, P& params,
                  const std::function<BlockResult<P>(const Tensor4&, const P&)>& run,
                  std::size_t input_entries, std::size_t param_entries, Rng& rng) {
  const BlockResult<P> base = run(input, params);
  const Tensor4 w = random_tensor(base.output.shape(), rng);
  P grads = zeroed(params);
  const Tensor4 grad_in = base.backward(w, grads);
  const Objective f = [&] { return weighted_sum(run(input, params).output.values(), w.values()); };
  Tally t;
  t.add(probe(input.values(), grad_in.values(), f, {1e-6, input_entries}, rng));
  const auto values = tensors_of(params);
  const auto grad_values = tensors_of(grads);
  for (std::size_t k = 0; k < values.size(); ++k) {
    t.add(probe(values[k]->values(), grad_values[k]->values(), f, {1e-6, param_entries}, rng));
  }
  return t;
}

GradcheckCase make_case(const std::string& module, const std::string& name, const Tally& t) {
  GradcheckCase c;
  c.module = module;
  c.name = name;
  c.max_relative_error = t.max_error;
  c.entries = t.entries;
  c.skipped = t.skipped;
  return c;
}

GradcheckCase op_case(const std::string& name, const OpApplication& op,
                      const std::vector<Tensor4>& inputs, std::uint64_t seed) {
  GradcheckOptions o;
  o.eps = 1e-6;
  o.seed = seed;
  const GradcheckReport r = gradcheck(op, inputs, o);
  Tally t;
  t.max_error = r.max_relative_error;
  t.entries = r.entries_checked;
  return make_case("tensor", name, t);
}

// ---------------------------------------------------------------------------
// tensor-core

void tensor_cases(std::vector<GradcheckCase>& out, std::uint64_t seed) {
  Rng rng(seed);
  out.push_back(op_case(
      "conv2d 3x3 pad 1",
      [](const std::vector<Tensor4>& x) { return conv2d(x[0], x[1], {1, 1, 1, 1}); },
      {random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, 3, 3}, rng)}, seed));
  out.push_back(op_case(
      "conv2d stride 2 dilation 2 groups 2",
      [](const std::vector<Tensor4>& x) { return conv2d(x[0], x[1], {2, 2, 2, 2}); },
      {random_tensor({1, 4, 7, 7}, rng), random_tensor({6, 2, 3, 3}, rng)}, seed));
  out.push_back(op_case(
      "conv2d depthwise 5x5",
      [](const std::vector<Tensor4>& x) { return conv2d(x[0], x[1], {1, 1, 3, 2}); },
      {random_tensor({1, 3, 6, 6}, rng), random_tensor({3, 1, 5, 5}, rng)}, seed));
  out.push_back(op_case(
      "pointwise_conv", [](const std::vector<Tensor4>& x) { return pointwise_conv(x[0], x[1]); },
      {random_tensor({2, 3, 4, 4}, rng), random_tensor({5, 3, 1, 1}, rng)}, seed));
  out.push_back(op_case(
      "interpolate bilinear 3x4 -> 7x5",
      [](const std::vector<Tensor4>& x) {
        return interpolate(x[0], 7, 5, InterpolationMode::kBilinear);
      },
      {random_tensor({1, 2, 3, 4}, rng)}, seed));
  out.push_back(op_case(
      "interpolate bilinear 8x8 -> 4x4",
      [](const std::vector<Tensor4>& x) {
        return interpolate(x[0], 4, 4, InterpolationMode::kBilinear);
      },
      {random_tensor({1, 2, 8, 8}, rng)}, seed));
  out.push_back(op_case(
      "interpolate nearest 3x3 -> 6x5",
      [](const std::vector<Tensor4>& x) {
        return interpolate(x[0], 6, 5, InterpolationMode::kNearest);
      },
      {random_tensor({1, 2, 3, 3}, rng)}, seed));
  out.push_back(op_case(
      "elementwise add",
      [](const std::vector<Tensor4>& x) { return elementwise(x[0], x[1], ElementwiseOp::kAdd); },
      {random_tensor({2, 3, 3, 2}, rng), random_tensor({2, 3, 3, 2}, rng)}, seed));
  out.push_back(op_case(
      "elementwise mul",
      [](const std::vector<Tensor4>& x) { return elementwise(x[0], x[1], ElementwiseOp::kMul); },
      {random_tensor({2, 3, 3, 2}, rng), random_tensor({2, 3, 3, 2}, rng)}, seed));
  out.push_back(op_case("relu", [](const std::vector<Tensor4>& x) { return relu(x[0]); },
                        {random_tensor({2, 3, 4, 4}, rng, 1.0, 0.05)}, seed));
  out.push_back(op_case(
      "concat_channels",
      [](const std::vector<Tensor4>& x) { return concat_channels(std::span<const Tensor4>(x)); },
      {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)}, seed));
  out.push_back(op_case(
      "fully_connected",
      [](const std::vector<Tensor4>& x) { return fully_connected(x[0], x[1], x[2]); },
      {random_tensor({3, 5, 1, 1}, rng), random_tensor({4, 5, 1, 1}, rng),
       random_tensor({4, 1, 1, 1}, rng)},
      seed));
  out.push_back(op_case(
      "global_average_pool",
      [](const std::vector<Tensor4>& x) { return global_average_pool(x[0]); },
      {random_tensor({2, 3, 4, 5}, rng)}, seed));
}

// ---------------------------------------------------------------------------
// geometry: normals, shading, projection, rasterisation, full render

struct RenderFixture {
  FaceBasis basis;
  CameraModel camera;
  FaceCoefficients coefficients;
};

RenderFixture render_fixture(std::uint64_t seed, int vertices, int size) {
  RenderFixture fx;
  fx.basis = synthetic_basis(seed, vertices);
  fx.camera = CameraModel::for_image(size, size);
  fx.coefficients = default_initialization(fx.basis, fx.camera);
  Rng rng(seed + 17);
  FaceCoefficients& c = fx.coefficients;
  for (double& v : c.alpha) v = rng.normal(0.0, 4.0);
  for (double& v : c.beta) v = rng.normal(0.0, 2.0);
  for (double& v : c.gamma) v = rng.normal(0.0, 0.3);
  c.rotation = {0.06, -0.1, 0.04};
  for (int k = 1; k < 9; ++k) c.delta[k] = rng.normal(0.0, 0.2);
  return fx;
}

void geometry_cases(std::vector<GradcheckCase>& out, std::uint64_t seed) {
  Rng rng(seed + 1);
  {
    const int V = 24;
    Vertices texture = random_vertices(V, rng, 0.2, 0.8);
    Vertices normals(V, 3);
    for (int i = 0; i < V; ++i) {
      Eigen::Vector3d n(rng.normal(), rng.normal(), rng.normal());
      normals.row(i) = n.normalized().transpose();
    }
    ShVector delta = unit_irradiance_delta();
    for (int k = 0; k < 9; ++k) delta[k] += rng.normal(0.0, 0.4);
    const Vertices w = random_vertices(V, rng, -1.0, 1.0);
    const ShadeGradients g = shade_texture_backward(texture, normals, delta, w);
    const Objective f = [&] {
      return weighted_sum(cspan_of(shade_texture(texture, normals, delta)), cspan_of(w));
    };
    Tally t;
    t.add(probe(span_of(texture), cspan_of(g.texture), f, {}, rng));
    // Normals stay within sh_basis's unit-length tolerance.
    t.add(probe(span_of(normals), cspan_of(g.normals), f, {1e-7}, rng));
    t.add(probe(span_of(delta), cspan_of(g.delta), f, {}, rng));
    out.push_back(make_case("geometry", "sh shading (texture, normals, delta)", t));
  }
  {
    const FaceBasis basis = synthetic_basis(seed, 120);
    Vertices v = Eigen::Map<const Vertices>(basis.mean_shape.data(), 120, 3);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += rng.normal(0.0, 1.0);
    const Vertices w = random_vertices(v.rows(), rng, -1.0, 1.0);
    const Vertices g = vertex_normals_backward(v, basis.triangles, w);
    const Objective f = [&] {
      return weighted_sum(cspan_of(vertex_normals(v, basis.triangles).normals), cspan_of(w));
    };
    out.push_back(make_case("geometry", "vertex normals",
                            probe(span_of(v), cspan_of(g), f, {1e-6, 90}, rng)));
  }
  for (const CameraMode mode : {CameraMode::kPerspective, CameraMode::kWeakPerspective}) {
    const FaceBasis basis = synthetic_basis(seed, 80);
    Vertices v = Eigen::Map<const Vertices>(basis.mean_shape.data(), 80, 3);
    CameraModel cam = CameraModel::for_image(64, 64);
    Eigen::Vector3d r(0.1, -0.2, 0.05);
    Eigen::Vector3d t(3.0, -2.0, 800.0);
    if (mode == CameraMode::kWeakPerspective) {
      cam.mode = mode;
      cam.focal_length = 0.3;
      t = {1.0, 2.0, 0.0};
    }
    Points2 w(v.rows(), 2);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    const ProjectionGradients g = project_backward(v, r, t, cam, w);
    const Objective f = [&] { return weighted_sum(cspan_of(project(v, r, t, cam).points), cspan_of(w)); };
    Tally tally;
    tally.add(probe(span_of(v), cspan_of(g.vertices), f, {1e-6, 60}, rng));
    tally.add(probe(span_of(r), cspan_of(g.rotation), f, {}, rng));
    tally.add(probe(span_of(t), cspan_of(g.translation), f, {}, rng));
    out.push_back(make_case("geometry",
                            mode == CameraMode::kPerspective ? "projection (perspective)"
                                                             : "projection (weak perspective)",
                            tally));
  }
  {
    RenderFixture fx = render_fixture(seed, 150, 40);
    const Projection p = project(synthesize_shape(fx.basis, fx.coefficients.alpha, fx.coefficients.beta),
                                 fx.coefficients.rotation, fx.coefficients.translation, fx.camera);
    Points2 positions = p.points;
    Vertices attributes = random_vertices(positions.rows(), rng, 0.0, 1.0);
    const RasterOptions opts{40, 40, true, true};
    const Framebuffer fb = rasterize(positions, p.depth, fx.basis.triangles, attributes, opts);
    Image w(40, 40);
    for (double& x : w.data()) x = rng.normal();
    const RasterGradients g = rasterize_backward(fb, w);
    const StableObjective f = [&] {
      const Framebuffer b = rasterize(positions, p.depth, fx.basis.triangles, attributes,
                                      {40, 40, true, false});
      return std::make_pair(weighted_sum(b.color.data(), w.data()), raster_signature(b));
    };
    Tally t;
    t.add(probe(span_of(positions), cspan_of(g.positions), f, {1e-6, 120}, rng));
    t.add(probe(span_of(attributes), cspan_of(g.attributes), f, {1e-6, 90}, rng));
    out.push_back(make_case("geometry", "rasterize (positions, attributes)", t));
  }
  {
    RenderFixture fx = render_fixture(seed, 150, 48);
    Eigen::VectorXd x = fx.coefficients.pack();
    const BasisDims dims = fx.basis.dims();
    const RenderedFace base = render_face(fx.coefficients, fx.basis, fx.camera);
    Image w(48, 48);
    for (double& v : w.data()) v = rng.normal();
    const Eigen::VectorXd g =
        render_face_backward(base, fx.coefficients, fx.basis, fx.camera, w).pack();
    const StableObjective f = [&] {
      const RenderedFace r = render_face(FaceCoefficients::unpack(x, dims), fx.basis, fx.camera);
      return std::make_pair(weighted_sum(r.framebuffer.color.data(), w.data()),
                            raster_signature(r.framebuffer, &r.clamped));
    };
    out.push_back(make_case("geometry", "render_face (all coefficients)",
                            probe(span_of(x), cspan_of(g), f, {}, rng)));
  }
  {
    RenderFixture fx = render_fixture(seed, 150, 64);
    Eigen::VectorXd x = fx.coefficients.pack();
    const BasisDims dims = fx.basis.dims();
    Points2 w(kNumLandmarks, 2);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    const Eigen::VectorXd g =
        project_landmarks_backward(fx.coefficients, fx.basis, fx.camera, w).pack();
    const Objective f = [&] {
      return weighted_sum(
          cspan_of(project_landmarks(FaceCoefficients::unpack(x, dims), fx.basis, fx.camera)),
          cspan_of(w));
    };
    out.push_back(make_case("geometry", "project_landmarks (all coefficients)",
                            probe(span_of(x), cspan_of(g), f, {}, rng)));
  }
}

// ---------------------------------------------------------------------------
// losses

Image random_image(int h, int w, Rng& rng) {
  Image im(h, w);
  for (double& v : im.data()) v = rng.uniform(0.05, 0.95);
  return im;
}

void loss_cases(std::vector<GradcheckCase>& out, std::uint64_t seed) {
  Rng rng(seed + 2);
  {
    const Image target = random_image(12, 10, rng);
    Image rendered = random_image(12, 10, rng);
    SkinMask mask(12, 10);
    for (double& v : mask.data()) v = rng.uniform(0.0, 1.0);
    std::vector<std::uint8_t> coverage(120);
    for (auto& c : coverage) c = rng.uniform() < 0.7 ? 1 : 0;
    const ImageLoss l = photometric_loss(target, rendered, mask, coverage);
    const Objective f = [&] { return photometric_loss(target, rendered, mask, coverage).value; };
    out.push_back(make_case("losses", "photometric",
                            probe(rendered.data(), l.grad.data(), f, {1e-6, 120}, rng)));
  }
  {
    const AveragePoolEmbedder embedder(4);
    const Image target = random_image(16, 16, rng);
    Image rendered = random_image(16, 16, rng);
    const ImageLoss l = perceptual_loss(embedder, target, rendered);
    const Objective f = [&] { return perceptual_loss(embedder, target, rendered).value; };
    out.push_back(make_case("losses", "perceptual (pooled embedding)",
                            probe(rendered.data(), l.grad.data(), f, {1e-6, 120}, rng)));
  }
  {
    Points2 target(kNumLandmarks, 2), predicted(kNumLandmarks, 2);
    for (Eigen::Index i = 0; i < target.size(); ++i) {
      target.data()[i] = rng.uniform(0.0, 128.0);
      predicted.data()[i] = target.data()[i] + rng.normal(0.0, 3.0);
    }
    const auto weights = default_landmark_weights();
    const LandmarkLoss l = landmark_loss(target, predicted, weights);
    const Objective f = [&] { return landmark_loss(target, predicted, weights).value; };
    out.push_back(make_case("losses", "landmark",
                            probe(span_of(predicted), cspan_of(l.grad), f, {}, rng)));
  }
  {
    Eigen::VectorXd a(80), b(64), g(80);
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal();
    for (double& v : g) v = rng.normal();
    const LossWeights w;
    const RegularizationLoss l = coefficient_regularization(a, b, g, w);
    const Objective f = [&] { return coefficient_regularization(a, b, g, w).value; };
    Tally t;
    t.add(probe(span_of(a), cspan_of(l.grad_alpha), f, {}, rng));
    t.add(probe(span_of(b), cspan_of(l.grad_beta), f, {}, rng));
    t.add(probe(span_of(g), cspan_of(l.grad_gamma), f, {}, rng));
    out.push_back(make_case("losses", "coefficient regularization", t));
  }
  {
    Vertices texture = random_vertices(40, rng, 0.1, 0.9);
    std::vector<std::uint8_t> flags(40);
    for (auto& s : flags) s = rng.uniform() < 0.6 ? 1 : 0;
    flags[0] = 1;
    const TextureLoss l = reflectance_loss(texture, flags);
    const Objective f = [&] { return reflectance_loss(texture, flags).value; };
    out.push_back(make_case("losses", "reflectance",
                            probe(span_of(texture), cspan_of(l.grad), f, {}, rng)));
  }
  {
    // End to end: every term active, target rendered from other coefficients.
    const int size = 64;
    RenderFixture fx = render_fixture(seed, 300, size);
    const FaceCoefficients truth = fx.coefficients;
    const RenderedFace rt = render_face(truth, fx.basis, fx.camera);
    FitTarget target;
    target.image = rt.framebuffer.color;
    target.landmarks = project_landmarks(truth, fx.basis, fx.camera);
    target.mask = SkinMask(size, size, 0.0);
    for (std::size_t i = 0; i < rt.framebuffer.mask.size(); ++i) {
      target.mask.data()[i] = rt.framebuffer.mask[i] ? 0.9 : 0.0;
    }
    FaceCoefficients c = truth;
    for (double& v : c.alpha) v += rng.normal(0.0, 2.0);
    for (double& v : c.gamma) v += rng.normal(0.0, 0.1);
    c.rotation += Eigen::Vector3d(0.02, -0.015, 0.01);
    c.translation += Eigen::Vector3d(1.0, -1.0, 5.0);
    for (int k = 1; k < 9; ++k) c.delta[k] += rng.normal(0.0, 0.05);
    const LossWeights weights;
    const AveragePoolEmbedder embedder;
    const BasisDims dims = fx.basis.dims();
    Eigen::VectorXd x = c.pack();
    const Eigen::VectorXd g =
        total_loss(c, target, fx.basis, fx.camera, weights, embedder).gradient.pack();
    const StableObjective f = [&] {
      const FaceCoefficients cx = FaceCoefficients::unpack(x, dims);
      const RenderedFace r = render_face(cx, fx.basis, fx.camera);
      const double v =
          total_loss(cx, target, fx.basis, fx.camera, weights, embedder, false).value();
      return std::make_pair(v, raster_signature(r.framebuffer, &r.clamped));
    };
    out.push_back(make_case("losses", "total_loss (all 239 coefficients)",
                            probe(span_of(x), cspan_of(g), f, {}, rng)));
  }
}

// ---------------------------------------------------------------------------
// network blocks

void network_cases(std::vector<GradcheckCase>& out, std::uint64_t seed) {
  Rng rng(seed + 3);
  const NetworkConfig config;
  const NetworkParams net = init_network(config, seed, FaceCoefficients::zeros(config.dims));
  {
    Tensor4 input = random_tensor({1, 6, 9, 9}, rng);
    MlkaParams params = init_mlka(6, seed, 0.5);
    out.push_back(make_case(
        "network", "mlka block (input, all parameters)",
        check_block<MlkaParams>(input, params, mlka_block, 60, 10, rng)));
  }
  {
    Tensor4 source = random_tensor({1, 4, 4, 4}, rng);
    MsfAlignParams params{{random_tensor({6, 4, 1, 1}, rng, 0.5)}};
    const Shape4 target{1, 6, 8, 8};
    out.push_back(make_case(
        "network", "msf align up (projection + bilinear)",
        check_block<MsfAlignParams>(
            source, params,
            [&](const Tensor4& x, const MsfAlignParams& p) { return msf_align(x, target, p); }, 0,
            0, rng)));
  }
  {
    Tensor4 source = random_tensor({1, 4, 8, 8}, rng);
    MsfAlignParams params{{random_tensor({6, 4, 3, 3}, rng, 0.3), random_tensor({10, 6, 3, 3}, rng, 0.3)}};
    const Shape4 target{1, 10, 2, 2};
    out.push_back(make_case(
        "network", "msf align down (two stride-2 convs)",
        check_block<MsfAlignParams>(
            source, params,
            [&](const Tensor4& x, const MsfAlignParams& p) { return msf_align(x, target, p); }, 0,
            40, rng)));
  }
  const NetworkShapes shapes = infer_shapes(config, {1, 3, 64, 64});
  {
    FeaturePyramid pyramid;
    for (int l = 0; l < 4; ++l) pyramid.levels[l] = random_tensor(shapes.pyramid[l], rng, 1.0, 0.0);
    MsfParams params = net.msf;
    const int level = 2;
    const MsfFuseResult base = msf_fuse(pyramid, level, params);
    const Tensor4 w = random_tensor(base.output.shape(), rng);
    MsfParams grads = params;
    for (auto& row : grads.align) {
      for (MsfAlignParams& a : row) a = zeroed(a);
    }
    const auto grad_levels = base.backward(w, grads);
    const Objective f = [&] {
      return weighted_sum(msf_fuse(pyramid, level, params).output.values(), w.values());
    };
    Tally t;
    for (int l = 0; l < 4; ++l) {
      t.add(probe(pyramid.levels[l].values(), grad_levels[l].values(), f, {1e-6, 20}, rng));
    }
    for (int j = 0; j < 4; ++j) {
      const auto values = tensors_of(params.align[level - 1][j]);
      const auto gv = tensors_of(grads.align[level - 1][j]);
      for (std::size_t k = 0; k < values.size(); ++k) {
        t.add(probe(values[k]->values(), gv[k]->values(), f, {1e-6, 8}, rng));
      }
    }
    out.push_back(make_case("network", "msf fuse (pyramid, align kernels)", t));
  }
  {
    Tensor4 high = random_tensor(shapes.mlka[0], rng);
    Tensor4 mid = random_tensor(shapes.mlka[1], rng);
    Tensor4 low = random_tensor(shapes.mlka[2], rng);
    HeadParams params = net.heads;
    for (Tensor4* t : tensors_of(params)) {
      for (double& v : t->values()) v = rng.normal(0.0, 0.2);
    }
    const HeadsResult base = regression_heads(low, mid, high, params, config.dims);
    const Tensor4 w = random_tensor(base.coefficients.shape(), rng);
    HeadParams grads = zeroed(params);
    const auto g = base.backward(w, grads);
    const Objective f = [&] {
      return weighted_sum(regression_heads(low, mid, high, params, config.dims).coefficients.values(),
                          w.values());
    };
    Tally t;
    t.add(probe(low.values(), g[0].values(), f, {1e-6, 20}, rng));
    t.add(probe(mid.values(), g[1].values(), f, {1e-6, 20}, rng));
    t.add(probe(high.values(), g[2].values(), f, {1e-6, 20}, rng));
    const auto values = tensors_of(params);
    const auto gv = tensors_of(grads);
    for (std::size_t k = 0; k < values.size(); ++k) {
      t.add(probe(values[k]->values(), gv[k]->values(), f, {1e-6, 8}, rng));
    }
    out.push_back(make_case("network", "regression heads (inputs, weights)", t));
  }
  {
    Tensor4 image = random_tensor({1, 3, 32, 32}, rng);
    BackboneParams params = net.backbone;
    const BackboneResult base = backbone_forward(image, params);
    FeaturePyramid w;
    for (int l = 0; l < 4; ++l) w.levels[l] = random_tensor(base.pyramid.levels[l].shape(), rng);
    BackboneParams grads = zeroed(params);
    const Tensor4 g = base.backward(w, grads);
    const Objective f = [&] {
      const BackboneResult r = backbone_forward(image, params);
      double s = 0.0;
      for (int l = 0; l < 4; ++l) s += weighted_sum(r.pyramid.levels[l].values(), w.levels[l].values());
      return s;
    };
    Tally t;
    t.add(probe(image.values(), g.values(), f, {1e-6, 30}, rng));
    const auto values = tensors_of(params);
    const auto gv = tensors_of(grads);
    for (std::size_t k = 0; k < values.size(); ++k) {
      t.add(probe(values[k]->values(), gv[k]->values(), f, {1e-6, 6}, rng));
    }
    out.push_back(make_case("network", "backbone (image, all parameters)", t));
  }
  {
    Tensor4 image = random_tensor({1, 3, 32, 32}, rng, 0.5);
    NetworkParams params = net;
    for (MlkaParams& m : params.mlka) m.scale[0] = 0.5;
    // Large enough head weights that gradients reach the early layers.
    for (Tensor4* t : tensors_of(params.heads)) {
      for (double& v : t->values()) v = rng.normal(0.0, 0.5);
    }
    const NetworkResult base = network_forward(image, params);
    const Tensor4 w = random_tensor(base.coefficients.shape(), rng);
    NetworkParams grads = base.backward(w);
    const Objective f = [&] {
      return weighted_sum(network_forward(image, params).coefficients.values(), w.values());
    };
    std::vector<Tensor4*> values, gv;
    for_each_parameter(params, [&](const std::string&, Tensor4& t) { values.push_back(&t); });
    for_each_parameter(grads, [&](const std::string&, Tensor4& t) { gv.push_back(&t); });
    Tally t;
    for (std::size_t k = 0; k < values.size(); ++k) {
      t.add(probe(values[k]->values(), gv[k]->values(), f, {1e-6, 2}, rng));
    }
    out.push_back(make_case("network", "network end to end (all parameter tensors)", t));
  }
}

}  // namespace

GradcheckSuiteResult run_gradcheck_suite(const std::string& module, std::uint64_t seed) {
  const auto& modules = gradcheck_modules();
  if (module != "all" && std::find(modules.begin(), modules.end(), module) == modules.end()) {
    throw ParameterError("gradcheck: unknown module \"" + module +
                         "\" (expected all, tensor, geometry, losses or network)");
  }
  const auto start = std::chrono::steady_clock::now();
  GradcheckSuiteResult result;
  auto wants = [&](const char* name) { return module == "all" || module == name; };
  if (wants("tensor")) tensor_cases(result.cases, seed);
  if (wants("geometry")) geometry_cases(result.cases, seed);
  if (wants("losses")) loss_cases(result.cases, seed);
  if (wants("network")) network_cases(result.cases, seed);
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::string format_gradcheck_table(const GradcheckSuiteResult& result) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-9s %-46s %12s %8s %8s  %s\n", "module", "case",
                "max_rel_err", "entries", "skipped", "result");
  out += line;
  for (const GradcheckCase& c : result.cases) {
    std::snprintf(line, sizeof(line), "%-9s %-46s %12.3e %8zu %8zu  %s\n", c.module.c_str(),
                  c.name.c_str(), c.max_relative_error, c.entries, c.skipped,
                  c.passed() ? "PASS" : "FAIL");
    out += line;
  }
  std::snprintf(line, sizeof(line), "%zu cases, max relative error %.3e, tolerance %.0e, %.1f s: %s\n",
                result.cases.size(), result.max_relative_error(), kGradcheckTolerance, result.seconds,
                result.passed() ? "PASS" : "FAIL");
  out += line;
  return out;
}

}  // namespace msma
