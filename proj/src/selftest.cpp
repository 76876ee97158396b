// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/selftest.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

#include "msma/assets_io.hpp"
#include "msma/camera.hpp"
#include "msma/error.hpp"
#include "msma/evaluation.hpp"
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
namespace {

class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what) {
  if (!ok) throw CheckFailed(what);
}

void expect_near(double actual, double expected, double tol, const std::string& what) {
  if (!(std::abs(actual - expected) <= tol)) {
    std::ostringstream os;
    os.precision(17);
    os << what << ": got " << actual << ", expected " << expected;
    throw CheckFailed(os.str());
  }
}

template <class E, class F>
E expect_throws(F&& f, const std::string& what) {
  try {
    f();
  } catch (const E& e) {
    return e;
  }
  throw CheckFailed(what + ": expected an exception");
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor4 random_tensor(Shape4 shape, Rng& rng) {
  Tensor4 t(shape);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

struct FaceFixture {
  FaceBasis basis;
  CameraModel camera;
  FaceCoefficients coefficients;
};

FaceFixture face_fixture(int size = 64) {
  FaceFixture fx;
  fx.basis = synthetic_basis(7, 300);
  fx.camera = CameraModel::for_image(size, size);
  fx.coefficients = default_initialization(fx.basis, fx.camera);
  return fx;
}

SkinMask coverage_mask(const Framebuffer& fb) {
  SkinMask m(fb.height, fb.width);
  for (std::size_t i = 0; i < fb.mask.size(); ++i) m.data()[i] = fb.mask[i];
  return m;
}

FitTarget self_target(const FaceFixture& fx) {
  const RenderedFace r = render_face(fx.coefficients, fx.basis, fx.camera);
  return {r.framebuffer.color, project_landmarks(fx.coefficients, fx.basis, fx.camera),
          coverage_mask(r.framebuffer)};
}

Tensor4 image_tensor(const Image& image, int n = 1) {
  Tensor4 t({n, 3, image.height(), image.width()});
  for (int b = 0; b < n; ++b) {
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) t.at(b, c, y, x) = image.at(y, x, c);
      }
    }
  }
  return t;
}

Mesh mean_mesh(const FaceBasis& basis) {
  return {synthesize_shape(basis, Eigen::VectorXd::Zero(basis.dims().id),
                           Eigen::VectorXd::Zero(basis.dims().exp)),
          basis.triangles};
}

Mesh grid_mesh(int n, double z) {
  Mesh m;
  m.vertices.resize(n * n, 3);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) m.vertices.row(y * n + x) << x, y, z;
  }
  for (int y = 0; y + 1 < n; ++y) {
    for (int x = 0; x + 1 < n; ++x) {
      const int a = y * n + x;
      m.triangles.push_back({a, a + 1, a + n + 1});
      m.triangles.push_back({a, a + n + 1, a + n});
    }
  }
  return m;
}

using Case = std::function<void()>;
struct Entry {
  const char* module;
  const char* name;
  Case run;
};

// ---------------------------------------------------------------------------
// tensor

void tensor_cases(std::vector<Entry>& out) {
  out.push_back({"tensor", "conv of ones with a 3x3 ones kernel is 9", [] {
    const OpResult r = conv2d(Tensor4({1, 1, 3, 3}, 1.0), Tensor4({1, 1, 3, 3}, 1.0));
    expect(r.output.shape() == Shape4{1, 1, 1, 1}, "output shape");
    expect_near(r.output[0], 9.0, 0.0, "value");
  }});
  out.push_back({"tensor", "grouped centre-tap kernel is the identity", [] {
    Rng rng(1);
    const Tensor4 x = random_tensor({1, 4, 5, 5}, rng);
    Tensor4 k({4, 1, 3, 3});
    for (int c = 0; c < 4; ++c) k.at(c, 0, 1, 1) = 1.0;
    const OpResult r = conv2d(x, k, {1, 1, 4, 1});
    expect(r.output == x, "output differs from input");
  }});
  out.push_back({"tensor", "pointwise ones kernel sums channels; identity kernel copies", [] {
    Rng rng(2);
    const Tensor4 x = random_tensor({2, 3, 4, 4}, rng);
    const OpResult s = pointwise_conv(x, Tensor4({1, 3, 1, 1}, 1.0));
    for (int n = 0; n < 2; ++n) {
      for (int y = 0; y < 4; ++y) {
        for (int xx = 0; xx < 4; ++xx) {
          const double sum = x.at(n, 0, y, xx) + x.at(n, 1, y, xx) + x.at(n, 2, y, xx);
          expect_near(s.output.at(n, 0, y, xx), sum, 1e-14, "channel sum");
        }
      }
    }
    Tensor4 eye({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) eye.at(c, c, 0, 0) = 1.0;
    expect(pointwise_conv(x, eye).output == x, "identity map");
  }});
  out.push_back({"tensor", "interpolating a constant stays constant; same size is identity", [] {
    for (InterpolationMode m : {InterpolationMode::kNearest, InterpolationMode::kBilinear}) {
      const OpResult r = interpolate(Tensor4({1, 2, 2, 2}, 3.5), 4, 4, m);
      expect(r.output == Tensor4({1, 2, 4, 4}, 3.5), "constant upsampling");
      Rng rng(3);
      const Tensor4 x = random_tensor({1, 2, 3, 5}, rng);
      expect(max_abs_diff(interpolate(x, 3, 5, m).output.values(), x.values()) <= 1e-15,
             "same-size interpolation");
    }
  }});
  out.push_back({"tensor", "relu clips negatives", [] {
    const OpResult r = relu(Tensor4({1, 3, 1, 1}, {-1.0, 0.0, 2.0}));
    expect(r.output == Tensor4({1, 3, 1, 1}, {0.0, 0.0, 2.0}), "relu values");
  }});
  out.push_back({"tensor", "split undoes concat", [] {
    Rng rng(4);
    const std::vector<Tensor4> parts{random_tensor({2, 2, 3, 3}, rng),
                                     random_tensor({2, 2, 3, 3}, rng),
                                     random_tensor({2, 2, 3, 3}, rng)};
    const std::vector<Tensor4> back = split_channels(concat_channels(parts).output, 3);
    expect(back == parts, "round trip");
  }});
  out.push_back({"tensor", "fully connected with zero weights yields the bias", [] {
    Rng rng(5);
    const Tensor4 bias = random_tensor({4, 1, 1, 1}, rng);
    const OpResult r = fully_connected(random_tensor({2, 3, 1, 1}, rng),
                                       Tensor4({4, 3, 1, 1}), bias);
    for (int n = 0; n < 2; ++n) {
      for (int k = 0; k < 4; ++k) expect(r.output.at(n, k, 0, 0) == bias[k], "bias row");
    }
  }});
  out.push_back({"tensor", "global average of a constant is the constant", [] {
    const OpResult r = global_average_pool(Tensor4({2, 3, 5, 7}, -1.25));
    expect(r.output == Tensor4({2, 3, 1, 1}, -1.25), "pooled value");
  }});
  out.push_back({"tensor", "gradcheck of elementwise add", [] {
    Rng rng(6);
    const GradcheckReport rep = gradcheck(
        [](const std::vector<Tensor4>& in) { return elementwise(in[0], in[1], ElementwiseOp::kAdd); },
        {random_tensor({1, 2, 3, 3}, rng), random_tensor({1, 2, 3, 3}, rng)});
    expect(rep.entries_checked == 36, "entries probed");
    expect(rep.max_relative_error < 1e-9, "relative error " + std::to_string(rep.max_relative_error));
  }});
}

// ---------------------------------------------------------------------------
// morphable model

void model_cases(std::vector<Entry>& out) {
  out.push_back({"model", "zero coefficients give the mean shape; a unit alpha adds its column", [] {
    const FaceBasis b = synthetic_basis(3, 200);
    const BasisDims d = b.dims();
    const Vertices s0 = synthesize_shape(b, Eigen::VectorXd::Zero(d.id), Eigen::VectorXd::Zero(d.exp));
    expect(max_abs_diff({s0.data(), std::size_t(s0.size())},
                        {b.mean_shape.data(), std::size_t(b.mean_shape.size())}) == 0.0,
           "mean shape");
    Eigen::VectorXd a = Eigen::VectorXd::Zero(d.id);
    a[0] = 1.0;
    const Vertices s1 = synthesize_shape(b, a, Eigen::VectorXd::Zero(d.exp));
    const Eigen::VectorXd expected = b.mean_shape + b.id.col(0);
    expect(max_abs_diff({s1.data(), std::size_t(s1.size())},
                        {expected.data(), std::size_t(expected.size())}) <= 1e-14,
           "mean plus first identity column");
  }});
  out.push_back({"model", "zero gamma gives the mean texture; scaled unit gamma adds its column", [] {
    const FaceBasis b = synthetic_basis(3, 200);
    const Vertices t0 = synthesize_texture(b, Eigen::VectorXd::Zero(b.dims().tex));
    expect(max_abs_diff({t0.data(), std::size_t(t0.size())},
                        {b.mean_texture.data(), std::size_t(b.mean_texture.size())}) == 0.0,
           "mean texture");
    Eigen::VectorXd g = Eigen::VectorXd::Zero(b.dims().tex);
    g[5] = 0.3;
    const Vertices t1 = synthesize_texture(b, g);
    const Eigen::VectorXd expected = b.mean_texture + 0.3 * b.tex.col(5);
    expect(max_abs_diff({t1.data(), std::size_t(t1.size())},
                        {expected.data(), std::size_t(expected.size())}) <= 1e-14,
           "mean plus scaled column");
  }});
  out.push_back({"model", "unit square normals follow the winding", [] {
    Vertices v(4, 3);
    v << 0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0;
    const VertexNormals ccw = vertex_normals(v, {{0, 1, 2}, {0, 2, 3}});
    const VertexNormals cw = vertex_normals(v, {{0, 2, 1}, {0, 3, 2}});
    for (int i = 0; i < 4; ++i) {
      expect((ccw.normals.row(i) - Eigen::RowVector3d(0, 0, 1)).norm() < 1e-15, "ccw normal");
      expect((cw.normals.row(i) - Eigen::RowVector3d(0, 0, -1)).norm() < 1e-15, "cw normal");
    }
    expect(ccw.degenerate_vertices == 0, "no degenerate vertices");
  }});
  out.push_back({"model", "synthetic basis is reproducible and orthonormal", [] {
    const FaceBasis a = synthetic_basis(11, 250);
    const FaceBasis b = synthetic_basis(11, 250);
    expect(a.mean_shape == b.mean_shape && a.id == b.id && a.exp == b.exp && a.tex == b.tex &&
               a.triangles == b.triangles && a.landmarks == b.landmarks && a.skin == b.skin,
           "same seed differs");
    const Eigen::MatrixXd gram = a.id.transpose() * a.id;
    const double err = (gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
    expect(err <= 1e-10, "identity Gram error " + std::to_string(err));
  }});
}

// ---------------------------------------------------------------------------
// camera and illumination

void camera_cases(std::vector<Entry>& out) {
  out.push_back({"camera", "zero Euler angles give the identity; a quarter turn about z maps x to y", [] {
    expect(rotation_matrix(Eigen::Vector3d::Zero()).matrix == Eigen::Matrix3d::Identity(), "identity");
    const Eigen::Vector3d y =
        rotation_matrix({0.0, 0.0, std::numbers::pi / 2}).matrix * Eigen::Vector3d::UnitX();
    expect((y - Eigen::Vector3d::UnitY()).norm() < 1e-15, "x maps to y");
  }});
  out.push_back({"camera", "perspective projects the optical axis to the principal point", [] {
    const CameraModel cam = CameraModel::for_image(224, 224);
    const Projection p = project(Vertices::Zero(1, 3), Eigen::Vector3d::Zero(), {0, 0, 800}, cam);
    expect_near(p.points(0, 0), cam.cx, 0.0, "u");
    expect_near(p.points(0, 1), cam.cy, 0.0, "v");
    expect_near(p.depth[0], 800.0, 0.0, "depth");
  }});
  out.push_back({"camera", "unit weak perspective keeps x and y", [] {
    CameraModel cam;
    cam.mode = CameraMode::kWeakPerspective;
    cam.focal_length = 1.0;
    cam.cx = cam.cy = 0.0;
    Vertices v(2, 3);
    v << 1.5, -2.0, 7.0, -3.0, 0.25, -4.0;
    const Projection p = project(v, Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero(), cam);
    for (int i = 0; i < 2; ++i) {
      expect(p.points(i, 0) == v(i, 0) && p.points(i, 1) == v(i, 1), "projected point");
    }
  }});
  out.push_back({"illumination", "odd harmonics vanish on the +z normal", [] {
    const ShVector psi = sh_basis({0.0, 0.0, 1.0});
    for (int k : {1, 3, 4, 5, 7}) expect(psi[k] == 0.0, "entry " + std::to_string(k));
    expect(psi[0] > 0.0 && psi[2] > 0.0 && psi[6] > 0.0, "even entries");
  }});
  out.push_back({"illumination", "zero lighting shades everything black", [] {
    Vertices tex = Vertices::Constant(3, 3, 0.7);
    Vertices n(3, 3);
    n << 0, 0, 1, 1, 0, 0, 0, -1, 0;
    expect(shade_texture(tex, n, ShVector::Zero()).isZero(0.0), "shaded texture");
  }});
}

// ---------------------------------------------------------------------------
// renderer

void renderer_cases(std::vector<Entry>& out) {
  out.push_back({"renderer", "a viewport-covering triangle fills every pixel", [] {
    Points2 pos(3, 2);
    pos << -50, -50, 200, -50, -50, 200;
    const Eigen::VectorXd depth = Eigen::VectorXd::Constant(3, 2.0);
    Vertices col(3, 3);
    col.rowwise() = Eigen::RowVector3d(0.2, 0.4, 0.6);
    const Framebuffer fb = rasterize(pos, depth, {{0, 1, 2}}, col, {8, 8, false, true});
    expect(fb.covered_count() == 64, "covered pixels");
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        for (int c = 0; c < 3; ++c) expect_near(fb.color.at(y, x, c), col(0, c), 1e-15, "colour");
      }
    }
  }});
  out.push_back({"renderer", "uncovered pixels keep the background", [] {
    Points2 pos(3, 2);
    pos << 0, 0, 4, 0, 0, 4;
    const Framebuffer fb = rasterize(pos, Eigen::VectorXd::Ones(3), {{0, 1, 2}},
                                     Vertices::Ones(3, 3), {8, 8, false, true});
    expect(!fb.covered(7, 7), "corner covered");
    expect(fb.color.at(7, 7, 0) == 0.0 && fb.depth[63] == 0.0 && fb.record(7, 7).triangle == -1,
           "background pixel");
    expect(fb.covered(0, 0), "origin pixel covered");
  }});
  out.push_back({"renderer", "the nearer of two overlapping triangles wins", [] {
    Points2 pos(6, 2);
    pos << -20, -20, 40, -20, -20, 40, -20, -20, 40, -20, -20, 40;
    Eigen::VectorXd depth(6);
    depth << 2, 2, 2, 1, 1, 1;
    Vertices col = Vertices::Zero(6, 3);
    col.topRows(3).col(1).setOnes();
    col.bottomRows(3).col(0).setOnes();
    const Framebuffer fb = rasterize(pos, depth, {{0, 1, 2}, {3, 4, 5}}, col, {4, 4, false, true});
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) {
        expect(fb.record(y, x).triangle == 1, "winning triangle");
        expect(fb.color.at(y, x, 0) == 1.0 && fb.color.at(y, x, 1) == 0.0, "winning colour");
        expect(fb.depth[y * 4 + x] == 1.0, "winning depth");
      }
    }
  }});
  out.push_back({"renderer", "attribute gradients of a uniform image gradient sum barycentrics", [] {
    Points2 pos(3, 2);
    pos << 1, 1, 9, 2, 3, 8;
    Vertices attr = Vertices::Constant(3, 3, 0.5);
    const Framebuffer fb = rasterize(pos, Eigen::VectorXd::Ones(3), {{0, 1, 2}}, attr,
                                     {10, 10, false, true});
    Eigen::Vector3d expected = Eigen::Vector3d::Zero();
    for (const PixelRecord& r : fb.records) {
      if (r.triangle < 0) continue;
      for (int k = 0; k < 3; ++k) expected[k] += r.bary[k];
    }
    const RasterGradients g = rasterize_backward(fb, Image(10, 10, 1.0));
    for (int k = 0; k < 3; ++k) {
      for (int c = 0; c < 3; ++c) expect_near(g.attributes(k, c), expected[k], 1e-12, "vertex weight");
    }
    expect_near(g.attributes.col(0).sum(), static_cast<double>(fb.covered_count()), 1e-10,
                "total weight");
    const RasterGradients z = rasterize_backward(fb, Image(10, 10, 0.0));
    expect(z.attributes.isZero(0.0) && z.positions.isZero(0.0), "zero gradient");
  }});
  out.push_back({"renderer", "rendering the mean face is deterministic", [] {
    const FaceFixture fx = face_fixture();
    const RenderedFace a = render_face(fx.coefficients, fx.basis, fx.camera);
    const RenderedFace b = render_face(fx.coefficients, fx.basis, fx.camera);
    expect(a.framebuffer.covered_count() > 100, "face visible");
    expect(a.framebuffer.color == b.framebuffer.color && a.framebuffer.mask == b.framebuffer.mask,
           "renders differ");
  }});
  out.push_back({"renderer", "zero lighting renders black over an unchanged mask", [] {
    const FaceFixture fx = face_fixture();
    FaceCoefficients dark = fx.coefficients;
    dark.delta.setZero();
    const RenderedFace lit = render_face(fx.coefficients, fx.basis, fx.camera);
    const RenderedFace off = render_face(dark, fx.basis, fx.camera);
    expect(off.framebuffer.mask == lit.framebuffer.mask, "mask changed");
    for (double v : off.framebuffer.color.data()) expect(v == 0.0, "non-black pixel");
  }});
  out.push_back({"renderer", "a texture change only touches covered pixels", [] {
    const FaceFixture fx = face_fixture();
    FaceCoefficients c = fx.coefficients;
    c.gamma[0] += 0.5;
    c.gamma[3] -= 0.5;
    const RenderedFace a = render_face(fx.coefficients, fx.basis, fx.camera);
    const RenderedFace b = render_face(c, fx.basis, fx.camera);
    std::size_t changed = 0;
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        for (int ch = 0; ch < 3; ++ch) {
          if (a.framebuffer.color.at(y, x, ch) != b.framebuffer.color.at(y, x, ch)) {
            expect(a.framebuffer.covered(y, x), "uncovered pixel changed");
            ++changed;
          }
        }
      }
    }
    expect(changed > 0, "no pixel changed");
  }});
  out.push_back({"renderer", "a landmark on the optical axis projects to the principal point", [] {
    FaceFixture fx = face_fixture();
    const Vertices s = synthesize_shape(fx.basis, fx.coefficients.alpha, fx.coefficients.beta);
    const int v = fx.basis.landmarks[kNoseTipLandmark];
    fx.coefficients.rotation.setZero();
    fx.coefficients.translation.x() = -s(v, 0);
    fx.coefficients.translation.y() = -s(v, 1);
    const Points2 p = project_landmarks(fx.coefficients, fx.basis, fx.camera);
    expect_near(p(kNoseTipLandmark, 0), fx.camera.cx, 1e-9, "u");
    expect_near(p(kNoseTipLandmark, 1), fx.camera.cy, 1e-9, "v");
  }});
  out.push_back({"renderer", "weak-perspective translation shifts landmarks by f t", [] {
    FaceFixture fx = face_fixture();
    fx.camera.mode = CameraMode::kWeakPerspective;
    fx.camera.focal_length = 0.3;
    const Points2 a = project_landmarks(fx.coefficients, fx.basis, fx.camera);
    FaceCoefficients moved = fx.coefficients;
    moved.translation += Eigen::Vector3d(4.0, -6.0, 0.0);
    const Points2 b = project_landmarks(moved, fx.basis, fx.camera);
    for (int n = 0; n < kNumLandmarks; ++n) {
      expect_near(b(n, 0) - a(n, 0), 1.2, 1e-9, "du");
      expect_near(b(n, 1) - a(n, 1), -1.8, 1e-9, "dv");
    }
  }});
}

// ---------------------------------------------------------------------------
// losses

void loss_cases(std::vector<Entry>& out) {
  out.push_back({"losses", "photometric loss is zero on identical images and sqrt(3) at unit offset", [] {
    Rng rng(8);
    Image a(6, 5);
    for (double& v : a.data()) v = rng.uniform();
    Image b = a;
    for (double& v : b.data()) v += 1.0;
    const SkinMask m(6, 5, 1.0);
    const std::vector<std::uint8_t> cov(30, 1);
    expect(photometric_loss(a, a, m, cov).value == 0.0, "identical");
    expect_near(photometric_loss(a, b, m, cov).value, std::sqrt(3.0), 1e-12, "offset");
  }});
  out.push_back({"losses", "perceptual loss is 0 on identical and 1 on orthogonal embeddings", [] {
    const AveragePoolEmbedder e(4);
    Image red(8, 8), green(8, 8);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        red.at(y, x, 0) = 0.2 + 0.05 * x;
        green.at(y, x, 1) = 0.9 - 0.05 * y;
      }
    }
    expect_near(perceptual_loss(e, red, red).value, 0.0, 1e-15, "identical");
    expect_near(perceptual_loss(e, red, green).value, 1.0, 1e-15, "orthogonal");
  }});
  out.push_back({"losses", "landmark loss weights offsets and the inner mouth", [] {
    Points2 t(kNumLandmarks, 2);
    for (int n = 0; n < kNumLandmarks; ++n) t.row(n) << 10 + n, 20 - n;
    const auto w = default_landmark_weights();
    expect(landmark_loss(t, t, w).value == 0.0, "exact");
    Points2 p = t;
    p.row(10) += Eigen::RowVector2d(3, 4);
    expect_near(landmark_loss(t, p, w).value, 25.0 / 68.0, 1e-15, "outer offset");
    p = t;
    p.row(62) += Eigen::RowVector2d(3, 4);
    expect_near(landmark_loss(t, p, w).value, 500.0 / 68.0, 1e-13, "inner-mouth offset");
  }});
  out.push_back({"losses", "coefficient prior vanishes at zero", [] {
    const RegularizationLoss r = coefficient_regularization(
        Eigen::VectorXd::Zero(80), Eigen::VectorXd::Zero(64), Eigen::VectorXd::Zero(80), {});
    expect(r.value == 0.0 && r.grad_alpha.isZero(0.0) && r.grad_gamma.isZero(0.0), "prior at zero");
  }});
  out.push_back({"losses", "reflectance loss is 0 on constant albedo and 1 on a two-point spread", [] {
    const std::vector<std::uint8_t> flags{1, 1, 0};
    Vertices t(3, 3);
    t << 0.4, 0.5, 0.6, 0.4, 0.5, 0.6, 0.9, 0.0, 0.1;
    expect(reflectance_loss(t, flags).value == 0.0, "constant");
    t.row(0) << 0, 0, 0;
    t.row(1) << 2, 0, 0;
    expect_near(reflectance_loss(t, flags).value, 1.0, 1e-15, "spread");
  }});
  out.push_back({"losses", "self-rendered targets zero the data terms", [] {
    const FaceFixture fx = face_fixture();
    const FitTarget target = self_target(fx);
    const TotalLoss l = total_loss(fx.coefficients, target, fx.basis, fx.camera, {},
                                   AveragePoolEmbedder(), false);
    for (int k = 0; k < 3; ++k) {
      expect_near(l.breakdown.terms[k].unweighted, 0.0, 1e-12, l.breakdown.terms[k].name);
    }
    LossWeights none;
    none.lambda_pho = none.lambda_per = none.lambda_lmk = none.lambda_3dmm = none.lambda_refl = 0.0;
    const TotalLoss z = total_loss(fx.coefficients, target, fx.basis, fx.camera, none,
                                   AveragePoolEmbedder());
    expect(z.value() == 0.0 && z.gradient.pack().isZero(0.0), "all weights zero");
  }});
}

// ---------------------------------------------------------------------------
// network

NetworkParams toy_network(std::uint64_t seed = 5) {
  return init_network(NetworkConfig{}, seed, FaceCoefficients::zeros());
}

void network_cases(std::vector<Entry>& out) {
  out.push_back({"network", "a 64x64 input yields a 16/8/4/2 pyramid deterministically", [] {
    const NetworkParams p = toy_network();
    Rng rng(9);
    const Tensor4 x = random_tensor({1, 3, 64, 64}, rng);
    const BackboneResult a = backbone_forward(x, p.backbone);
    const BackboneResult b = backbone_forward(x, p.backbone);
    const std::array<int, 4> sizes{16, 8, 4, 2};
    for (int l = 0; l < 4; ++l) {
      const Shape4 s = a.pyramid.levels[l].shape();
      expect(s == Shape4{1, p.config.widths[l], sizes[l], sizes[l]}, "level " + std::to_string(l));
      expect(a.pyramid.levels[l] == b.pyramid.levels[l], "pyramid differs");
    }
  }});
  out.push_back({"network", "aligning a map to its own shape is the identity", [] {
    Rng rng(10);
    const Tensor4 x = random_tensor({1, 12, 8, 8}, rng);
    expect(msf_align(x, x.shape(), {}).output == x, "identity alignment");
  }});
  out.push_back({"network", "aligning 8x8 to 2x2 uses two strided convolutions", [] {
    const NetworkParams p = toy_network();
    const MsfAlignParams& a = p.msf.align[2][1];  // level 1 onto level 3
    expect(a.kernels.size() == 2, "kernel count");
    Rng rng(11);
    const Tensor4 x = random_tensor({1, 24, 8, 8}, rng);
    const Shape4 target{1, 96, 2, 2};
    expect(msf_align(x, target, a).output.shape() == target, "aligned shape");
    MsfAlignParams one{{a.kernels[0]}};
    expect_throws<ShapeError>([&] { msf_align(x, target, one); }, "single kernel");
  }});
  out.push_back({"network", "fusion with zero siblings is the ReLU of the level", [] {
    const NetworkParams p = toy_network();
    Rng rng(12);
    FeaturePyramid pyr;
    const std::array<int, 4> sizes{16, 8, 4, 2};
    for (int l = 0; l < 4; ++l) {
      pyr.levels[l] = Tensor4({1, p.config.widths[l], sizes[l], sizes[l]});
    }
    for (int level = 1; level <= 3; ++level) {
      FeaturePyramid q = pyr;
      q.levels[level] = random_tensor(pyr.levels[level].shape(), rng);
      expect(msf_fuse(q, level, p.msf).output == relu(q.levels[level]).output,
             "level " + std::to_string(level));
    }
    FeaturePyramid full;
    for (int l = 0; l < 4; ++l) full.levels[l] = random_tensor(pyr.levels[l].shape(), rng);
    for (double v : msf_fuse(full, 2, p.msf).output.values()) expect(v >= 0.0, "negative output");
  }});
  out.push_back({"network", "MLKA with zero scale is the identity; 48 channels split 3 x 16", [] {
    const MlkaParams m = init_mlka(48, 3, 0.0);
    for (const MlkaBranchParams& b : m.branches) {
      expect(b.depthwise.n() == 16 && b.pointwise.shape() == Shape4{16, 16, 1, 1}, "branch width");
    }
    expect(m.projection.shape() == Shape4{48, 48, 1, 1}, "projection");
    Rng rng(13);
    const Tensor4 x = random_tensor({1, 48, 8, 8}, rng);
    expect(mlka_block(x, m).output == x, "zero-scale output");
    expect_throws<ShapeError>([] { init_mlka(50, 1); }, "indivisible width");
  }});
  out.push_back({"network", "heads with zero weights output their biases", [] {
    FaceCoefficients bias = FaceCoefficients::zeros();
    Rng rng(14);
    Eigen::VectorXd packed = bias.pack();
    for (Eigen::Index i = 0; i < packed.size(); ++i) packed[i] = rng.normal();
    NetworkParams p = init_network(NetworkConfig{}, 5, FaceCoefficients::unpack(packed));
    for (AffineParams* a : {&p.heads.alpha, &p.heads.beta, &p.heads.gamma, &p.heads.rotation,
                            &p.heads.delta, &p.heads.translation}) {
      a->weight = a->weight.zeros_like();
    }
    const HeadsResult h = regression_heads(random_tensor({2, 96, 2, 2}, rng),
                                           random_tensor({2, 48, 4, 4}, rng),
                                           random_tensor({2, 24, 8, 8}, rng), p.heads, {});
    for (int n = 0; n < 2; ++n) {
      for (Eigen::Index k = 0; k < packed.size(); ++k) {
        expect(h.coefficients.at(n, static_cast<int>(k), 0, 0) == packed[k], "bias entry");
      }
    }
  }});
  out.push_back({"network", "each head reads its assigned pyramid level", [] {
    const NetworkParams p = toy_network();
    Rng rng(15);
    const std::array<Tensor4, 3> in{random_tensor({1, 96, 2, 2}, rng),
                                    random_tensor({1, 48, 4, 4}, rng),
                                    random_tensor({1, 24, 8, 8}, rng)};
    const PackedLayout L(BasisDims{});
    // Packed ranges fed by the low, mid and high maps.
    const std::array<std::vector<std::pair<int, int>>, 3> owned{{
        {{L.alpha, 80}, {L.beta, 64}},
        {{L.gamma, 80}, {L.rotation, 3}},
        {{L.delta, 9}, {L.translation, 3}},
    }};
    const Tensor4 base = regression_heads(in[0], in[1], in[2], p.heads, {}).coefficients;
    for (int s = 0; s < 3; ++s) {
      std::array<Tensor4, 3> moved = in;
      for (double& v : moved[s].values()) v += 1.0;
      const Tensor4 out_s = regression_heads(moved[0], moved[1], moved[2], p.heads, {}).coefficients;
      std::vector<bool> mine(L.total, false);
      for (auto [off, len] : owned[s]) {
        for (int k = 0; k < len; ++k) mine[off + k] = true;
      }
      for (int k = 0; k < L.total; ++k) {
        const bool changed = out_s[k] != base[k];
        expect(changed == mine[k], "source " + std::to_string(s) + ", entry " + std::to_string(k));
      }
    }
  }});
  out.push_back({"network", "packing round-trips; zero coefficients pack to zeros", [] {
    Rng rng(16);
    Eigen::VectorXd v(239);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
    expect(FaceCoefficients::unpack(v).pack() == v, "round trip");
    const Eigen::VectorXd z = FaceCoefficients::zeros().pack();
    expect(z.size() == 239 && z.isZero(0.0), "zero vector");
  }});
  out.push_back({"network", "forward pass is deterministic and row-independent", [] {
    const NetworkParams p = toy_network();
    Rng rng(17);
    Image img(32, 32);
    for (double& v : img.data()) v = rng.uniform();
    const Tensor4 x = image_tensor(img, 2);
    const NetworkResult a = network_forward(x, p);
    const NetworkResult b = network_forward(x, p);
    expect(a.coefficients == b.coefficients, "repeat differs");
    expect(a.coefficients.shape() == Shape4{2, 239, 1, 1}, "output shape");
    for (int k = 0; k < 239; ++k) {
      expect(a.coefficients.at(0, k, 0, 0) == a.coefficients.at(1, k, 0, 0), "rows differ");
    }
  }});
}

// ---------------------------------------------------------------------------
// fitting

void fitting_cases(std::vector<Entry>& out) {
  out.push_back({"fitting", "fitting a self-rendered target stays at its coefficients", [] {
    const FaceFixture fx = face_fixture();
    const FitTarget target = self_target(fx);
    FitConfig cfg;
    cfg.max_iterations = 10;
    cfg.loss_weights.lambda_3dmm = 0.0;
    cfg.loss_weights.lambda_refl = 0.0;
    const FitResult r = fit_coefficients(target, fx.basis, fx.camera, cfg, AveragePoolEmbedder(),
                                         fx.coefficients);
    expect(!r.trace.records.empty(), "empty trace");
    const LossBreakdown& b0 = r.trace.records[0].breakdown;
    expect_near(b0.total, b0.terms[3].weighted + b0.terms[4].weighted, 1e-12, "initial loss");
    const double drift = (r.coefficients.pack() - fx.coefficients.pack()).cwiseAbs().maxCoeff();
    expect(drift <= 1e-6, "drift " + std::to_string(drift));
  }});
  out.push_back({"fitting", "zero iterations return the initialisation", [] {
    const FaceFixture fx = face_fixture();
    FitConfig cfg;
    cfg.max_iterations = 0;
    const FitResult r = fit_coefficients(self_target(fx), fx.basis, fx.camera, cfg,
                                         AveragePoolEmbedder(), fx.coefficients);
    expect(r.coefficients == fx.coefficients, "coefficients changed");
    expect(r.trace.records.empty(), "trace not empty");
  }});
  out.push_back({"fitting", "the step schedule halves every interval", [] {
    FitConfig cfg;
    expect_near(lr_schedule(3 * cfg.lr_decay_interval, cfg), 5e-5, 1e-20, "third decay");
    expect_near(lr_schedule(cfg.lr_decay_interval - 1, cfg), 4e-4, 0.0, "before first decay");
  }});
  out.push_back({"fitting", "a zero learning rate leaves the network untouched", [] {
    FaceFixture fx = face_fixture(32);
    const NetworkParams start = init_network(NetworkConfig{}, 21, fx.coefficients);
    NetworkParams p = start;
    FitConfig cfg;
    cfg.learning_rate = 0.0;
    TrainState st = make_train_state(p, cfg);
    const FitTarget t = self_target(fx);
    const BatchLoss l = train_step(p, st, {t, t}, fx.basis, fx.camera, cfg, AveragePoolEmbedder());
    expect(encode_checkpoint(p) == encode_checkpoint(start), "parameters changed");
    expect(l.per_sample.size() == 2 && l.per_sample[0] == l.per_sample[1], "per-sample losses differ");
  }});
}

// ---------------------------------------------------------------------------
// evaluation

void evaluation_cases(std::vector<Entry>& out) {
  out.push_back({"evaluation", "ICP recovers identity and a pure translation", [] {
    const Mesh m = mean_mesh(synthetic_basis(4, 200));
    const IcpResult same = icp_align(m, m);
    expect((same.transform.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9 &&
               same.transform.translation.norm() < 1e-9 && std::abs(same.transform.scale - 1) < 1e-12,
           "identity");
    Mesh shifted = m;
    shifted.vertices.col(0).array() += 5.0;
    const IcpResult t = icp_align(shifted, m);
    expect((t.transform.translation - Eigen::Vector3d(-5, 0, 0)).norm() < 1e-6 &&
               std::abs(t.transform.scale - 1.0) < 1e-9,
           "translation");
  }});
  out.push_back({"evaluation", "cropping keeps everything at infinite radius and fails when tiny", [] {
    const Mesh m = mean_mesh(synthetic_basis(4, 200));
    const Mesh all = crop_by_radius(m, 10, std::numeric_limits<double>::infinity());
    expect(all.vertices == m.vertices && all.triangles == m.triangles, "infinite radius");
    expect_throws<CropError>([&] { crop_by_radius(m, 10, 1e-9); }, "tiny radius");
  }});
  out.push_back({"evaluation", "point-to-plane error measures a lifted plane", [] {
    const Mesh flat = grid_mesh(5, 0.0);
    expect(point_to_plane_rmse(flat, flat) == 0.0, "identical");
    expect_near(point_to_plane_rmse(grid_mesh(5, 0.7), flat), 0.7, 1e-12, "lifted");
  }});
  out.push_back({"evaluation", "point-to-point error is bounded by the shift", [] {
    const Mesh m = mean_mesh(synthetic_basis(4, 200));
    expect(point_to_point_rmse(m, m) == 0.0, "identical");
    Mesh s = m;
    const Eigen::RowVector3d d(0.3, -0.4, 1.2);
    s.vertices.rowwise() += d;
    const double e = point_to_point_rmse(s, m);
    expect(e > 0.0 && e <= d.norm() + 1e-12, "bound");
  }});
}

// ---------------------------------------------------------------------------
// assets

void io_cases(std::vector<Entry>& out) {
  out.push_back({"io", "a white 2x2 PPM decodes to ones", [] {
    const std::string bytes = std::string("P6\n2 2\n255\n") + std::string(12, '\xff');
    const Image img = decode_ppm(bytes);
    expect(img.height() == 2 && img.width() == 2, "size");
    for (double v : img.data()) expect(v == 1.0, "value");
  }});
  out.push_back({"io", "PPM round-trips within one code value; truncation is rejected", [] {
    Rng rng(18);
    Image img(5, 7);
    for (double& v : img.data()) v = rng.uniform();
    const std::string bytes = encode_ppm(img);
    expect(max_abs_diff(decode_ppm(bytes).data(), img.data()) <= 0.5 / 255 + 1e-15, "round trip");
    expect_throws<ParseError>([&] { decode_ppm(bytes.substr(0, bytes.size() - 1)); }, "truncated");
  }});
  out.push_back({"io", "OBJ parses a triangle, round-trips an icosahedron, rejects index 0", [] {
    const Mesh tri = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
    expect(tri.num_vertices() == 3 && tri.triangles.size() == 1 &&
               tri.triangles[0] == Triangle{0, 1, 2},
           "single triangle");
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    Mesh ico;
    ico.vertices.resize(12, 3);
    ico.vertices << -1, t, 0, 1, t, 0, -1, -t, 0, 1, -t, 0, 0, -1, t, 0, 1, t, 0, -1, -t, 0, 1, -t,
        t, 0, -1, t, 0, 1, -t, 0, -1, -t, 0, 1;
    ico.triangles = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},  {0, 7, 10}, {0, 10, 11},
                     {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                     {3, 9, 4},  {3, 4, 2},  {3, 2, 6},  {3, 6, 8},  {3, 8, 9},
                     {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},  {9, 8, 1}};
    const Mesh back = parse_obj(format_obj(ico));
    expect(back.vertices == ico.vertices && back.triangles == ico.triangles, "icosahedron");
    const ParseError e = expect_throws<ParseError>(
        [] { parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n"); }, "index 0");
    expect(e.location() == "line 4", "location " + e.location());
  }});
  out.push_back({"io", "landmark files need exactly 68 rows", [] {
    Points2 p(kNumLandmarks, 2);
    for (int n = 0; n < kNumLandmarks; ++n) p.row(n) << n * 1.5, 100 - n;
    const std::string text = format_landmarks(p);
    expect(parse_landmarks(text) == p, "68 rows");
    const std::string short_text = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
    const ParseError e = expect_throws<ParseError>([&] { parse_landmarks(short_text); }, "67 rows");
    expect(std::string(e.what()).find("expected 68 landmarks, found 67") != std::string::npos,
           std::string("message: ") + e.what());
  }});
  out.push_back({"io", "coefficients round-trip bitwise; unknown config keys are named", [] {
    Rng rng(19);
    Eigen::VectorXd v(239);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
    const FaceCoefficients c = FaceCoefficients::unpack(v);
    expect(parse_coefficients(format_coefficients(c)) == c, "round trip");
    const ParseError e = expect_throws<ParseError>([] { parse_config(R"({"lr": 0.1})"); }, "lr");
    expect(std::string(e.what()).find("\"lr\"") != std::string::npos,
           std::string("message: ") + e.what());
  }});
}

}  // namespace

bool SelftestResult::passed() const {
  for (const SelftestCase& c : cases) {
    if (!c.passed) return false;
  }
  return !cases.empty();
}

SelftestResult run_selftest() {
  std::vector<Entry> entries;
  tensor_cases(entries);
  model_cases(entries);
  camera_cases(entries);
  renderer_cases(entries);
  loss_cases(entries);
  network_cases(entries);
  fitting_cases(entries);
  evaluation_cases(entries);
  io_cases(entries);

  SelftestResult result;
  for (const Entry& e : entries) {
    SelftestCase c{e.module, e.name, false, {}};
    try {
      e.run();
      c.passed = true;
    } catch (const std::exception& ex) {
      c.detail = ex.what();
    }
    result.cases.push_back(std::move(c));
  }
  return result;
}

std::string format_selftest_report(const SelftestResult& result) {
  std::ostringstream os;
  std::size_t failed = 0;
  for (const SelftestCase& c : result.cases) {
    os << (c.passed ? "PASS " : "FAIL ") << c.module << "/" << c.name;
    if (!c.passed) {
      os << " -- " << c.detail;
      ++failed;
    }
    os << "\n";
  }
  os << (result.cases.size() - failed) << "/" << result.cases.size() << " self-test cases passed\n";
  return os.str();
}

}  // namespace msma
