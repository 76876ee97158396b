// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1
// when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include <Eigen/Geometry>

#include "cli_runner.hpp"
#include "msma/evaluation.hpp"
#include "msma/fitting.hpp"
#include "msma/gradcheck_suite.hpp"
#include "msma/losses.hpp"
#include "msma/network.hpp"
#include "msma/renderer.hpp"
#include "msma/rng.hpp"
#include "msma/selftest.hpp"
#include "oracles.hpp"

namespace msma {
namespace {

struct Outcome {
  bool passed = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

void gradient_suite(Outcome& o) {
  const GradcheckSuiteResult r = run_gradcheck_suite("all", 1);
  std::set<std::string> modules;
  std::size_t skipped = 0;
  for (const GradcheckCase& c : r.cases) {
    modules.insert(c.module);
    skipped += c.skipped;
    o.require(c.passed(), c.module + "/" + c.name);
  }
  for (const std::string& m : gradcheck_modules()) o.require(modules.count(m) > 0, "module " + m);
  o.require(r.seconds < 300.0, "suite under 5 minutes");
  o.detail << r.cases.size() << " cases, max relative error " << r.max_relative_error()
           << ", " << skipped << " unstable probes skipped, " << r.seconds << " s";
}

void analytic_losses(Outcome& o) {
  const LossWeights w;
  Points2 target = Points2::Zero(kNumLandmarks, 2);
  for (int i = 0; i < kNumLandmarks; ++i) target.row(i) << 10.0 + i, 20.0 + 0.5 * i;
  Points2 off = target;
  off(5, 0) += 3.0;
  off(5, 1) += 4.0;
  const double outer = landmark_loss(target, off, w.landmark_weights).value;
  off = target;
  off(62, 0) += 3.0;
  off(62, 1) += 4.0;
  const double mouth = landmark_loss(target, off, w.landmark_weights).value;

  const auto unit = [](int n) { return Eigen::VectorXd::Unit(n, 0); };
  const Eigen::VectorXd za = Eigen::VectorXd::Zero(80), zb = Eigen::VectorXd::Zero(64);
  const double ra = coefficient_regularization(unit(80), zb, za, w).value;
  const double rb = coefficient_regularization(za, unit(64), za, w).value;
  const double rg = coefficient_regularization(za, zb, unit(80), w).value;

  Image img(6, 5);
  Rng rng(2);
  for (double& v : img.data()) v = rng.uniform();
  Image shifted = img;
  for (double& v : shifted.data()) v += 1.0;
  const double pho =
      photometric_loss(img, shifted, SkinMask(6, 5, 1.0), std::vector<std::uint8_t>(30, 1)).value;

  const struct {
    const char* name;
    double got, want;
  } checks[] = {{"landmark 25/68", outer, 25.0 / 68.0},  {"landmark 500/68", mouth, 500.0 / 68.0},
                {"alpha prior", ra, 1.0},              {"beta prior", rb, 0.8},
                {"gamma prior", rg, 0.017},            {"photometric sqrt(3)", pho, std::sqrt(3.0)}};
  double worst = 0.0;
  for (const auto& c : checks) {
    worst = std::max(worst, std::abs(c.got - c.want));
    o.require(std::abs(c.got - c.want) <= 1e-12, c.name);
  }
  o.detail << "6 fixtures, max abs deviation " << worst;
}

void architecture_shapes(Outcome& o) {
  const NetworkShapes s = infer_shapes(NetworkConfig::reference(), {1, 3, 224, 224});
  const Shape4 want[3] = {{1, 512, 28, 28}, {1, 1024, 14, 14}, {1, 2048, 7, 7}};
  for (int r = 0; r < 3; ++r) {
    o.require(s.fused[r] == want[r], "fused map " + std::to_string(r));
    o.require(s.mlka[r] == want[r], "attention map " + std::to_string(r));
  }
  // head_outputs is stored as alpha, beta, gamma, rotation, delta, translation.
  const std::array<int, 6> named{s.head_outputs[0], s.head_outputs[1], s.head_outputs[2],
                                 s.head_outputs[3], s.head_outputs[5], s.head_outputs[4]};
  o.require(named == (std::array<int, 6>{80, 64, 80, 3, 3, 9}), "head widths");
  o.require(s.packed_length == 239, "packed length");
  o.require(PackedLayout(BasisDims{}).total == 239, "packed layout");
  o.detail << "fused 28x28x512 / 14x14x1024 / 7x7x2048, heads (alpha, beta, gamma, rotation, "
              "translation, delta) = ("
           << named[0] << ", " << named[1] << ", " << named[2] << ", " << named[3] << ", "
           << named[4] << ", " << named[5] << "), packed " << s.packed_length;
}

void mlka_identity(Outcome& o) {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const int channels = 3 * static_cast<int>(seed);
    const Tensor4 x = oracle::random_tensor({2, channels, 9, 9}, rng);
    MlkaParams p = init_mlka(channels, seed, 0.5 + 0.1 * static_cast<double>(seed));
    std::array<Tensor4, 3> dw, dl, pw, gate;
    for (int b = 0; b < 3; ++b) {
      dw[b] = p.branches[b].depthwise;
      dl[b] = p.branches[b].dilated;
      pw[b] = p.branches[b].pointwise;
      gate[b] = p.branches[b].gate;
    }
    const Tensor4 expected = oracle::mlka(x, dw, dl, pw, gate, p.projection, p.scale[0]);
    worst = std::max(worst, oracle::max_abs_diff(mlka_block(x, p).output, expected));
    p.scale[0] = 0.0;
    const Tensor4 same = mlka_block(x, p).output;
    o.require(same.shape() == x.shape() &&
                  std::memcmp(same.values().data(), x.values().data(), x.size() * sizeof(double)) == 0,
              "zero scale is the bitwise identity (seed " + std::to_string(seed) + ")");
  }
  o.require(worst <= 1e-10, "oracle agreement");
  o.detail << "zero scale bitwise identity on 5 inputs, max oracle deviation " << worst;
}

// Ground-truth coefficients for the synthetic recovery fixture.
FaceCoefficients recovery_truth(const FaceBasis& basis, const CameraModel& camera, std::uint64_t seed) {
  FaceCoefficients c = default_initialization(basis, camera);
  Rng rng(seed);
  for (double& v : c.alpha) v = rng.normal(0.0, 6.0);
  for (double& v : c.beta) v = rng.normal(0.0, 3.0);
  for (double& v : c.gamma) v = rng.normal(0.0, 0.4);
  for (int k = 0; k < 3; ++k) c.rotation[k] = rng.uniform(-0.15, 0.15);
  for (int k = 0; k < 3; ++k) c.translation[k] += rng.normal(0.0, k == 2 ? 20.0 : 5.0);
  for (int k = 1; k < 9; ++k) c.delta[k] = rng.normal(0.0, k < 4 ? 0.3 : 0.15);
  c.delta[0] += rng.normal(0.0, 0.2);
  return c;
}

void synthetic_recovery(Outcome& o) {
  const CameraModel camera = CameraModel::for_image(128, 128);
  double worst_pho = 0.0, worst_lmk = 0.0, worst_rmse = 0.0, worst_time = 0.0, baseline = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const FaceBasis basis = synthetic_basis(1000 + seed, 500);
    const FaceCoefficients truth = recovery_truth(basis, camera, seed);
    const RenderedFace r = render_face(truth, basis, camera);
    FitTarget target{r.framebuffer.color, project_landmarks(truth, basis, camera), SkinMask(128, 128)};
    for (std::size_t i = 0; i < r.framebuffer.mask.size(); ++i) target.mask.data()[i] = r.framebuffer.mask[i];

    FitConfig config;
    // Noise-free synthetic targets: the data term is weighted up against the
    // priors (weights chosen on held-out seeds, not on these ten).
    config.loss_weights.lambda_pho = 20.0;
    config.loss_weights.lambda_lmk = 5e-3;
    config.loss_weights.lambda_3dmm = 3e-5;
    const auto t0 = std::chrono::steady_clock::now();
    const FitResult fit = fit_coefficients(target, basis, camera, config, AveragePoolEmbedder());
    const double secs = seconds_since(t0);

    const RenderedFace fr = render_face(fit.coefficients, basis, camera);
    const double pho =
        photometric_loss(target.image, fr.framebuffer.color, target.mask, fr.framebuffer.mask).value;
    const double lmk = landmark_loss(target.landmarks, project_landmarks(fit.coefficients, basis, camera),
                                     config.loss_weights.landmark_weights)
                           .value;
    const Mesh gt{synthesize_shape(basis, truth.alpha, truth.beta), basis.triangles};
    const Mesh pred{synthesize_shape(basis, fit.coefficients.alpha, fit.coefficients.beta), basis.triangles};
    const Mesh mean{synthesize_shape(basis, Eigen::VectorXd::Zero(basis.dims().id),
                                     Eigen::VectorXd::Zero(basis.dims().exp)),
                    basis.triangles};
    const int nose = basis.landmarks[kNoseTipLandmark];
    const double rmse = evaluate_reconstruction(pred, gt, nose).rmse;
    const double mean_rmse = evaluate_reconstruction(mean, gt, nose).rmse;

    std::printf("  seed %2llu: pho %.4f  lmk %.4f px^2  p2plane %.3f mm (mean face %.3f)  %zu iters  %.1f s\n",
                static_cast<unsigned long long>(seed), pho, lmk, rmse, mean_rmse,
                fit.trace.records.size(), secs);
    std::fflush(stdout);
    const std::string tag = " (seed " + std::to_string(seed) + ")";
    o.require(pho < 0.05, "photometric" + tag);
    o.require(lmk < 1.0, "landmarks" + tag);
    o.require(rmse < 1.0, "p2plane" + tag);
    o.require(secs < 60.0, "time" + tag);
    o.require(fit.trace.records.size() <= 500, "iterations" + tag);
    worst_pho = std::max(worst_pho, pho);
    worst_lmk = std::max(worst_lmk, lmk);
    worst_rmse = std::max(worst_rmse, rmse);
    worst_time = std::max(worst_time, secs);
    baseline += mean_rmse / 10.0;
  }
  o.detail << "10 seeds, worst pho " << worst_pho << ", worst lmk " << worst_lmk << " px^2, worst p2plane "
           << worst_rmse << " mm (mean-face baseline " << baseline << " mm), slowest fit " << worst_time
           << " s";
}

// Face-sized bump on a jittered grid (see the evaluation unit tests).
Mesh bump_surface(std::uint64_t seed) {
  Rng rng(seed);
  Mesh m = oracle::random_surface(33, rng, 2.5, 0.0);
  for (int i = 0; i < m.num_vertices(); ++i) {
    const double x = m.vertices(i, 0) - 40.0 + rng.uniform(-1.2, 1.2);
    const double y = 1.2 * (m.vertices(i, 1) - 40.0) + rng.uniform(-1.2, 1.2);
    m.vertices.row(i) << x, y,
        30.0 * std::exp(-(x * x + 0.5 * y * y) / 800.0) + 3.0 * std::sin(x / 7.0) * std::cos(y / 9.0);
  }
  return m;
}

void evaluation_protocol(Outcome& o) {
  double worst_transform = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Mesh target = bump_surface(seed);
    Rng rng(100 + seed);
    AlignTransform truth;
    const Eigen::Vector3d axis = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    truth.rotation = Eigen::AngleAxisd(10.0 * std::numbers::pi / 180.0, axis).toRotationMatrix();
    truth.scale = 1.05;
    truth.translation = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Mesh source{truth.inverse().apply(target.vertices), target.triangles};
    const IcpResult r = icp_align(source, target);
    const double err = std::max({(r.transform.rotation - truth.rotation).cwiseAbs().maxCoeff(),
                                 std::abs(r.transform.scale - truth.scale),
                                 (r.transform.translation - truth.translation).cwiseAbs().maxCoeff()});
    worst_transform = std::max(worst_transform, err);
  }
  o.require(worst_transform <= 1e-6, "ICP similarity recovery");

  double worst_metric = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    Mesh target = oracle::random_surface(10, rng, 1.0, 0.6);
    Mesh source;
    source.vertices.resize(80, 3);
    for (int i = 0; i < 80; ++i) source.vertices.row(i) << rng.uniform(-1, 10), rng.uniform(-1, 10), rng.normal(0, 1);
    worst_metric = std::max({worst_metric,
                             std::abs(point_to_plane_rmse(source, target) - oracle::point_to_plane_rmse(source, target)),
                             std::abs(point_to_point_rmse(source, target) - oracle::point_to_point_rmse(source, target))});
  }
  o.require(worst_metric <= 1e-9, "metrics match brute force");

  const Mesh face = bump_surface(9);
  const int nose = 16 * 33 + 16;
  ProtocolOptions opt;
  const double p2plane = point_to_plane_rmse(face, face);
  const double p2point = point_to_point_rmse(face, face);
  const double protocol = evaluate_reconstruction(face, face, nose, opt).rmse;
  opt.metric = EvalMetric::kPointToPoint;
  const double protocol_pt = evaluate_reconstruction(face, face, nose, opt).rmse;
  o.require(p2plane == 0.0 && p2point == 0.0 && protocol == 0.0 && protocol_pt == 0.0,
            "identical meshes score exactly 0");
  o.detail << "ICP max transform error " << worst_transform << ", metric vs oracle " << worst_metric
           << ", identical meshes " << p2plane << " / " << p2point << " / " << protocol << " / "
           << protocol_pt;
}

void determinism(Outcome& o) {
  const cli::ScratchDir dir("acceptance_determinism");
  const cli::Scenario s = cli::make_scenario(dir);
  std::string fit_out[2], render_out[2], selftest_out[2];
  for (int rep = 0; rep < 2; ++rep) {
    const std::string out = dir / ("fit" + std::to_string(rep));
    const cli::CliRun f = cli::run({"fit", "--image", s.image, "--landmarks", s.landmarks, "--mask", s.mask,
                                    "--basis", s.basis, "--out", out, "--iterations", "40", "--seed", "7"},
                                   dir);
    o.require(f.exit_code == 0, "fit exits 0");
    fit_out[rep] = f.out;
    for (const char* name : {"coefficients.json", "mesh.obj", "render.ppm", "trace.csv"}) {
      fit_out[rep] += cli::slurp(dir.path() / ("fit" + std::to_string(rep)) / name);
    }
    const std::string image = dir / ("render" + std::to_string(rep) + ".ppm");
    const cli::CliRun r = cli::run({"render", "--coeffs", (dir.path() / "fit0" / "coefficients.json").string(),
                                    "--basis", s.basis, "--out", image, "--width", "64", "--height", "64"},
                                   dir);
    o.require(r.exit_code == 0, "render exits 0");
    render_out[rep] = r.out + cli::slurp(image);
    const cli::CliRun st = cli::run({"selftest"}, dir);
    selftest_out[rep] = st.out;
  }
  o.require(fit_out[0] == fit_out[1], "fit outputs identical");
  o.require(render_out[0] == render_out[1], "render outputs identical");
  o.require(selftest_out[0] == selftest_out[1], "selftest outputs identical");
  o.detail << "fit (" << fit_out[0].size() << " bytes), render (" << render_out[0].size()
           << " bytes), selftest (" << selftest_out[0].size() << " bytes) bitwise identical across two runs";
}

void cli_contract(Outcome& o) {
  const cli::ScratchDir dir("acceptance_cli");
  const cli::CliRun st = cli::run({"selftest"}, dir);
  o.require(st.exit_code == 0, "selftest exits 0");
  const SelftestResult self = run_selftest();
  o.require(self.passed() && st.out == format_selftest_report(self), "selftest report");

  const cli::Scenario s = cli::make_scenario(dir);
  std::set<std::string> readers;
  std::size_t count = 0;
  for (const cli::MalformedCase& c : cli::malformed_cases(dir, s)) {
    ++count;
    readers.insert(c.reader);
    const cli::CliRun r = cli::run(c.args, dir);
    const std::string prefix = "msma: error: " + c.file + ":";
    bool named = r.exit_code != 0 && r.err.rfind(prefix, 0) == 0;
    if (named) {
      const std::size_t colon = r.err.find(": ", prefix.size());
      named = colon != std::string::npos && colon > prefix.size();
      if (named && !c.location.empty()) named = r.err.substr(prefix.size(), colon - prefix.size()) == c.location;
    }
    o.require(named, c.reader + " " + c.file);
  }
  o.detail << "selftest " << self.cases.size() << " cases pass; " << count << " malformed inputs over "
           << readers.size() << " readers rejected with file:location diagnostics";
}

}  // namespace
}  // namespace msma

int main() {
  using namespace msma;
  const struct {
    int id;
    const char* name;
    std::function<void(Outcome&)> run;
  } criteria[] = {
      {1, "gradient suite", gradient_suite},
      {2, "analytic loss values", analytic_losses},
      {3, "architecture shapes", architecture_shapes},
      {4, "MLKA identity and oracle", mlka_identity},
      {5, "synthetic fitting recovery", synthetic_recovery},
      {6, "evaluation protocol", evaluation_protocol},
      {7, "determinism", determinism},
      {8, "CLI contract", cli_contract},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.passed = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    std::printf("%s criterion %d (%s): %s (%.1f s)\n", o.passed ? "PASS" : "FAIL", c.id, c.name,
                o.detail.str().c_str(), seconds_since(t0));
    std::fflush(stdout);
    failed += o.passed ? 0 : 1;
  }
  std::printf("%d/8 criteria passed\n", 8 - failed);
  return failed == 0 ? 0 : 1;
}
