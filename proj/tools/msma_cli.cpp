// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// msma: command-line front end for fitting, rendering, evaluation and the
// built-in checks. Exit codes: 0 success, 1 check failure or runtime error,
// 2 bad arguments or malformed input, 3 file system error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "msma/assets_io.hpp"
#include "msma/camera.hpp"
#include "msma/error.hpp"
#include "msma/evaluation.hpp"
#include "msma/fitting.hpp"
#include "msma/gradcheck_suite.hpp"
#include "msma/losses.hpp"
#include "msma/renderer.hpp"
#include "msma/selftest.hpp"

namespace {

using namespace msma;

struct CameraArgs {
  int width = 224;
  int height = 224;
  std::optional<double> focal;

  void add_to(CLI::App* cmd, bool with_size) {
    if (with_size) {
      cmd->add_option("--width", width, "Image width in pixels")->check(CLI::PositiveNumber);
      cmd->add_option("--height", height, "Image height in pixels")->check(CLI::PositiveNumber);
    }
    cmd->add_option("--focal", focal, "Focal length in pixels (default 1015 * width / 224)")
        ->check(CLI::PositiveNumber);
  }

  CameraModel camera(int h, int w) const {
    CameraModel cam = CameraModel::for_image(h, w);
    if (focal) cam.focal_length = *focal;
    return cam;
  }
};

SkinMask coverage_mask(const Framebuffer& fb) {
  SkinMask m(fb.height, fb.width);
  for (std::size_t i = 0; i < fb.mask.size(); ++i) m.data()[i] = fb.mask[i];
  return m;
}

Mesh face_mesh(const FaceCoefficients& c, const FaceBasis& basis) {
  return {synthesize_shape(basis, c.alpha, c.beta), basis.triangles};
}

void check_dims(const FaceCoefficients& c, const FaceBasis& basis, const std::string& path) {
  if (!(c.dims() == basis.dims())) {
    throw ParseError(path, "content", "coefficient counts do not match the basis");
  }
}

void ensure_directory(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir + ": cannot create directory: " + ec.message());
}

std::string join(const std::string& dir, const char* name) {
  return (std::filesystem::path(dir) / name).string();
}

// ---------------------------------------------------------------------------

struct FitArgs {
  std::string image, landmarks, mask, basis, out, config;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
  CameraArgs camera;
};

int run_fit(const FitArgs& a) {
  const Image image = read_image(a.image);
  const Points2 landmarks = read_landmarks(a.landmarks);
  SkinMask mask;
  if (a.mask.empty()) {
    mask = SkinMask(image.height(), image.width(), 1.0);
  } else {
    mask = read_mask(a.mask);
    check_mask_matches(mask, image, a.mask);
  }
  const FaceBasis basis = read_basis(a.basis);
  FitConfig config = a.config.empty() ? FitConfig{} : read_config(a.config);
  if (a.iterations) config.max_iterations = *a.iterations;
  if (a.seed) config.seed = *a.seed;
  const CameraModel camera = a.camera.camera(image.height(), image.width());

  const FitTarget target{image, landmarks, mask};
  const auto start = std::chrono::steady_clock::now();
  const FitResult r = fit_coefficients(target, basis, camera, config, AveragePoolEmbedder());
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  ensure_directory(a.out);
  write_coefficients(r.coefficients, join(a.out, "coefficients.json"));
  write_obj(face_mesh(r.coefficients, basis), join(a.out, "mesh.obj"));
  write_image(render_face(r.coefficients, basis, camera).framebuffer.color,
              join(a.out, "render.ppm"));
  write_trace_csv(r.trace, join(a.out, "trace.csv"));

  std::printf("iterations=%zu\n", r.trace.records.size());
  if (!r.trace.records.empty()) {
    std::printf("initial_loss=%s\nfinal_loss=%s\n",
                format_double(r.trace.records.front().total).c_str(),
                format_double(r.trace.records.back().total).c_str());
  }
  std::fprintf(stderr, "fit finished in %.2f s, outputs in %s\n", seconds, a.out.c_str());
  return 0;
}

struct RenderArgs {
  std::string coeffs, basis, out, landmarks_out, mask_out, mesh_out;
  CameraArgs camera;
};

int run_render(const RenderArgs& a) {
  const FaceBasis basis = read_basis(a.basis);
  const FaceCoefficients c = read_coefficients(a.coeffs);
  check_dims(c, basis, a.coeffs);
  const CameraModel camera = a.camera.camera(a.camera.height, a.camera.width);
  const RenderedFace r = render_face(c, basis, camera);
  write_image(r.framebuffer.color, a.out);
  if (!a.landmarks_out.empty()) {
    write_landmarks(project_landmarks(c, basis, camera), a.landmarks_out);
  }
  if (!a.mask_out.empty()) write_mask(coverage_mask(r.framebuffer), a.mask_out);
  if (!a.mesh_out.empty()) write_obj(face_mesh(c, basis), a.mesh_out);
  std::printf("covered_pixels=%zu\n", r.framebuffer.covered_count());
  return 0;
}

struct EvalArgs {
  std::string pred, gt, basis, csv;
  double crop_radius = 95.0;
  std::string metric = "p2plane";
  std::optional<int> nose_vertex;
};

int run_eval(const EvalArgs& a) {
  const Mesh pred = read_obj(a.pred);
  const Mesh gt = read_obj(a.gt);
  int nose = -1;
  if (a.nose_vertex) {
    nose = *a.nose_vertex;
  } else if (!a.basis.empty()) {
    nose = read_basis(a.basis).landmarks[kNoseTipLandmark];
  } else {
    throw ParameterError("eval: give --nose-vertex or --basis to locate the nose tip");
  }
  if (nose < 0 || nose >= gt.num_vertices()) {
    throw ParameterError("eval: nose vertex " + std::to_string(nose) + " is outside " + a.gt +
                         " (" + std::to_string(gt.num_vertices()) + " vertices)");
  }
  ProtocolOptions opts;
  opts.crop_radius = a.crop_radius;
  opts.metric = a.metric == "p2point" ? EvalMetric::kPointToPoint : EvalMetric::kPointToPlane;
  const ProtocolResult r = evaluate_reconstruction(pred, gt, nose, opts);
  std::printf("rmse_mm=%s\n", format_double(r.rmse).c_str());
  if (!a.csv.empty()) {
    std::string out = "vertex,x,y,z,error_mm\n";
    const Vertices& v = r.cropped_ground_truth.vertices;
    for (int i = 0; i < v.rows(); ++i) {
      out += std::to_string(i) + "," + format_double(v(i, 0)) + "," + format_double(v(i, 1)) +
             "," + format_double(v(i, 2)) + "," + format_double(r.per_vertex[i]) + "\n";
    }
    write_file(a.csv, out);
  }
  return 0;
}

struct BasisArgs {
  std::string out;
  int vertices = 2000;
  std::uint64_t seed = 1;
  int id = 80, exp = 64, tex = 80;
};

int run_make_basis(const BasisArgs& a) {
  write_basis(synthetic_basis(a.seed, a.vertices, {a.id, a.exp, a.tex}), a.out);
  return 0;
}

struct InitArgs {
  std::string basis, out;
  CameraArgs camera;
};

int run_init(const InitArgs& a) {
  const FaceBasis basis = read_basis(a.basis);
  write_coefficients(
      default_initialization(basis, a.camera.camera(a.camera.height, a.camera.width)), a.out);
  return 0;
}

int run_gradcheck(const std::string& module, std::uint64_t seed) {
  const GradcheckSuiteResult r = run_gradcheck_suite(module, seed);
  std::fputs(format_gradcheck_table(r).c_str(), stdout);
  return r.passed() ? 0 : 1;
}

int run_selftest_command() {
  const SelftestResult r = run_selftest();
  std::fputs(format_selftest_report(r).c_str(), stdout);
  return r.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable 3D morphable face engine"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "msma 1.0.0");

  FitArgs fit;
  CLI::App* fit_cmd = app.add_subcommand("fit", "Fit face coefficients to one image");
  fit_cmd->add_option("--image", fit.image, "Target image (PPM, or PNG when enabled)")
      ->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--landmarks", fit.landmarks, "68 landmark rows \"x y\"")
      ->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--mask", fit.mask, "Skin mask PGM (default: all ones)")
      ->check(CLI::ExistingFile);
  fit_cmd->add_option("--basis", fit.basis, "Face basis (MFB1)")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--out", fit.out, "Output directory")->required();
  fit_cmd->add_option("--config", fit.config, "Fit configuration JSON")->check(CLI::ExistingFile);
  fit_cmd->add_option("--iterations", fit.iterations, "Override max_iterations")
      ->check(CLI::NonNegativeNumber);
  fit_cmd->add_option("--seed", fit.seed, "Override the configuration seed");
  fit.camera.add_to(fit_cmd, false);

  RenderArgs render;
  CLI::App* render_cmd = app.add_subcommand("render", "Render coefficients to an image");
  render_cmd->add_option("--coeffs", render.coeffs, "Coefficients JSON")
      ->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--basis", render.basis, "Face basis (MFB1)")
      ->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--out", render.out, "Output image (.ppm, or .png when enabled)")
      ->required();
  render_cmd->add_option("--landmarks-out", render.landmarks_out, "Also write projected landmarks");
  render_cmd->add_option("--mask-out", render.mask_out, "Also write the coverage mask (PGM)");
  render_cmd->add_option("--mesh-out", render.mesh_out, "Also write the face mesh (OBJ)");
  render.camera.add_to(render_cmd, true);

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Geometric error between two meshes");
  eval_cmd->add_option("--pred", eval.pred, "Predicted mesh (OBJ)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--gt", eval.gt, "Ground-truth mesh (OBJ)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--crop-radius", eval.crop_radius, "Crop radius around the nose tip (mm)")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--metric", eval.metric, "p2plane or p2point")
      ->check(CLI::IsMember({"p2plane", "p2point"}));
  eval_cmd->add_option("--nose-vertex", eval.nose_vertex, "Ground-truth nose-tip vertex index");
  eval_cmd->add_option("--basis", eval.basis, "Take the nose tip from this basis's landmarks")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--csv", eval.csv, "Write per-vertex errors");

  BasisArgs basis;
  CLI::App* basis_cmd = app.add_subcommand("make-basis", "Write a synthetic face basis");
  basis_cmd->add_option("--out", basis.out, "Output file (MFB1)")->required();
  basis_cmd->add_option("--vertices", basis.vertices, "Vertex count")->check(CLI::Range(100, 1000000));
  basis_cmd->add_option("--seed", basis.seed, "Generator seed");
  basis_cmd->add_option("--id", basis.id, "Identity basis size")->check(CLI::PositiveNumber);
  basis_cmd->add_option("--exp", basis.exp, "Expression basis size")->check(CLI::PositiveNumber);
  basis_cmd->add_option("--tex", basis.tex, "Texture basis size")->check(CLI::PositiveNumber);

  InitArgs init;
  CLI::App* init_cmd = app.add_subcommand("init", "Write the default initial coefficients");
  init_cmd->add_option("--basis", init.basis, "Face basis (MFB1)")->required()->check(CLI::ExistingFile);
  init_cmd->add_option("--out", init.out, "Output coefficients JSON")->required();
  init.camera.add_to(init_cmd, true);

  std::string module = "all";
  std::uint64_t gc_seed = 1;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc_cmd->add_option("--module", module, "all, tensor, geometry, losses or network")
      ->check(CLI::IsMember({"all", "tensor", "geometry", "losses", "network"}));
  gc_cmd->add_option("--seed", gc_seed, "Probe seed");

  CLI::App* st_cmd = app.add_subcommand("selftest", "Built-in sanity checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (fit_cmd->parsed()) return run_fit(fit);
    if (render_cmd->parsed()) return run_render(render);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (basis_cmd->parsed()) return run_make_basis(basis);
    if (init_cmd->parsed()) return run_init(init);
    if (gc_cmd->parsed()) return run_gradcheck(module, gc_seed);
    if (st_cmd->parsed()) return run_selftest_command();
  } catch (const ParseError& e) {
    std::cerr << "msma: error: " << e.what() << "\n";
    return 2;
  } catch (const ParameterError& e) {
    std::cerr << "msma: error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "msma: error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "msma: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
