// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/network.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "msma/error.hpp"
#include "msma/illumination.hpp"
#include "msma/rng.hpp"

namespace msma {

namespace {

constexpr Conv2dOptions kStride2Pad1{2, 1, 1, 1};
constexpr Conv2dOptions kStride1Pad1{1, 1, 1, 1};
constexpr Conv2dOptions kShortcut{2, 1, 1, 0};

Tensor4 random_tensor(Shape4 shape, double stddev, Rng& rng) {
  Tensor4 t(shape);
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor4 he_kernel(int out, int in, int k, Rng& rng, double gain = 2.0) {
  return random_tensor({out, in, k, k}, std::sqrt(gain / (in * k * k)), rng);
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_exact(int v) {
  int k = 0;
  while ((1 << k) < v) ++k;
  return k;
}

// Kernel shapes aligning level j to retained level i under `widths`.
std::vector<Shape4> align_kernel_shapes(const std::array<int, 4>& widths, int i, int j) {
  std::vector<Shape4> shapes;
  if (j > i) {
    shapes.push_back({widths[i], widths[j], 1, 1});
  } else {
    for (int s = j; s < i; ++s) shapes.push_back({widths[s + 1], widths[s], 3, 3});
  }
  return shapes;
}

Tensor4 sum_all(const Tensor4& a, const Tensor4& b) {
  Tensor4 out = a;
  out += b;
  return out;
}

template <class P, class F>
void visit_parameters(P& p, F&& fn) {
  fn("backbone.stem", p.backbone.stem);
  for (int s = 0; s < 4; ++s) {
    const std::string pre = "backbone.stage" + std::to_string(s + 1) + ".";
    fn(pre + "conv1", p.backbone.stages[s].conv1);
    fn(pre + "conv2", p.backbone.stages[s].conv2);
    fn(pre + "shortcut", p.backbone.stages[s].shortcut);
  }
  for (int r = 0; r < 3; ++r) {
    for (int j = 0; j < 4; ++j) {
      auto& kernels = p.msf.align[r][j].kernels;
      for (std::size_t m = 0; m < kernels.size(); ++m) {
        fn("msf.level" + std::to_string(r + 1) + ".from" + std::to_string(j) + ".k" +
               std::to_string(m),
           kernels[m]);
      }
    }
  }
  for (int r = 0; r < 3; ++r) {
    const std::string pre = "mlka" + std::to_string(r) + ".";
    for (int b = 0; b < 3; ++b) {
      const std::string bp = pre + "branch" + std::to_string(b) + ".";
      fn(bp + "depthwise", p.mlka[r].branches[b].depthwise);
      fn(bp + "dilated", p.mlka[r].branches[b].dilated);
      fn(bp + "pointwise", p.mlka[r].branches[b].pointwise);
      fn(bp + "gate", p.mlka[r].branches[b].gate);
    }
    fn(pre + "projection", p.mlka[r].projection);
    fn(pre + "scale", p.mlka[r].scale);
  }
  auto head = [&](const std::string& name, auto& a) {
    fn("heads." + name + ".weight", a.weight);
    fn("heads." + name + ".bias", a.bias);
  };
  head("alpha", p.heads.alpha);
  head("beta", p.heads.beta);
  head("gamma", p.heads.gamma);
  head("rotation", p.heads.rotation);
  head("delta", p.heads.delta);
  head("translation", p.heads.translation);
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration and parameters

NetworkConfig NetworkConfig::reference() {
  NetworkConfig c;
  c.stem_width = 64;
  c.widths = {256, 512, 1024, 2048};
  return c;
}

void NetworkConfig::validate() const {
  if (stem_width < 1) throw ParameterError("network: stem width must be positive");
  for (int w : widths) {
    if (w < 1) throw ParameterError("network: pyramid widths must be positive");
  }
  if (dims.id < 1 || dims.exp < 1 || dims.tex < 1) {
    throw ParameterError("network: basis dimensions must be positive");
  }
}

MlkaParams init_mlka(int channels, std::uint64_t seed, double scale) {
  if (channels % 3 != 0) {
    throw ShapeError("mlka: channel count " + std::to_string(channels) +
                     " is not divisible by 3");
  }
  Rng rng(seed);
  const int c = channels / 3;
  MlkaParams p;
  for (int b = 0; b < 3; ++b) {
    const int k = kMlkaBranches[b].kernel;
    p.branches[b].depthwise = random_tensor({c, 1, k, k}, 1.0 / k, rng);
    p.branches[b].dilated = random_tensor({c, 1, k, k}, 1.0 / k, rng);
    p.branches[b].pointwise = he_kernel(c, c, 1, rng, 1.0);
    p.branches[b].gate = random_tensor({c, 1, k, k}, 1.0 / k, rng);
  }
  p.projection = he_kernel(channels, channels, 1, rng, 1.0);
  p.scale = Tensor4::scalar(scale);
  return p;
}

NetworkParams init_network(const NetworkConfig& config, std::uint64_t seed,
                           const FaceCoefficients& head_bias) {
  config.validate();
  if (!(head_bias.dims() == config.dims)) {
    throw ShapeError("init_network: head bias dimensions differ from the config");
  }
  Rng rng(seed);
  NetworkParams p;
  p.config = config;
  const auto& w = config.widths;
  p.backbone.stem = he_kernel(config.stem_width, 3, 3, rng);
  int in = config.stem_width;
  for (int s = 0; s < 4; ++s) {
    p.backbone.stages[s].conv1 = he_kernel(w[s], in, 3, rng);
    p.backbone.stages[s].conv2 = he_kernel(w[s], w[s], 3, rng);
    p.backbone.stages[s].shortcut = he_kernel(w[s], in, 1, rng, 1.0);
    in = w[s];
  }
  for (int r = 0; r < 3; ++r) {
    for (int j = 0; j < 4; ++j) {
      if (j == r + 1) continue;
      for (const Shape4& k : align_kernel_shapes(w, r + 1, j)) {
        p.msf.align[r][j].kernels.push_back(he_kernel(k.n, k.c, k.h, rng, 1.0));
      }
    }
  }
  for (int r = 0; r < 3; ++r) p.mlka[r] = init_mlka(w[r + 1], rng.next(), 0.1);

  auto head = [&](int out, int in_ch, const Eigen::VectorXd& bias) {
    AffineParams a;
    a.weight = random_tensor({out, in_ch, 1, 1}, 0.01 / std::sqrt(in_ch), rng);
    a.bias = Tensor4({out, 1, 1, 1}, std::vector<double>(bias.data(), bias.data() + out));
    return a;
  };
  p.heads.alpha = head(config.dims.id, w[3], head_bias.alpha);
  p.heads.beta = head(config.dims.exp, w[3], head_bias.beta);
  p.heads.gamma = head(config.dims.tex, w[2], head_bias.gamma);
  p.heads.rotation = head(3, w[2], head_bias.rotation);
  p.heads.delta = head(9, w[1], head_bias.delta);
  p.heads.translation = head(3, w[1], head_bias.translation);
  return p;
}

NetworkParams zeros_like(const NetworkParams& params) {
  NetworkParams z = params;
  visit_parameters(z, [](const std::string&, Tensor4& t) { t = t.zeros_like(); });
  return z;
}

void for_each_parameter(NetworkParams& params,
                        const std::function<void(const std::string&, Tensor4&)>& fn) {
  visit_parameters(params, fn);
}

void for_each_parameter(
    const NetworkParams& params,
    const std::function<void(const std::string&, const Tensor4&)>& fn) {
  visit_parameters(params, fn);
}

std::size_t parameter_count(const NetworkParams& params) {
  std::size_t n = 0;
  for_each_parameter(params, [&](const std::string&, const Tensor4& t) { n += t.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// backbone

namespace {

BlockResult<ResidualStageParams> residual_stage(const Tensor4& x,
                                                const ResidualStageParams& p) {
  OpResult a = conv2d(x, p.conv1, kStride2Pad1);
  OpResult h = relu(a.output);
  OpResult b = conv2d(h.output, p.conv2, kStride1Pad1);
  OpResult s = conv2d(x, p.shortcut, kShortcut);
  OpResult y = relu(elementwise(b.output, s.output, ElementwiseOp::kAdd).output);
  return {y.output,
          [ra = a.record, rh = h.record, rb = b.record, rs = s.record,
           ry = y.record](const Tensor4& g, ResidualStageParams& grads) {
            const Tensor4 gsum = ry.apply(g)[0];
            const std::vector<Tensor4> gb = rb.apply(gsum);
            grads.conv2 += gb[1];
            const std::vector<Tensor4> gs = rs.apply(gsum);
            grads.shortcut += gs[1];
            const std::vector<Tensor4> ga = ra.apply(rh.apply(gb[0])[0]);
            grads.conv1 += ga[1];
            return sum_all(ga[0], gs[0]);
          }};
}

}  // namespace

BackboneResult backbone_forward(const Tensor4& image, const BackboneParams& params) {
  if (image.c() != 3) throw ShapeError("backbone: expected 3 input channels, got " +
                                       image.shape().str());
  if (image.h() % 32 != 0 || image.w() % 32 != 0 || image.h() == 0 || image.w() == 0) {
    throw ShapeError("backbone: input height and width must be positive multiples "
                     "of 32, got " + image.shape().str());
  }
  OpResult stem = conv2d(image, params.stem, kStride2Pad1);
  OpResult stem_act = relu(stem.output);
  BackboneResult out;
  std::array<std::function<Tensor4(const Tensor4&, ResidualStageParams&)>, 4> stage_bw;
  Tensor4 x = stem_act.output;
  for (int s = 0; s < 4; ++s) {
    BlockResult<ResidualStageParams> r = residual_stage(x, params.stages[s]);
    stage_bw[s] = std::move(r.backward);
    out.pyramid.levels[s] = r.output;
    x = std::move(r.output);
  }
  out.backward = [stage_bw, rs = stem.record, ra = stem_act.record](
                     const FeaturePyramid& g, BackboneParams& grads) {
    Tensor4 carry;
    for (int s = 3; s >= 0; --s) {
      Tensor4 gs = g.levels[s];
      if (!carry.empty()) gs = gs.empty() ? carry : sum_all(gs, carry);
      carry = stage_bw[s](gs, grads.stages[s]);
    }
    const std::vector<Tensor4> gstem = rs.apply(ra.apply(carry)[0]);
    grads.stem += gstem[1];
    return gstem[0];
  };
  return out;
}

// ---------------------------------------------------------------------------
// multi-scale fusion

Shape4 msf_align_shape(const Shape4& source, const Shape4& target,
                       const std::vector<Shape4>& kernels) {
  if (source.n != target.n) throw ShapeError("msf_align: batch sizes differ");
  if (source.h == target.h && source.w == target.w) {
    if (source.c != target.c || !kernels.empty()) {
      throw ShapeError("msf_align: same-size alignment takes no kernels and "
                       "matching channels");
    }
    return source;
  }
  if (target.h > source.h) {
    const int ratio = target.h / source.h;
    if (target.h != source.h * ratio || target.w != source.w * ratio ||
        !is_power_of_two(ratio)) {
      throw ShapeError("msf_align: " + source.str() + " -> " + target.str() +
                       " is not a power-of-two upsampling");
    }
    if (kernels.size() != 1 || !(kernels[0] == Shape4{target.c, source.c, 1, 1})) {
      throw ShapeError("msf_align: upsampling expects one 1x1 projection (" +
                       std::to_string(target.c) + ", " + std::to_string(source.c) +
                       ", 1, 1)");
    }
    return target;
  }
  const int ratio = source.h / target.h;
  if (target.h == 0 || source.h != target.h * ratio || source.w != target.w * ratio ||
      !is_power_of_two(ratio)) {
    throw ShapeError("msf_align: " + source.str() + " -> " + target.str() +
                     " is not a power-of-two downsampling");
  }
  const std::size_t steps = static_cast<std::size_t>(log2_exact(ratio));
  if (kernels.size() != steps) {
    throw ShapeError("msf_align: downsampling by " + std::to_string(ratio) + " needs " +
                     std::to_string(steps) + " stride-2 convolutions, got " +
                     std::to_string(kernels.size()));
  }
  Shape4 s = source;
  for (const Shape4& k : kernels) {
    if (k.h != 3 || k.w != 3) throw ShapeError("msf_align: downsampling kernels are 3x3");
    s = conv2d_output_shape(s, k, kStride2Pad1);
  }
  if (!(s == target)) {
    throw ShapeError("msf_align: downsampling chain yields " + s.str() + ", expected " +
                     target.str());
  }
  return s;
}

BlockResult<MsfAlignParams> msf_align(const Tensor4& source, const Shape4& target,
                                      const MsfAlignParams& params) {
  std::vector<Shape4> kshapes;
  for (const Tensor4& k : params.kernels) kshapes.push_back(k.shape());
  msf_align_shape(source.shape(), target, kshapes);

  if (params.kernels.empty()) {
    return {source, [](const Tensor4& g, MsfAlignParams&) { return g; }};
  }
  if (target.h > source.h()) {
    OpResult proj = pointwise_conv(source, params.kernels[0]);
    OpResult up = interpolate(proj.output, target.h, target.w, InterpolationMode::kBilinear);
    return {up.output, [rp = proj.record, ru = up.record](const Tensor4& g,
                                                          MsfAlignParams& grads) {
              const std::vector<Tensor4> gp = rp.apply(ru.apply(g)[0]);
              grads.kernels[0] += gp[1];
              return gp[0];
            }};
  }
  std::vector<BackwardRecord> records;
  Tensor4 x = source;
  for (const Tensor4& k : params.kernels) {
    OpResult r = conv2d(x, k, kStride2Pad1);
    records.push_back(r.record);
    x = std::move(r.output);
  }
  return {x, [records](const Tensor4& g, MsfAlignParams& grads) {
            Tensor4 carry = g;
            for (std::size_t m = records.size(); m-- > 0;) {
              std::vector<Tensor4> gm = records[m].apply(carry);
              grads.kernels[m] += gm[1];
              carry = std::move(gm[0]);
            }
            return carry;
          }};
}

MsfFuseResult msf_fuse(const FeaturePyramid& pyramid, int level, const MsfParams& params) {
  if (level < 1 || level > 3) {
    throw ParameterError("msf_fuse: retained levels are 1, 2 and 3");
  }
  for (int j = 0; j < 4; ++j) {
    if (pyramid.levels[j].empty()) {
      throw StateError("msf_fuse: pyramid level " + std::to_string(j) + " is missing");
    }
  }
  const int r = level - 1;
  const Shape4 target = pyramid.levels[level].shape();
  Tensor4 sum = pyramid.levels[level];
  std::array<std::function<Tensor4(const Tensor4&, MsfAlignParams&)>, 4> align_bw;
  for (int j = 0; j < 4; ++j) {
    if (j == level) continue;
    BlockResult<MsfAlignParams> a = msf_align(pyramid.levels[j], target, params.align[r][j]);
    sum += a.output;
    align_bw[j] = std::move(a.backward);
  }
  OpResult act = relu(sum);
  return {act.output, [align_bw, ra = act.record, level, r](const Tensor4& g,
                                                            MsfParams& grads) {
            const Tensor4 gpre = ra.apply(g)[0];
            std::array<Tensor4, 4> out;
            for (int j = 0; j < 4; ++j) {
              out[j] = j == level ? gpre : align_bw[j](gpre, grads.align[r][j]);
            }
            return out;
          }};
}

// ---------------------------------------------------------------------------
// large-kernel attention

BlockResult<MlkaParams> mlka_block(const Tensor4& input, const MlkaParams& params) {
  if (input.c() % 3 != 0) {
    throw ShapeError("mlka: channel count " + std::to_string(input.c()) +
                     " is not divisible by 3");
  }
  const int c = input.c() / 3;
  if (params.scale.size() != 1) throw ShapeError("mlka: scale must be a single value");
  const std::vector<Tensor4> parts = split_channels(input, 3);

  struct BranchRecords {
    BackwardRecord depthwise, dilated, pointwise, gate, product;
  };
  std::array<BranchRecords, 3> rec;
  std::array<Tensor4, 3> gated;
  for (int b = 0; b < 3; ++b) {
    const int k = kMlkaBranches[b].kernel;
    const int d = kMlkaBranches[b].dilation;
    const MlkaBranchParams& bp = params.branches[b];
    OpResult dw = conv2d(parts[b], bp.depthwise, {1, 1, c, k / 2});
    OpResult dl = conv2d(dw.output, bp.dilated, {1, d, c, d * (k - 1) / 2});
    OpResult pw = pointwise_conv(dl.output, bp.pointwise);
    OpResult gt = conv2d(parts[b], bp.gate, {1, 1, c, k / 2});
    OpResult pr = elementwise(pw.output, gt.output, ElementwiseOp::kMul);
    rec[b] = {dw.record, dl.record, pw.record, gt.record, pr.record};
    gated[b] = std::move(pr.output);
  }
  OpResult cat = concat_channels(gated);
  OpResult proj = pointwise_conv(cat.output, params.projection);
  const double scale = params.scale[0];

  Tensor4 out = input;
  if (scale != 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += proj.output[i] * scale;
  }
  return {out, [rec, rc = cat.record, rp = proj.record, projected = proj.output,
                scale](const Tensor4& g, MlkaParams& grads) {
            double gscale = 0.0;
            Tensor4 gproj = g.zeros_like();
            for (std::size_t i = 0; i < g.size(); ++i) {
              gscale += g[i] * projected[i];
              gproj[i] = g[i] * scale;
            }
            grads.scale[0] += gscale;
            const std::vector<Tensor4> gp = rp.apply(gproj);
            grads.projection += gp[1];
            const std::vector<Tensor4> gcat = rc.apply(gp[0]);
            std::array<Tensor4, 3> gparts;
            for (int b = 0; b < 3; ++b) {
              const std::vector<Tensor4> gprod = rec[b].product.apply(gcat[b]);
              const std::vector<Tensor4> gpw = rec[b].pointwise.apply(gprod[0]);
              grads.branches[b].pointwise += gpw[1];
              const std::vector<Tensor4> gdl = rec[b].dilated.apply(gpw[0]);
              grads.branches[b].dilated += gdl[1];
              const std::vector<Tensor4> gdw = rec[b].depthwise.apply(gdl[0]);
              grads.branches[b].depthwise += gdw[1];
              const std::vector<Tensor4> ggt = rec[b].gate.apply(gprod[1]);
              grads.branches[b].gate += ggt[1];
              gparts[b] = sum_all(gdw[0], ggt[0]);
            }
            Tensor4 gin = concat_channels(gparts).output;
            gin += g;
            return gin;
          }};
}

// ---------------------------------------------------------------------------
// heads

namespace {

struct HeadSlot {
  const AffineParams* params;
  AffineParams HeadParams::*member;
  int source;  // 0 low, 1 mid, 2 high
  int offset;  // in the packed vector
};

std::array<HeadSlot, 6> head_slots(const HeadParams& p, const BasisDims& dims) {
  const PackedLayout L(dims);
  return {{{&p.alpha, &HeadParams::alpha, 0, L.alpha},
           {&p.beta, &HeadParams::beta, 0, L.beta},
           {&p.gamma, &HeadParams::gamma, 1, L.gamma},
           {&p.rotation, &HeadParams::rotation, 1, L.rotation},
           {&p.delta, &HeadParams::delta, 2, L.delta},
           {&p.translation, &HeadParams::translation, 2, L.translation}}};
}

}  // namespace

HeadsResult regression_heads(const Tensor4& fused_low, const Tensor4& fused_mid,
                             const Tensor4& fused_high, const HeadParams& params,
                             const BasisDims& dims) {
  const int N = fused_low.n();
  if (fused_mid.n() != N || fused_high.n() != N) {
    throw ShapeError("regression_heads: fused maps disagree on batch size");
  }
  const PackedLayout layout(dims);
  const std::array<OpResult, 3> pooled{global_average_pool(fused_low),
                                       global_average_pool(fused_mid),
                                       global_average_pool(fused_high)};
  const auto slots = head_slots(params, dims);
  const std::array<int, 6> expected{dims.id, dims.exp, dims.tex, 3, 9, 3};

  Tensor4 packed({N, layout.total, 1, 1});
  std::array<BackwardRecord, 6> fc_records;
  std::array<int, 6> widths{};
  for (int h = 0; h < 6; ++h) {
    const AffineParams& a = *slots[h].params;
    if (a.weight.n() != expected[h]) {
      throw ShapeError("regression_heads: head " + std::to_string(h) + " outputs " +
                       std::to_string(a.weight.n()) + " values, expected " +
                       std::to_string(expected[h]));
    }
    OpResult fc = fully_connected(pooled[slots[h].source].output, a.weight, a.bias);
    widths[h] = expected[h];
    for (int n = 0; n < N; ++n) {
      for (int k = 0; k < expected[h]; ++k) {
        packed.at(n, slots[h].offset + k, 0, 0) = fc.output.at(n, k, 0, 0);
      }
    }
    fc_records[h] = fc.record;
  }

  std::array<BackwardRecord, 3> pool_records{pooled[0].record, pooled[1].record,
                                             pooled[2].record};
  std::array<Shape4, 3> pooled_shapes{pooled[0].output.shape(), pooled[1].output.shape(),
                                      pooled[2].output.shape()};
  return {packed, [fc_records, pool_records, pooled_shapes, slots, widths, N](
                      const Tensor4& g, HeadParams& grads) {
            std::array<Tensor4, 3> gpool{Tensor4(pooled_shapes[0]), Tensor4(pooled_shapes[1]),
                                         Tensor4(pooled_shapes[2])};
            for (int h = 0; h < 6; ++h) {
              Tensor4 gh({N, widths[h], 1, 1});
              for (int n = 0; n < N; ++n) {
                for (int k = 0; k < widths[h]; ++k) {
                  gh.at(n, k, 0, 0) = g.at(n, slots[h].offset + k, 0, 0);
                }
              }
              const std::vector<Tensor4> gf = fc_records[h].apply(gh);
              AffineParams& ga = grads.*(slots[h].member);
              ga.weight += gf[1];
              ga.bias += gf[2];
              gpool[slots[h].source] += gf[0];
            }
            return std::array<Tensor4, 3>{pool_records[0].apply(gpool[0])[0],
                                          pool_records[1].apply(gpool[1])[0],
                                          pool_records[2].apply(gpool[2])[0]};
          }};
}

FaceCoefficients coefficients_row(const Tensor4& packed, int n, const BasisDims& dims) {
  const PackedLayout layout(dims);
  if (packed.c() != layout.total || packed.h() != 1 || packed.w() != 1 || n < 0 ||
      n >= packed.n()) {
    throw ShapeError("coefficients_row: expected (N, " + std::to_string(layout.total) +
                     ", 1, 1), got " + packed.shape().str());
  }
  Eigen::VectorXd v(layout.total);
  for (int k = 0; k < layout.total; ++k) v[k] = packed.at(n, k, 0, 0);
  return FaceCoefficients::unpack(v, dims);
}

// ---------------------------------------------------------------------------
// full network

NetworkResult network_forward(const Tensor4& image, const NetworkParams& params) {
  BackboneResult bb = backbone_forward(image, params.backbone);
  std::array<std::function<std::array<Tensor4, 4>(const Tensor4&, MsfParams&)>, 3> fuse_bw;
  std::array<std::function<Tensor4(const Tensor4&, MlkaParams&)>, 3> mlka_bw;
  std::array<Tensor4, 3> attended;
  for (int r = 0; r < 3; ++r) {
    MsfFuseResult f = msf_fuse(bb.pyramid, r + 1, params.msf);
    fuse_bw[r] = std::move(f.backward);
    BlockResult<MlkaParams> m = mlka_block(f.output, params.mlka[r]);
    mlka_bw[r] = std::move(m.backward);
    attended[r] = std::move(m.output);
  }
  HeadsResult heads = regression_heads(attended[2], attended[1], attended[0],
                                       params.heads, params.config.dims);
  NetworkResult out;
  out.coefficients = heads.coefficients;
  out.backward = [bbw = std::move(bb.backward), fuse_bw, mlka_bw,
                  hbw = std::move(heads.backward),
                  zero = zeros_like(params)](const Tensor4& g) {
    NetworkParams grads = zero;
    const std::array<Tensor4, 3> gheads = hbw(g, grads.heads);
    // gheads is (low, mid, high) = attended (2, 1, 0).
    FeaturePyramid gpyr;
    for (int r = 0; r < 3; ++r) {
      const Tensor4 gfused = mlka_bw[r](gheads[2 - r], grads.mlka[r]);
      const std::array<Tensor4, 4> gl = fuse_bw[r](gfused, grads.msf);
      for (int j = 0; j < 4; ++j) {
        gpyr.levels[j] = gpyr.levels[j].empty() ? gl[j] : sum_all(gpyr.levels[j], gl[j]);
      }
    }
    bbw(gpyr, grads.backbone);
    return grads;
  };
  return out;
}

// ---------------------------------------------------------------------------
// shapes

NetworkShapes infer_shapes(const NetworkConfig& config, const Shape4& input) {
  config.validate();
  if (input.c != 3 || input.h % 32 != 0 || input.w % 32 != 0 || input.h == 0 ||
      input.w == 0) {
    throw ShapeError("infer_shapes: input must be N x 3 x H x W with H, W multiples "
                     "of 32, got " + input.str());
  }
  NetworkShapes s;
  Shape4 x = conv2d_output_shape(input, {config.stem_width, 3, 3, 3}, kStride2Pad1);
  for (int st = 0; st < 4; ++st) {
    const int w = config.widths[st];
    const Shape4 a = conv2d_output_shape(x, {w, x.c, 3, 3}, kStride2Pad1);
    const Shape4 b = conv2d_output_shape(a, {w, w, 3, 3}, kStride1Pad1);
    const Shape4 sc = conv2d_output_shape(x, {w, x.c, 1, 1}, kShortcut);
    if (!(b == sc)) throw ShapeError("infer_shapes: residual branches disagree");
    s.pyramid[st] = b;
    x = b;
  }
  for (int r = 0; r < 3; ++r) {
    const Shape4 target = s.pyramid[r + 1];
    for (int j = 0; j < 4; ++j) {
      if (j == r + 1) continue;
      const Shape4 aligned = msf_align_shape(
          s.pyramid[j], target, align_kernel_shapes(config.widths, r + 1, j));
      if (!(aligned == target)) throw ShapeError("infer_shapes: misaligned sibling");
    }
    s.fused[r] = target;
    s.mlka[r] = target;  // residual block, shape preserving
  }
  s.head_outputs = {config.dims.id, config.dims.exp, config.dims.tex, 3, 9, 3};
  s.packed_length = config.dims.coefficient_count();
  return s;
}

}  // namespace msma
