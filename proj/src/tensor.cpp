// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "msma/error.hpp"

namespace msma {

namespace {

using SharedTensor = std::shared_ptr<const Tensor4>;

SharedTensor share(const Tensor4& t) { return std::make_shared<Tensor4>(t); }

void require_same_shape(const Tensor4& a, const Tensor4& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

}  // namespace

std::string Shape4::str() const {
  std::ostringstream os;
  os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
  return os.str();
}

Tensor4::Tensor4(Shape4 shape, double fill) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative tensor dimension " + shape.str());
  }
  values_.assign(shape.count(), fill);
}

Tensor4::Tensor4(Shape4 shape, std::vector<double> values)
    : shape_(shape), values_(std::move(values)) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative tensor dimension " + shape.str());
  }
  if (values_.size() != shape.count()) {
    throw ShapeError("tensor data length " + std::to_string(values_.size()) +
                     " does not match dims " + shape.str());
  }
}

Tensor4& Tensor4::operator+=(const Tensor4& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

BackwardRecord::BackwardRecord(std::string op, std::vector<Shape4> input_shapes,
                               Shape4 output_shape, Fn fn)
    : op_(std::move(op)),
      input_shapes_(std::move(input_shapes)),
      output_shape_(output_shape),
      fn_(std::move(fn)) {}

std::vector<Tensor4> BackwardRecord::apply(const Tensor4& grad_output) const {
  if (!fn_) throw StateError("backward applied to an empty record");
  if (grad_output.shape() != output_shape_) {
    throw ShapeError(op_ + " backward: gradient shape " +
                     grad_output.shape().str() + " differs from output " +
                     output_shape_.str());
  }
  return fn_(grad_output);
}

// ---------------------------------------------------------------------------
// conv2d

Shape4 conv2d_output_shape(const Shape4& input, const Shape4& kernel,
                           const Conv2dOptions& o) {
  if (o.stride < 1 || o.dilation < 1 || o.groups < 1 || o.padding < 0) {
    throw ShapeError("conv2d: stride, dilation and groups must be >= 1 and "
                     "padding >= 0");
  }
  if (input.c % o.groups != 0) {
    throw ShapeError("conv2d: input channels " + std::to_string(input.c) +
                     " not divisible by groups " + std::to_string(o.groups));
  }
  if (kernel.n % o.groups != 0) {
    throw ShapeError("conv2d: output channels " + std::to_string(kernel.n) +
                     " not divisible by groups " + std::to_string(o.groups));
  }
  if (kernel.c != input.c / o.groups) {
    throw ShapeError("conv2d: kernel " + kernel.str() + " expects " +
                     std::to_string(kernel.c) + " channels per group, input " +
                     input.str() + " provides " +
                     std::to_string(input.c / o.groups));
  }
  const int eff_h = o.dilation * (kernel.h - 1) + 1;
  const int eff_w = o.dilation * (kernel.w - 1) + 1;
  const int span_h = input.h + 2 * o.padding - eff_h;
  const int span_w = input.w + 2 * o.padding - eff_w;
  if (kernel.h < 1 || kernel.w < 1 || span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d: empty spatial output for input " + input.str() +
                     " and kernel " + kernel.str());
  }
  return {input.n, kernel.n, span_h / o.stride + 1, span_w / o.stride + 1};
}

OpResult conv2d(const Tensor4& input, const Tensor4& kernel,
                const Conv2dOptions& o) {
  const Shape4 out_shape =
      conv2d_output_shape(input.shape(), kernel.shape(), o);
  const int cin_g = kernel.c();
  const int cout_g = kernel.n() / o.groups;
  const int kh = kernel.h();
  const int kw = kernel.w();
  const int H = input.h();
  const int W = input.w();

  Tensor4 out(out_shape);
  for (int n = 0; n < out_shape.n; ++n) {
    for (int oc = 0; oc < out_shape.c; ++oc) {
      const int g = oc / cout_g;
      for (int ic = 0; ic < cin_g; ++ic) {
        const int c = g * cin_g + ic;
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const double k = kernel.at(oc, ic, ky, kx);
            for (int oy = 0; oy < out_shape.h; ++oy) {
              const int iy = oy * o.stride - o.padding + ky * o.dilation;
              if (iy < 0 || iy >= H) continue;
              const double* in_row = &input.values()[input.offset(n, c, iy, 0)];
              double* out_row = &out.values()[out.offset(n, oc, oy, 0)];
              for (int ox = 0; ox < out_shape.w; ++ox) {
                const int ix = ox * o.stride - o.padding + kx * o.dilation;
                if (ix < 0 || ix >= W) continue;
                out_row[ox] += k * in_row[ix];
              }
            }
          }
        }
      }
    }
  }

  SharedTensor in_ref = share(input);
  SharedTensor k_ref = share(kernel);
  auto backward = [in_ref, k_ref, o, out_shape](const Tensor4& grad) {
    const Tensor4& in = *in_ref;
    const Tensor4& ker = *k_ref;
    Tensor4 g_in = in.zeros_like();
    Tensor4 g_k = ker.zeros_like();
    const int cin_g = ker.c();
    const int cout_g = ker.n() / o.groups;
    for (int n = 0; n < out_shape.n; ++n) {
      for (int oc = 0; oc < out_shape.c; ++oc) {
        const int g = oc / cout_g;
        for (int ic = 0; ic < cin_g; ++ic) {
          const int c = g * cin_g + ic;
          for (int ky = 0; ky < ker.h(); ++ky) {
            for (int kx = 0; kx < ker.w(); ++kx) {
              const double k = ker.at(oc, ic, ky, kx);
              double acc = 0.0;
              for (int oy = 0; oy < out_shape.h; ++oy) {
                const int iy = oy * o.stride - o.padding + ky * o.dilation;
                if (iy < 0 || iy >= in.h()) continue;
                for (int ox = 0; ox < out_shape.w; ++ox) {
                  const int ix = ox * o.stride - o.padding + kx * o.dilation;
                  if (ix < 0 || ix >= in.w()) continue;
                  const double go = grad.at(n, oc, oy, ox);
                  acc += go * in.at(n, c, iy, ix);
                  g_in.at(n, c, iy, ix) += go * k;
                }
              }
              g_k.at(oc, ic, ky, kx) += acc;
            }
          }
        }
      }
    }
    return std::vector<Tensor4>{std::move(g_in), std::move(g_k)};
  };
  return {std::move(out),
          BackwardRecord("conv2d", {input.shape(), kernel.shape()}, out_shape,
                         std::move(backward))};
}

OpResult pointwise_conv(const Tensor4& input, const Tensor4& kernel) {
  if (kernel.h() != 1 || kernel.w() != 1) {
    throw ShapeError("pointwise_conv: kernel must be 1x1, got " +
                     kernel.shape().str());
  }
  if (kernel.c() != input.c()) {
    throw ShapeError("pointwise_conv: kernel expects " +
                     std::to_string(kernel.c()) + " input channels, input has " +
                     std::to_string(input.c()));
  }
  const int N = input.n();
  const int C = input.c();
  const int K = kernel.n();
  const std::size_t hw = static_cast<std::size_t>(input.h()) * input.w();
  const Shape4 out_shape{N, K, input.h(), input.w()};
  Tensor4 out(out_shape);
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      double* dst = &out.values()[out.offset(n, k, 0, 0)];
      for (int c = 0; c < C; ++c) {
        const double wgt = kernel.at(k, c, 0, 0);
        const double* src = &input.values()[input.offset(n, c, 0, 0)];
        for (std::size_t p = 0; p < hw; ++p) dst[p] += wgt * src[p];
      }
    }
  }
  SharedTensor in_ref = share(input);
  SharedTensor k_ref = share(kernel);
  auto backward = [in_ref, k_ref, hw](const Tensor4& grad) {
    const Tensor4& in = *in_ref;
    const Tensor4& ker = *k_ref;
    Tensor4 g_in = in.zeros_like();
    Tensor4 g_k = ker.zeros_like();
    for (int n = 0; n < in.n(); ++n) {
      for (int k = 0; k < ker.n(); ++k) {
        const double* go = &grad.values()[grad.offset(n, k, 0, 0)];
        for (int c = 0; c < in.c(); ++c) {
          const double wgt = ker.at(k, c, 0, 0);
          const double* src = &in.values()[in.offset(n, c, 0, 0)];
          double* gi = &g_in.values()[g_in.offset(n, c, 0, 0)];
          double acc = 0.0;
          for (std::size_t p = 0; p < hw; ++p) {
            gi[p] += wgt * go[p];
            acc += go[p] * src[p];
          }
          g_k.at(k, c, 0, 0) += acc;
        }
      }
    }
    return std::vector<Tensor4>{std::move(g_in), std::move(g_k)};
  };
  return {std::move(out),
          BackwardRecord("pointwise_conv", {input.shape(), kernel.shape()},
                         out_shape, std::move(backward))};
}

// ---------------------------------------------------------------------------
// interpolate

namespace {

// One output coordinate's source taps along an axis.
struct AxisTap {
  int i0;
  int i1;
  double w0;
  double w1;
};

std::vector<AxisTap> axis_taps(int in_size, int out_size,
                               InterpolationMode mode) {
  std::vector<AxisTap> taps(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    if (mode == InterpolationMode::kNearest) {
      const int i = std::min(static_cast<int>(std::floor(o * scale)), in_size - 1);
      taps[o] = {i, i, 1.0, 0.0};
    } else {
      const double src = std::max(scale * (o + 0.5) - 0.5, 0.0);
      const int i0 = std::min(static_cast<int>(src), in_size - 1);
      const int i1 = i0 < in_size - 1 ? i0 + 1 : i0;
      const double l1 = src - i0;
      taps[o] = {i0, i1, 1.0 - l1, l1};
    }
  }
  return taps;
}

}  // namespace

OpResult interpolate(const Tensor4& input, int target_h, int target_w,
                     InterpolationMode mode) {
  if (target_h < 1 || target_w < 1) {
    throw ShapeError("interpolate: target dims must be >= 1");
  }
  if (input.h() < 1 || input.w() < 1) {
    throw ShapeError("interpolate: empty input " + input.shape().str());
  }
  const Shape4 in_shape = input.shape();
  const Shape4 out_shape{in_shape.n, in_shape.c, target_h, target_w};
  Tensor4 out(out_shape);
  if (target_h == in_shape.h && target_w == in_shape.w) {
    out = input;
  } else {
    const auto ty = axis_taps(in_shape.h, target_h, mode);
    const auto tx = axis_taps(in_shape.w, target_w, mode);
    for (int n = 0; n < in_shape.n; ++n) {
      for (int c = 0; c < in_shape.c; ++c) {
        for (int oy = 0; oy < target_h; ++oy) {
          const AxisTap& a = ty[oy];
          for (int ox = 0; ox < target_w; ++ox) {
            const AxisTap& b = tx[ox];
            out.at(n, c, oy, ox) =
                a.w0 * (b.w0 * input.at(n, c, a.i0, b.i0) +
                        b.w1 * input.at(n, c, a.i0, b.i1)) +
                a.w1 * (b.w0 * input.at(n, c, a.i1, b.i0) +
                        b.w1 * input.at(n, c, a.i1, b.i1));
          }
        }
      }
    }
  }
  auto backward = [in_shape, out_shape, mode](const Tensor4& grad) {
    if (in_shape.h == out_shape.h && in_shape.w == out_shape.w) {
      return std::vector<Tensor4>{grad};
    }
    Tensor4 g(in_shape);
    const auto ty = axis_taps(in_shape.h, out_shape.h, mode);
    const auto tx = axis_taps(in_shape.w, out_shape.w, mode);
    for (int n = 0; n < in_shape.n; ++n) {
      for (int c = 0; c < in_shape.c; ++c) {
        for (int oy = 0; oy < out_shape.h; ++oy) {
          const AxisTap& a = ty[oy];
          for (int ox = 0; ox < out_shape.w; ++ox) {
            const AxisTap& b = tx[ox];
            const double go = grad.at(n, c, oy, ox);
            g.at(n, c, a.i0, b.i0) += a.w0 * b.w0 * go;
            g.at(n, c, a.i0, b.i1) += a.w0 * b.w1 * go;
            g.at(n, c, a.i1, b.i0) += a.w1 * b.w0 * go;
            g.at(n, c, a.i1, b.i1) += a.w1 * b.w1 * go;
          }
        }
      }
    }
    return std::vector<Tensor4>{std::move(g)};
  };
  return {std::move(out), BackwardRecord("interpolate", {in_shape}, out_shape,
                                         std::move(backward))};
}

// ---------------------------------------------------------------------------
// elementwise family

OpResult elementwise(const Tensor4& a, const Tensor4& b, ElementwiseOp op) {
  require_same_shape(a, b, "elementwise");
  Tensor4 out(a.shape());
  if (op == ElementwiseOp::kAdd) {
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    auto backward = [](const Tensor4& grad) {
      return std::vector<Tensor4>{grad, grad};
    };
    return {std::move(out), BackwardRecord("add", {a.shape(), b.shape()},
                                           a.shape(), std::move(backward))};
  }
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  SharedTensor a_ref = share(a);
  SharedTensor b_ref = share(b);
  auto backward = [a_ref, b_ref](const Tensor4& grad) {
    Tensor4 ga = grad.zeros_like();
    Tensor4 gb = grad.zeros_like();
    for (std::size_t i = 0; i < grad.size(); ++i) {
      ga[i] = grad[i] * (*b_ref)[i];
      gb[i] = grad[i] * (*a_ref)[i];
    }
    return std::vector<Tensor4>{std::move(ga), std::move(gb)};
  };
  return {std::move(out), BackwardRecord("mul", {a.shape(), b.shape()},
                                         a.shape(), std::move(backward))};
}

OpResult relu(const Tensor4& a) {
  Tensor4 out(a.shape());
  auto positive = std::make_shared<std::vector<bool>>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    (*positive)[i] = a[i] > 0.0;
    out[i] = (*positive)[i] ? a[i] : 0.0;
  }
  auto backward = [positive](const Tensor4& grad) {
    Tensor4 g = grad.zeros_like();
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if ((*positive)[i]) g[i] = grad[i];
    }
    return std::vector<Tensor4>{std::move(g)};
  };
  return {std::move(out),
          BackwardRecord("relu", {a.shape()}, a.shape(), std::move(backward))};
}

OpResult concat_channels(std::span<const Tensor4> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape4 first = parts.front().shape();
  int channels = 0;
  std::vector<Shape4> shapes;
  for (const Tensor4& p : parts) {
    if (p.n() != first.n || p.h() != first.h || p.w() != first.w) {
      throw ShapeError("concat_channels: incompatible shapes " + first.str() +
                       " and " + p.shape().str());
    }
    channels += p.c();
    shapes.push_back(p.shape());
  }
  const Shape4 out_shape{first.n, channels, first.h, first.w};
  Tensor4 out(out_shape);
  const std::size_t hw = static_cast<std::size_t>(first.h) * first.w;
  for (int n = 0; n < first.n; ++n) {
    int c0 = 0;
    for (const Tensor4& p : parts) {
      const std::size_t len = hw * p.c();
      std::copy_n(&p.values()[p.offset(n, 0, 0, 0)], len,
                  &out.values()[out.offset(n, c0, 0, 0)]);
      c0 += p.c();
    }
  }
  auto backward = [shapes, hw](const Tensor4& grad) {
    std::vector<Tensor4> grads;
    grads.reserve(shapes.size());
    for (const Shape4& s : shapes) grads.emplace_back(s);
    for (int n = 0; n < grad.n(); ++n) {
      int c0 = 0;
      for (Tensor4& g : grads) {
        std::copy_n(&grad.values()[grad.offset(n, c0, 0, 0)], hw * g.c(),
                    &g.values()[g.offset(n, 0, 0, 0)]);
        c0 += g.c();
      }
    }
    return grads;
  };
  return {std::move(out), BackwardRecord("concat_channels", std::move(shapes),
                                         out_shape, std::move(backward))};
}

std::vector<Tensor4> split_channels(const Tensor4& a, int parts) {
  if (parts < 1 || a.c() % parts != 0) {
    throw ShapeError("split_channels: " + std::to_string(a.c()) +
                     " channels not divisible into " + std::to_string(parts) +
                     " parts");
  }
  const int cp = a.c() / parts;
  const std::size_t len = static_cast<std::size_t>(cp) * a.h() * a.w();
  std::vector<Tensor4> out;
  out.reserve(parts);
  for (int p = 0; p < parts; ++p) {
    Tensor4 t({a.n(), cp, a.h(), a.w()});
    for (int n = 0; n < a.n(); ++n) {
      std::copy_n(&a.values()[a.offset(n, p * cp, 0, 0)], len,
                  &t.values()[t.offset(n, 0, 0, 0)]);
    }
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// dense

OpResult fully_connected(const Tensor4& input, const Tensor4& weight,
                         const Tensor4& bias) {
  if (input.h() != 1 || input.w() != 1 || weight.h() != 1 || weight.w() != 1) {
    throw ShapeError("fully_connected: expects flat (N, C, 1, 1) operands");
  }
  if (weight.c() != input.c()) {
    throw ShapeError("fully_connected: weight " + weight.shape().str() +
                     " does not accept input length " +
                     std::to_string(input.c()));
  }
  if (bias.shape() != Shape4{weight.n(), 1, 1, 1}) {
    throw ShapeError("fully_connected: bias " + bias.shape().str() +
                     " does not match " + std::to_string(weight.n()) +
                     " outputs");
  }
  const int N = input.n();
  const int in = input.c();
  const int out_len = weight.n();
  const Shape4 out_shape{N, out_len, 1, 1};
  Tensor4 out(out_shape);
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < out_len; ++o) {
      double acc = bias[o];
      for (int i = 0; i < in; ++i) acc += weight.at(o, i, 0, 0) * input.at(n, i, 0, 0);
      out.at(n, o, 0, 0) = acc;
    }
  }
  SharedTensor in_ref = share(input);
  SharedTensor w_ref = share(weight);
  auto backward = [in_ref, w_ref](const Tensor4& grad) {
    const Tensor4& x = *in_ref;
    const Tensor4& wt = *w_ref;
    Tensor4 gx = x.zeros_like();
    Tensor4 gw = wt.zeros_like();
    Tensor4 gb({wt.n(), 1, 1, 1});
    for (int n = 0; n < x.n(); ++n) {
      for (int o = 0; o < wt.n(); ++o) {
        const double go = grad.at(n, o, 0, 0);
        gb[o] += go;
        for (int i = 0; i < x.c(); ++i) {
          gw.at(o, i, 0, 0) += go * x.at(n, i, 0, 0);
          gx.at(n, i, 0, 0) += go * wt.at(o, i, 0, 0);
        }
      }
    }
    return std::vector<Tensor4>{std::move(gx), std::move(gw), std::move(gb)};
  };
  return {std::move(out),
          BackwardRecord("fully_connected",
                         {input.shape(), weight.shape(), bias.shape()},
                         out_shape, std::move(backward))};
}

OpResult global_average_pool(const Tensor4& input) {
  const Shape4 in_shape = input.shape();
  if (in_shape.h < 1 || in_shape.w < 1) {
    throw ShapeError("global_average_pool: empty spatial dims " + in_shape.str());
  }
  const Shape4 out_shape{in_shape.n, in_shape.c, 1, 1};
  const std::size_t hw = static_cast<std::size_t>(in_shape.h) * in_shape.w;
  Tensor4 out(out_shape);
  for (int n = 0; n < in_shape.n; ++n) {
    for (int c = 0; c < in_shape.c; ++c) {
      const double* src = &input.values()[input.offset(n, c, 0, 0)];
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) acc += src[p];
      out.at(n, c, 0, 0) = acc / static_cast<double>(hw);
    }
  }
  auto backward = [in_shape, hw](const Tensor4& grad) {
    Tensor4 g(in_shape);
    for (int n = 0; n < in_shape.n; ++n) {
      for (int c = 0; c < in_shape.c; ++c) {
        const double v = grad.at(n, c, 0, 0) / static_cast<double>(hw);
        double* dst = &g.values()[g.offset(n, c, 0, 0)];
        std::fill_n(dst, hw, v);
      }
    }
    return std::vector<Tensor4>{std::move(g)};
  };
  return {std::move(out), BackwardRecord("global_average_pool", {in_shape},
                                         out_shape, std::move(backward))};
}

}  // namespace msma
