// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Rank-4 double tensors in NCHW layout and the differentiable operations the
// network blocks are assembled from. Every operation returns its output
// together with a BackwardRecord that maps an output gradient to one gradient
// per input, in argument order.
//
// Conventions: convolution is cross-correlation with zero padding, bilinear
// interpolation uses align_corners = false, elementwise operations never
// broadcast.

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace msma {

struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, double fill = 0.0);
  Tensor4(Shape4 shape, std::vector<double> values);

  static Tensor4 scalar(double value) { return Tensor4({1, 1, 1, 1}, value); }

  const Shape4& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }
  double& at(int n, int c, int h, int w) { return values_[offset(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const {
    return values_[offset(n, c, h, w)];
  }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  Tensor4 zeros_like() const { return Tensor4(shape_); }

  /// Adds `other` elementwise; shapes must match exactly.
  Tensor4& operator+=(const Tensor4& other);

  bool operator==(const Tensor4&) const = default;

 private:
  Shape4 shape_;
  std::vector<double> values_;
};

class BackwardRecord {
 public:
  using Fn = std::function<std::vector<Tensor4>(const Tensor4&)>;

  BackwardRecord() = default;
  BackwardRecord(std::string op, std::vector<Shape4> input_shapes,
                 Shape4 output_shape, Fn fn);

  const std::string& op() const { return op_; }
  const std::vector<Shape4>& input_shapes() const { return input_shapes_; }
  const Shape4& output_shape() const { return output_shape_; }
  bool valid() const { return static_cast<bool>(fn_); }

  /// Input gradients for `grad_output`; throws ShapeError when the gradient
  /// shape differs from the forward output and StateError on an empty record.
  std::vector<Tensor4> apply(const Tensor4& grad_output) const;

 private:
  std::string op_;
  std::vector<Shape4> input_shapes_;
  Shape4 output_shape_;
  Fn fn_;
};

struct OpResult {
  Tensor4 output;
  BackwardRecord record;
};

struct Conv2dOptions {
  int stride = 1;
  int dilation = 1;
  int groups = 1;
  int padding = 0;
};

/// Kernel layout is (out_channels, in_channels / groups, kh, kw).
Shape4 conv2d_output_shape(const Shape4& input, const Shape4& kernel,
                           const Conv2dOptions& options);
OpResult conv2d(const Tensor4& input, const Tensor4& kernel,
                const Conv2dOptions& options = {});

/// 1x1 channel mixing; kernel is (out_channels, in_channels, 1, 1).
OpResult pointwise_conv(const Tensor4& input, const Tensor4& kernel);

enum class InterpolationMode { kNearest, kBilinear };

OpResult interpolate(const Tensor4& input, int target_h, int target_w,
                     InterpolationMode mode);

enum class ElementwiseOp { kAdd, kMul };

OpResult elementwise(const Tensor4& a, const Tensor4& b, ElementwiseOp op);
OpResult relu(const Tensor4& a);
OpResult concat_channels(std::span<const Tensor4> parts);
std::vector<Tensor4> split_channels(const Tensor4& a, int parts);

/// Affine map applied per batch row. Input is (N, in, 1, 1), weight is
/// (out, in, 1, 1), bias is (out, 1, 1, 1); output is (N, out, 1, 1).
OpResult fully_connected(const Tensor4& input, const Tensor4& weight,
                         const Tensor4& bias);

/// Mean over all spatial positions; output is (N, C, 1, 1).
OpResult global_average_pool(const Tensor4& input);

}  // namespace msma
