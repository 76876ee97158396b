// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

namespace msma {

/// Row-major, interleaved RGB doubles.
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height_) * width_;
  }
  bool empty() const { return rgb_.empty(); }

  double& at(int y, int x, int c) { return rgb_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return rgb_[index(y, x, c)]; }
  std::vector<double>& data() { return rgb_; }
  const std::vector<double>& data() const { return rgb_; }

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * 3 + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> rgb_;
};

/// Per-pixel weights in [0, 1]; 1 marks face skin.
class SkinMask {
 public:
  SkinMask() = default;
  SkinMask(int height, int width, double fill = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  double& at(int y, int x) { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  double at(int y, int x) const {
    return values_[static_cast<std::size_t>(y) * width_ + x];
  }
  std::vector<double>& data() { return values_; }
  const std::vector<double>& data() const { return values_; }

  /// Throws ParameterError when any value lies outside [0, 1].
  void validate() const;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

}  // namespace msma
