// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/image.hpp"

#include <string>

#include "msma/error.hpp"

namespace msma {

Image::Image(int height, int width, double fill)
    : height_(height), width_(width) {
  if (height < 0 || width < 0) throw ShapeError("image: negative dimensions");
  rgb_.assign(static_cast<std::size_t>(height) * width * 3, fill);
}

SkinMask::SkinMask(int height, int width, double fill)
    : height_(height), width_(width) {
  if (height < 0 || width < 0) throw ShapeError("mask: negative dimensions");
  values_.assign(static_cast<std::size_t>(height) * width, fill);
}

void SkinMask::validate() const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!(values_[i] >= 0.0 && values_[i] <= 1.0)) {
      throw ParameterError("mask: value " + std::to_string(values_[i]) +
                           " at index " + std::to_string(i) +
                           " outside [0, 1]");
    }
  }
}

}  // namespace msma
