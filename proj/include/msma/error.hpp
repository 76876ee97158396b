// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace msma {

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor, matrix, or buffer dimensions that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A numeric argument outside its admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// An object used in a state that does not support the call
/// (for example a framebuffer without pixel records).
class StateError : public Error {
 public:
  using Error::Error;
};

/// A mask, embedding, or point set too degenerate to define the quantity.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// A perspective projection of a point at or behind the near threshold.
class ProjectionError : public Error {
 public:
  ProjectionError(const std::string& message, int vertex)
      : Error(message), vertex_(vertex) {}
  int vertex() const { return vertex_; }

 private:
  int vertex_;
};

/// Non-finite values met while evaluating finite differences.
class GradcheckError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class CropError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. `location` is a human-readable position such as
/// "line 12" or "byte 17".
class ParseError : public Error {
 public:
  ParseError(std::string path, std::string location, const std::string& message)
      : Error(path + ":" + location + ": " + message),
        path_(std::move(path)),
        location_(std::move(location)) {}

  const std::string& path() const { return path_; }
  const std::string& location() const { return location_; }

 private:
  std::string path_;
  std::string location_;
};

/// File system failures (cannot open, cannot write).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace msma
