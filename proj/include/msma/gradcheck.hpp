// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "msma/tensor.hpp"

namespace msma {

struct GradcheckOptions {
  double eps = 1e-5;
  std::uint64_t seed = 1;
  /// Entries probed per input tensor; 0 probes every entry. When limited,
  /// entries are sampled without replacement from the seeded generator.
  std::size_t max_entries_per_input = 0;
  /// Inputs (by position) excluded from probing, for example integer-like
  /// operands held constant.
  std::vector<std::size_t> skip_inputs;
};

struct GradcheckReport {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
};

using OpApplication = std::function<OpResult(const std::vector<Tensor4>&)>;

/// Compares the op's backward record against central differences of the
/// scalar probe L = sum(w * output), with w drawn from the seeded generator.
/// The relative error of an entry is |analytic - fd| / max(1, |fd|).
/// Throws GradcheckError on non-finite outputs.
GradcheckReport gradcheck(const OpApplication& op,
                          const std::vector<Tensor4>& inputs,
                          const GradcheckOptions& options = {});

/// Same metric for an arbitrary scalar function of a flat vector. Only the
/// listed indices are probed (all when `indices` is empty).
GradcheckReport check_scalar_gradient(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, std::span<const double> analytic, double eps,
    std::span<const std::size_t> indices = {});

}  // namespace msma
