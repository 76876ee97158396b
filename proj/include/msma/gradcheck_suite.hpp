// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite-difference checks of every differentiable operation,
// grouped by module. Rasterised quantities are probed only where the
// perturbation leaves every pixel's triangle assignment and clamp state
// unchanged ("coverage-stable"); probes that cannot be made stable are
// counted as skipped.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace msma {

inline constexpr double kGradcheckTolerance = 1e-5;

struct GradcheckCase {
  std::string module;
  std::string name;
  double max_relative_error = 0.0;
  std::size_t entries = 0;
  std::size_t skipped = 0;
  bool passed() const { return entries > 0 && max_relative_error <= kGradcheckTolerance; }
};

struct GradcheckSuiteResult {
  std::vector<GradcheckCase> cases;
  double seconds = 0.0;

  bool passed() const;
  double max_relative_error() const;
};

/// Module names accepted by run_gradcheck_suite besides "all".
const std::vector<std::string>& gradcheck_modules();

/// Throws ParameterError for an unknown module name.
GradcheckSuiteResult run_gradcheck_suite(const std::string& module = "all",
                                         std::uint64_t seed = 1);

/// One row per case plus a summary line.
std::string format_gradcheck_table(const GradcheckSuiteResult& result);

}  // namespace msma
