// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

// Built-in sanity checks: small closed-form cases for every module that run
// in well under a second and need no files.

#pragma once

#include <string>
#include <vector>

namespace msma {

struct SelftestCase {
  std::string module;
  std::string name;
  bool passed = false;
  std::string detail;  // failure description, empty on success
};

struct SelftestResult {
  std::vector<SelftestCase> cases;
  bool passed() const;
};

SelftestResult run_selftest();

/// One "PASS|FAIL module/name" line per case plus a summary line.
std::string format_selftest_report(const SelftestResult& result);

}  // namespace msma
