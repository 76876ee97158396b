// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "msma/error.hpp"
#include "msma/rng.hpp"

namespace msma {

namespace {

double probe(const Tensor4& output, const Tensor4& weights) {
  double acc = 0.0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    if (!std::isfinite(output[i])) {
      throw GradcheckError("non-finite op output at flat index " +
                           std::to_string(i));
    }
    acc += weights[i] * output[i];
  }
  return acc;
}

std::vector<std::size_t> sample_indices(std::size_t count, std::size_t limit,
                                        Rng& rng) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  if (limit == 0 || limit >= count) return idx;
  for (std::size_t i = 0; i < limit; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.next() % (count - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double relative_error(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
}

}  // namespace

GradcheckReport gradcheck(const OpApplication& op,
                          const std::vector<Tensor4>& inputs,
                          const GradcheckOptions& options) {
  if (!(options.eps > 0.0)) throw ParameterError("gradcheck: eps must be > 0");
  Rng rng(options.seed);
  OpResult base = op(inputs);
  Tensor4 weights = base.output.zeros_like();
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = rng.uniform(-1.0, 1.0);
  probe(base.output, weights);
  const std::vector<Tensor4> analytic = base.record.apply(weights);
  if (analytic.size() != inputs.size()) {
    throw StateError("gradcheck: record returned " +
                     std::to_string(analytic.size()) + " gradients for " +
                     std::to_string(inputs.size()) + " inputs");
  }

  GradcheckReport report;
  std::vector<Tensor4> work = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (std::find(options.skip_inputs.begin(), options.skip_inputs.end(), t) !=
        options.skip_inputs.end()) {
      continue;
    }
    for (std::size_t i :
         sample_indices(inputs[t].size(), options.max_entries_per_input, rng)) {
      const double x0 = inputs[t][i];
      work[t][i] = x0 + options.eps;
      const double plus = probe(op(work).output, weights);
      work[t][i] = x0 - options.eps;
      const double minus = probe(op(work).output, weights);
      work[t][i] = x0;
      const double fd = (plus - minus) / (2.0 * options.eps);
      if (!std::isfinite(analytic[t][i])) {
        throw GradcheckError("non-finite analytic gradient for input " +
                             std::to_string(t) + " entry " + std::to_string(i));
      }
      report.max_relative_error =
          std::max(report.max_relative_error, relative_error(analytic[t][i], fd));
      ++report.entries_checked;
    }
  }
  return report;
}

GradcheckReport check_scalar_gradient(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, std::span<const double> analytic, double eps,
    std::span<const std::size_t> indices) {
  if (!(eps > 0.0)) throw ParameterError("gradcheck: eps must be > 0");
  if (analytic.size() != x.size()) {
    throw ShapeError("check_scalar_gradient: gradient length mismatch");
  }
  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(x.size());
    std::iota(all.begin(), all.end(), 0);
    indices = all;
  }
  std::vector<double> work(x.begin(), x.end());
  GradcheckReport report;
  for (std::size_t i : indices) {
    const double x0 = x[i];
    work[i] = x0 + eps;
    const double plus = f(work);
    work[i] = x0 - eps;
    const double minus = f(work);
    work[i] = x0;
    if (!std::isfinite(plus) || !std::isfinite(minus) ||
        !std::isfinite(analytic[i])) {
      throw GradcheckError("non-finite value while probing entry " +
                           std::to_string(i));
    }
    const double fd = (plus - minus) / (2.0 * eps);
    report.max_relative_error =
        std::max(report.max_relative_error, relative_error(analytic[i], fd));
    ++report.entries_checked;
  }
  return report;
}

}  // namespace msma
