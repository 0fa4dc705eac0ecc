#pragma once

// Central finite-difference check of the full forecast loss against the
// reverse-mode gradients, in 64-bit.

#include <cstdint>
#include <string>
#include <vector>

#include "psformer/model.hpp"

namespace psformer {

struct GradCheckOptions {
  double step = 1e-5;        // central difference h
  double tolerance = 1e-4;   // max relative error to pass
  std::size_t batch = 2;
  std::uint64_t seed = 7;
};

struct GradCheckGroup {
  std::string name;  // e.g. "block0.w1"
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckResult {
  std::vector<GradCheckGroup> groups;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Relative error |a − n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

/// The tiny configuration used by default: M=2, L=8, N=4, F=2, 1 encoder.
ModelConfig grad_check_config();

/// Random parameters (biases included), random input and target; compares
/// every parameter's analytic gradient of the MSE loss with finite differences.
GradCheckResult grad_check(const ModelConfig& cfg, const GradCheckOptions& opts = {});

}  // namespace psformer
