// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of every differentiable op, every loss and
// the full local training objective.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fedalign::verify {

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct SuiteReport {
  std::vector<CheckResult> checks;
  double tolerance = 0.0;
  double seconds = 0.0;

  bool passed() const;
  double worst() const;
};

inline constexpr double kGradDelta = 1e-5;
inline constexpr double kGradTolerance = 1e-4;

// Random inputs are drawn from `seed`; batches hold at most 4 samples of 16x16.
SuiteReport run_gradient_suite(std::uint64_t seed, double delta = kGradDelta, double tolerance = kGradTolerance);

}  // namespace fedalign::verify
