// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedalign/numerics/tensor.hpp"

namespace fedalign::numerics {

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update of `params` in place using their current
// gradients (a parameter without a gradient counts as zero gradient).
// Moment buffers are allocated on the first call.
void adam_step(std::span<Tensor> params, AdamState& state, double learning_rate);

struct LrSchedule {
  double initial = 1e-3;
  std::uint64_t total_steps = 1;
};

// Cosine decay from `initial` at step 0 to zero at `total_steps`.
double cosine_lr(std::uint64_t step, const LrSchedule& schedule);

}  // namespace fedalign::numerics
