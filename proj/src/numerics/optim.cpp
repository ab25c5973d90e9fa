// SPDX-License-Identifier: Apache-2.0
#include "fedalign/numerics/optim.hpp"

#include <cmath>
#include <string>

#include "fedalign/errors.hpp"

namespace fedalign::numerics {

void adam_step(std::span<Tensor> params, AdamState& state, double learning_rate) {
  if (state.first_moment.empty() && state.step_count == 0) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw ContractViolation("adam_step: optimizer state holds " + std::to_string(state.first_moment.size()) +
                            " moment buffers for " + std::to_string(params.size()) + " parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.first_moment[k].size() != params[k].size())
      throw ContractViolation("adam_step: moment buffer " + std::to_string(k) + " is not congruent");
    if (params[k].has_grad())
      for (double g : params[k].grad())
        if (!std::isfinite(g)) throw NumericFault("adam_step", "non-finite gradient");
  }

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    const bool has = params[k].has_grad();
    const auto g = params[k].grad();
    auto w = params[k].mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

double cosine_lr(std::uint64_t step, const LrSchedule& schedule) {
  if (schedule.total_steps == 0) throw ContractViolation("cosine_lr: total_steps must be positive");
  if (step > schedule.total_steps)
    throw ContractViolation("cosine_lr: step " + std::to_string(step) + " beyond total_steps " +
                            std::to_string(schedule.total_steps));
  if (step == schedule.total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.initial * 0.5 * (1.0 + std::cos(M_PI * frac));
}

}  // namespace fedalign::numerics
