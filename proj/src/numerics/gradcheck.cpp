// SPDX-License-Identifier: Apache-2.0
#include "fedalign/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "fedalign/errors.hpp"

namespace fedalign::numerics {

double grad_check(const ScalarFn& fn, const Tensor& x, double delta) {
  if (!(delta > 0.0)) throw ContractViolation("grad_check: delta must be positive");
  std::vector<double> base(x.values().begin(), x.values().end());

  Tensor var = Tensor::parameter(x.shape(), base);
  backward(fn(var));
  const std::vector<double> analytic(var.grad().begin(), var.grad().end());

  Tensor probe = Tensor::constant(x.shape(), base);
  auto values = probe.mutable_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    values[i] = base[i] + delta;
    const double up = fn(probe).item();
    values[i] = base[i] - delta;
    const double down = fn(probe).item();
    values[i] = base[i];
    const double fd = (up - down) / (2.0 * delta);
    const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
  }
  return worst;
}

}  // namespace fedalign::numerics
