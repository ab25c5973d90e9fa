// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "fedalign/numerics/tensor.hpp"

namespace fedalign::numerics {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Compares the reverse-mode gradient of `fn` at `x` against central finite
// differences with step `delta`. Returns the largest per-component
// |analytic - fd| / max(|analytic|, |fd|, 1e-8).
double grad_check(const ScalarFn& fn, const Tensor& x, double delta = 1e-5);

}  // namespace fedalign::numerics
