// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operators. Every op validates operand shapes (throwing
// ContractViolation) and checks its output for NaN/Inf (throwing NumericFault
// with the op name). Results track gradients iff some input does.
#pragma once

#include <vector>

#include "fedalign/numerics/tensor.hpp"

namespace fedalign::numerics {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
// log(max(a, floor)); gradient is zero where the floor is active.
Tensor log_clamped(const Tensor& a, double floor);
Tensor relu(const Tensor& a);
// log(sigmoid(a)), computed stably.
Tensor log_sigmoid(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// x[B,N] + bias[N] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

// 3x3 kernel, stride 1, zero padding 1: x[B,Ci,H,W], w[Co,Ci,3,3], b[Co] -> [B,Co,H,W].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
// [B,C,H,W] -> [B,C], spatial mean.
Tensor global_avg_pool(const Tensor& x);
// [B,C,H,W] -> [B,C], max(population std over H*W, floor).
Tensor channel_std(const Tensor& x, double floor);
// (x - mean[b,c]) / std[b,c] for x[B,C,H,W], mean/std [B,C].
Tensor channel_normalize(const Tensor& x, const Tensor& mean, const Tensor& std);
// x * scale[b,c] + shift[b,c].
Tensor channel_scale_shift(const Tensor& x, const Tensor& scale, const Tensor& shift);

// Row-wise over the last axis of a rank-2 tensor.
Tensor log_softmax(const Tensor& x);
Tensor softmax(const Tensor& x);
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
// [B,N] -> [B]
Tensor sum_rows(const Tensor& x);

// Full reductions to shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Concatenate along axis 0; trailing extents must match.
Tensor concat_batch(const std::vector<Tensor>& parts);
// Rows [begin, end) along axis 0.
Tensor slice_batch(const Tensor& x, std::size_t begin, std::size_t end);

// Elementwise mean of same-shape tensors, each element summed in ascending
// value order so the result does not depend on argument order.
Tensor sorted_mean(const std::vector<Tensor>& parts);

// Identity forward; backward multiplies the incoming gradient by -factor.
Tensor grad_reverse(const Tensor& x, double factor);

}  // namespace fedalign::numerics
