// SPDX-License-Identifier: Apache-2.0
#include "fedalign/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedalign/errors.hpp"

namespace fedalign::numerics {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

Tensor finish(const char* op, Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
              BackwardFn bw) {
  for (double v : value)
    if (!std::isfinite(v)) throw NumericFault(op, "non-finite output");
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(bw);
  }
  return Tensor::from_node(std::move(node));
}

// Gradient buffer of parent i, or nullptr when it does not need one.
double* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

const std::vector<double>& pval(Node& self, std::size_t i) { return self.parents[i]->value; }

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ContractViolation(std::string(op) + ": " + what);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  require(a.rank() == rank, op,
          "expected rank " + std::to_string(rank) + ", got " + shape_string(a.shape()));
}

template <class F, class G>
Tensor unary(const char* op, const Tensor& a, F fwd, G dfdx) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return finish(op, a.shape(), std::move(out), {a.node()}, [dfdx](Node& self) {
    double* ga = pgrad(self, 0);
    if (!ga) return;
    const auto& x = pval(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * dfdx(x[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return finish("add", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = pgrad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return finish("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    if (double* g = pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = pgrad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return finish("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    const auto& x = pval(self, 0);
    const auto& y = pval(self, 1);
    if (double* g = pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    if (double* g = pgrad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary("add_scalar", a, [offset](double x) { return x + offset; },
               [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_clamped(const Tensor& a, double floor) {
  require(floor > 0.0, "log_clamped", "floor must be positive");
  return unary("log_clamped", a, [floor](double x) { return std::log(std::max(x, floor)); },
               [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary(
      "log_sigmoid", a, [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(x)); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape",
          "cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return finish("reshape", std::move(shape), std::move(out), {a.node()}, [](Node& self) {
    if (double* g = pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul",
          "inner extents differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return finish("matmul", {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    const auto& A = pval(self, 0);
    const auto& B = pval(self, 1);
    const auto& G = self.grad;
    if (double* ga = pgrad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
    if (double* gb = pgrad(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
        }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return finish("transpose", {n, m}, std::move(out), {a.node()}, [m, n](Node& self) {
    if (double* g = pgrad(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_row_bias", x, 2);
  require_rank("add_row_bias", bias, 1);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(bias.dim(0) == cols, "add_row_bias", "bias length does not match row width");
  const auto xv = x.values(), bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  return finish("add_row_bias", x.shape(), std::move(out), {x.node(), bias.node()},
                [rows, cols](Node& self) {
                  if (double* g = pgrad(self, 0))
                    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                  if (double* g = pgrad(self, 1))
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
                });
}

namespace {

// col[(i*9 + tap) * H*W + h*W + w] = x[i, h+dh, w+dw], zero outside the image.
void im2col(const double* x, std::size_t Ci, std::size_t H, std::size_t W, double* col) {
  const std::size_t plane = H * W;
  for (std::size_t i = 0; i < Ci; ++i)
    for (std::size_t tap = 0; tap < 9; ++tap) {
      const long dh = static_cast<long>(tap / 3) - 1, dw = static_cast<long>(tap % 3) - 1;
      double* dst = col + (i * 9 + tap) * plane;
      const double* src = x + i * plane;
      for (std::size_t h = 0; h < H; ++h) {
        const long sh = static_cast<long>(h) + dh;
        double* row = dst + h * W;
        if (sh < 0 || sh >= static_cast<long>(H)) {
          std::fill(row, row + W, 0.0);
          continue;
        }
        const double* srow = src + static_cast<std::size_t>(sh) * W;
        for (std::size_t w = 0; w < W; ++w) {
          const long sw = static_cast<long>(w) + dw;
          row[w] = (sw < 0 || sw >= static_cast<long>(W)) ? 0.0 : srow[sw];
        }
      }
    }
}

// Adjoint of im2col: accumulates col back into dx.
void col2im(const double* col, std::size_t Ci, std::size_t H, std::size_t W, double* dx) {
  const std::size_t plane = H * W;
  for (std::size_t i = 0; i < Ci; ++i)
    for (std::size_t tap = 0; tap < 9; ++tap) {
      const long dh = static_cast<long>(tap / 3) - 1, dw = static_cast<long>(tap % 3) - 1;
      const double* src = col + (i * 9 + tap) * plane;
      double* dst = dx + i * plane;
      for (std::size_t h = 0; h < H; ++h) {
        const long sh = static_cast<long>(h) + dh;
        if (sh < 0 || sh >= static_cast<long>(H)) continue;
        const std::size_t w0 = dw < 0 ? 1 : 0, w1 = dw > 0 ? W - 1 : W;
        double* drow = dst + static_cast<std::size_t>(sh) * W;
        const double* srow = src + h * W;
        for (std::size_t w = w0; w < w1; ++w) drow[static_cast<std::size_t>(static_cast<long>(w) + dw)] += srow[w];
      }
    }
}

// Fixed-order dot product with eight partial sums.
double dot(const double* a, const double* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t t = 0;
  for (; t + 8 <= n; t += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[t + j] * b[t + j];
  double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; t < n; ++t) s += a[t] * b[t];
  return s;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  require_rank("conv2d", b, 1);
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0);
  require(w.dim(1) == Ci && w.dim(2) == 3 && w.dim(3) == 3, "conv2d",
          "kernel " + shape_string(w.shape()) + " incompatible with input " + shape_string(x.shape()));
  require(b.dim(0) == Co, "conv2d", "bias length does not match output channels");

  const std::size_t plane = H * W, K = Ci * 9;
  const auto xv = x.values(), wv = w.values(), bv = b.values();
  std::vector<double> out(B * Co * plane);
  std::vector<double> col(K * plane);

  for (std::size_t n = 0; n < B; ++n) {
    im2col(&xv[n * Ci * plane], Ci, H, W, col.data());
    std::size_t o = 0;
    for (; o + 4 <= Co; o += 4) {
      double* o0 = &out[(n * Co + o) * plane];
      double *o1 = o0 + plane, *o2 = o1 + plane, *o3 = o2 + plane;
      std::fill(o0, o0 + plane, bv[o]);
      std::fill(o1, o1 + plane, bv[o + 1]);
      std::fill(o2, o2 + plane, bv[o + 2]);
      std::fill(o3, o3 + plane, bv[o + 3]);
      const double* kp = &wv[o * K];
      for (std::size_t k = 0; k < K; ++k) {
        const double k0 = kp[k], k1 = kp[K + k], k2 = kp[2 * K + k], k3 = kp[3 * K + k];
        const double* src = &col[k * plane];
        for (std::size_t t = 0; t < plane; ++t) {
          const double s = src[t];
          o0[t] += k0 * s;
          o1[t] += k1 * s;
          o2[t] += k2 * s;
          o3[t] += k3 * s;
        }
      }
    }
    for (; o < Co; ++o) {
      double* op = &out[(n * Co + o) * plane];
      std::fill(op, op + plane, bv[o]);
      const double* kp = &wv[o * K];
      for (std::size_t k = 0; k < K; ++k) {
        const double kv = kp[k];
        const double* src = &col[k * plane];
        for (std::size_t t = 0; t < plane; ++t) op[t] += kv * src[t];
      }
    }
  }

  return finish("conv2d", {B, Co, H, W}, std::move(out), {x.node(), w.node(), b.node()},
                [=](Node& self) {
                  const auto& X = pval(self, 0);
                  const auto& Kw = pval(self, 1);
                  const auto& G = self.grad;
                  double* gx = pgrad(self, 0);
                  double* gw = pgrad(self, 1);
                  double* gb = pgrad(self, 2);
                  std::vector<double> colbuf(K * plane), gcol;
                  if (gx) gcol.resize(K * plane);
                  for (std::size_t n = 0; n < B; ++n) {
                    const double* gn = &G[n * Co * plane];
                    if (gb)
                      for (std::size_t o = 0; o < Co; ++o) {
                        double acc = 0.0;
                        for (std::size_t t = 0; t < plane; ++t) acc += gn[o * plane + t];
                        gb[o] += acc;
                      }
                    if (gw) {
                      im2col(&X[n * Ci * plane], Ci, H, W, colbuf.data());
                      for (std::size_t o = 0; o < Co; ++o)
                        for (std::size_t k = 0; k < K; ++k)
                          gw[o * K + k] += dot(gn + o * plane, &colbuf[k * plane], plane);
                    }
                    if (gx) {
                      std::fill(gcol.begin(), gcol.end(), 0.0);
                      std::size_t o = 0;
                      for (; o + 4 <= Co; o += 4) {
                        const double* g0 = gn + o * plane;
                        const double *g1 = g0 + plane, *g2 = g1 + plane, *g3 = g2 + plane;
                        for (std::size_t k = 0; k < K; ++k) {
                          const double k0 = Kw[o * K + k], k1 = Kw[(o + 1) * K + k];
                          const double k2 = Kw[(o + 2) * K + k], k3 = Kw[(o + 3) * K + k];
                          double* dst = &gcol[k * plane];
                          for (std::size_t t = 0; t < plane; ++t)
                            dst[t] += (k0 * g0[t] + k1 * g1[t]) + (k2 * g2[t] + k3 * g3[t]);
                        }
                      }
                      for (; o < Co; ++o) {
                        const double* go = gn + o * plane;
                        for (std::size_t k = 0; k < K; ++k) {
                          const double kv = Kw[o * K + k];
                          double* dst = &gcol[k * plane];
                          for (std::size_t t = 0; t < plane; ++t) dst[t] += kv * go[t];
                        }
                      }
                      col2im(gcol.data(), Ci, H, W, gx + n * Ci * plane);
                    }
                  }
                });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto xv = x.values();
  std::vector<double> out(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double acc = 0.0;
    for (std::size_t t = 0; t < plane; ++t) acc += xv[bc * plane + t];
    out[bc] = acc / static_cast<double>(plane);
  }
  return finish("global_avg_pool", {B, C}, std::move(out), {x.node()}, [plane](Node& self) {
    if (double* g = pgrad(self, 0)) {
      const double inv = 1.0 / static_cast<double>(plane);
      for (std::size_t bc = 0; bc < self.grad.size(); ++bc) {
        const double gv = self.grad[bc] * inv;
        for (std::size_t t = 0; t < plane; ++t) g[bc * plane + t] += gv;
      }
    }
  });
}

Tensor channel_std(const Tensor& x, double floor) {
  require_rank("channel_std", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto xv = x.values();
  std::vector<double> out(B * C);
  std::vector<double> means(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* p = &xv[bc * plane];
    double m = 0.0;
    for (std::size_t t = 0; t < plane; ++t) m += p[t];
    m /= static_cast<double>(plane);
    double v = 0.0;
    for (std::size_t t = 0; t < plane; ++t) v += (p[t] - m) * (p[t] - m);
    v /= static_cast<double>(plane);
    means[bc] = m;
    out[bc] = std::max(std::sqrt(v), floor);
  }
  return finish("channel_std", {B, C}, std::move(out), {x.node()},
                [plane, floor, means = std::move(means)](Node& self) {
                  double* g = pgrad(self, 0);
                  if (!g) return;
                  const auto& X = pval(self, 0);
                  const double n = static_cast<double>(plane);
                  for (std::size_t bc = 0; bc < self.grad.size(); ++bc) {
                    const double s = self.value[bc];
                    if (!(s > floor)) continue;
                    const double coef = self.grad[bc] / (n * s);
                    for (std::size_t t = 0; t < plane; ++t)
                      g[bc * plane + t] += coef * (X[bc * plane + t] - means[bc]);
                  }
                });
}

namespace {

void require_channel_operand(const char* op, const Tensor& x, const Tensor& s) {
  require_rank(op, x, 4);
  require(s.rank() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1), op,
          "per-channel operand " + shape_string(s.shape()) + " does not match " + shape_string(x.shape()));
}

}  // namespace

Tensor channel_normalize(const Tensor& x, const Tensor& mean, const Tensor& std) {
  require_channel_operand("channel_normalize", x, mean);
  require_channel_operand("channel_normalize", x, std);
  const std::size_t BC = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto xv = x.values(), mv = mean.values(), sv = std.values();
  std::vector<double> out(xv.size());
  for (std::size_t bc = 0; bc < BC; ++bc) {
    const double inv = 1.0 / sv[bc];
    for (std::size_t t = 0; t < plane; ++t) out[bc * plane + t] = (xv[bc * plane + t] - mv[bc]) * inv;
  }
  return finish("channel_normalize", x.shape(), std::move(out), {x.node(), mean.node(), std.node()},
                [BC, plane](Node& self) {
                  const auto& S = pval(self, 2);
                  double* gx = pgrad(self, 0);
                  double* gm = pgrad(self, 1);
                  double* gs = pgrad(self, 2);
                  for (std::size_t bc = 0; bc < BC; ++bc) {
                    const double inv = 1.0 / S[bc];
                    double gsum = 0.0, gy = 0.0;
                    for (std::size_t t = 0; t < plane; ++t) {
                      const double gv = self.grad[bc * plane + t];
                      gsum += gv;
                      gy += gv * self.value[bc * plane + t];
                      if (gx) gx[bc * plane + t] += gv * inv;
                    }
                    if (gm) gm[bc] -= gsum * inv;
                    if (gs) gs[bc] -= gy * inv;  // y = (x-m)/s  =>  dy/ds = -y/s
                  }
                });
}

Tensor channel_scale_shift(const Tensor& x, const Tensor& scale_t, const Tensor& shift) {
  require_channel_operand("channel_scale_shift", x, scale_t);
  require_channel_operand("channel_scale_shift", x, shift);
  const std::size_t BC = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto xv = x.values(), av = scale_t.values(), bv = shift.values();
  std::vector<double> out(xv.size());
  for (std::size_t bc = 0; bc < BC; ++bc)
    for (std::size_t t = 0; t < plane; ++t) out[bc * plane + t] = xv[bc * plane + t] * av[bc] + bv[bc];
  return finish("channel_scale_shift", x.shape(), std::move(out),
                {x.node(), scale_t.node(), shift.node()}, [BC, plane](Node& self) {
                  const auto& X = pval(self, 0);
                  const auto& A = pval(self, 1);
                  double* gx = pgrad(self, 0);
                  double* ga = pgrad(self, 1);
                  double* gb = pgrad(self, 2);
                  for (std::size_t bc = 0; bc < BC; ++bc) {
                    double gsum = 0.0, gxs = 0.0;
                    for (std::size_t t = 0; t < plane; ++t) {
                      const double gv = self.grad[bc * plane + t];
                      gsum += gv;
                      gxs += gv * X[bc * plane + t];
                      if (gx) gx[bc * plane + t] += gv * A[bc];
                    }
                    if (ga) ga[bc] += gxs;
                    if (gb) gb[bc] += gsum;
                  }
                });
}

Tensor log_softmax(const Tensor& x) {
  require_rank("log_softmax", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = &xv[r * cols];
    const double m = *std::max_element(p, p + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(p[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = p[c] - lse;
  }
  return finish("log_softmax", x.shape(), std::move(out), {x.node()}, [rows, cols](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gsum += self.grad[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] += self.grad[r * cols + c] - std::exp(self.value[r * cols + c]) * gsum;
    }
  });
}

Tensor softmax(const Tensor& x) {
  require_rank("softmax", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = &xv[r * cols];
    const double m = *std::max_element(p, p + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(p[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = std::exp(p[c] - lse);
  }
  return finish("softmax", x.shape(), std::move(out), {x.node()}, [rows, cols](Node& self) {
    double* g = pgrad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * self.value[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] += self.value[r * cols + c] * (self.grad[r * cols + c] - dot);
    }
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_rank("l2_normalize_rows", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += xv[r * cols + c] * xv[r * cols + c];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] / norms[r];
  }
  return finish("l2_normalize_rows", x.shape(), std::move(out), {x.node()},
                [rows, cols, eps, norms = std::move(norms)](Node& self) {
                  double* g = pgrad(self, 0);
                  if (!g) return;
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double n = norms[r];
                    if (!(n > eps)) {
                      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r * cols + c] / n;
                      continue;
                    }
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c)
                      dot += self.grad[r * cols + c] * self.value[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c)
                      g[r * cols + c] += (self.grad[r * cols + c] - self.value[r * cols + c] * dot) / n;
                  }
                });
}

Tensor sum_rows(const Tensor& x) {
  require_rank("sum_rows", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += xv[r * cols + c];
  return finish("sum_rows", {rows}, std::move(out), {x.node()}, [rows, cols](Node& self) {
    if (double* g = pgrad(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r];
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return finish("sum", {1}, {acc}, {x.node()}, [](Node& self) {
    if (double* g = pgrad(self, 0)) {
      const double gv = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += gv;
    }
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return finish("mean", {1}, {acc / n}, {x.node()}, [n](Node& self) {
    if (double* g = pgrad(self, 0)) {
      const double gv = self.grad[0] / n;
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += gv;
    }
  });
}

Tensor concat_batch(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_batch", "no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<NodePtr> parents;
  std::vector<std::size_t> sizes;
  std::vector<double> out;
  for (const auto& p : parts) {
    require(p.rank() >= 1 && Shape(p.shape().begin() + 1, p.shape().end()) == tail, "concat_batch",
            "trailing extents differ: " + shape_string(p.shape()) + " vs " + shape_string(parts[0].shape()));
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
    sizes.push_back(p.size());
    parents.push_back(p.node());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return finish("concat_batch", std::move(shape), std::move(out), std::move(parents),
                [sizes = std::move(sizes)](Node& self) {
                  std::size_t off = 0;
                  for (std::size_t p = 0; p < sizes.size(); ++p) {
                    if (double* g = pgrad(self, p))
                      for (std::size_t i = 0; i < sizes[p]; ++i) g[i] += self.grad[off + i];
                    off += sizes[p];
                  }
                });
}

Tensor slice_batch(const Tensor& x, std::size_t begin, std::size_t end) {
  require(x.rank() >= 1 && begin < end && end <= x.dim(0), "slice_batch",
          "invalid row range for shape " + shape_string(x.shape()));
  const std::size_t row = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(x.values().begin() + static_cast<long>(begin * row),
                          x.values().begin() + static_cast<long>(end * row));
  const std::size_t off = begin * row;
  return finish("slice_batch", std::move(shape), std::move(out), {x.node()}, [off](Node& self) {
    if (double* g = pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

Tensor sorted_mean(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "sorted_mean", "no inputs");
  for (const auto& p : parts) require_same_shape("sorted_mean", parts[0], p);
  const std::size_t n = parts[0].size(), k = parts.size();
  std::vector<double> out(n);
  std::vector<double> scratch(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) scratch[j] = parts[j].values()[i];
    std::sort(scratch.begin(), scratch.end());
    double acc = 0.0;
    for (double v : scratch) acc += v;
    out[i] = acc / static_cast<double>(k);
  }
  std::vector<NodePtr> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  return finish("sorted_mean", parts[0].shape(), std::move(out), std::move(parents), [k](Node& self) {
    const double inv = 1.0 / static_cast<double>(k);
    for (std::size_t p = 0; p < k; ++p)
      if (double* g = pgrad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * inv;
  });
}

Tensor grad_reverse(const Tensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  return finish("grad_reverse", x.shape(), std::move(out), {x.node()}, [factor](Node& self) {
    if (double* g = pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= factor * self.grad[i];
  });
}

}  // namespace fedalign::numerics
