// SPDX-License-Identifier: Apache-2.0
#include "fedalign/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "fedalign/losses.hpp"
#include "fedalign/mixstyle.hpp"
#include "fedalign/model.hpp"
#include "fedalign/numerics/gradcheck.hpp"
#include "fedalign/numerics/ops.hpp"
#include "fedalign/rng.hpp"

namespace fedalign::verify {

namespace ops = numerics;
using numerics::ScalarFn;
using numerics::Shape;
using numerics::Tensor;

bool SuiteReport::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

double SuiteReport::worst() const {
  double w = 0.0;
  for (const auto& c : checks) w = std::max(w, c.max_rel_error);
  return w;
}

namespace {

Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numerics::numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor::constant(std::move(shape), std::move(v));
}

Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(numerics::numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::constant(std::move(shape), std::move(v));
}

// Values at least `gap` away from zero, for checks through kinks.
Tensor away_from_zero(Shape shape, Rng& rng, double gap) {
  std::vector<double> v(numerics::numel(shape));
  for (auto& x : v) {
    const double m = gap + rng.uniform();
    x = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor::constant(std::move(shape), std::move(v));
}

// Scalar readout with fixed random weights, so every output element gets a
// distinct upstream gradient.
std::function<Tensor(const Tensor&)> readout(const Shape& shape, Rng& rng) {
  const Tensor w = randn(shape, rng);
  return [w](const Tensor& t) { return ops::sum(ops::mul(t, w)); };
}

class Suite {
 public:
  Suite(double delta, double tolerance) : delta_(delta), tolerance_(tolerance) {}

  void check(const std::string& name, const ScalarFn& fn, const Tensor& x) {
    record(name, numerics::grad_check(fn, x, delta_));
  }

  // For graphs containing gradient reversal: the reverse-mode gradient must
  // equal -factor times the finite-difference gradient.
  void check_reversed(const std::string& name, const ScalarFn& fn, const Tensor& x, double factor) {
    std::vector<double> base(x.values().begin(), x.values().end());
    Tensor var = Tensor::parameter(x.shape(), base);
    ops::backward(fn(var));
    Tensor probe = Tensor::constant(x.shape(), base);
    auto values = probe.mutable_values();
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
      values[i] = base[i] + delta_;
      const double up = fn(probe).item();
      values[i] = base[i] - delta_;
      const double down = fn(probe).item();
      values[i] = base[i];
      const double expected = -factor * (up - down) / (2.0 * delta_);
      const double a = var.grad()[i];
      worst = std::max(worst, std::abs(a - expected) / std::max({std::abs(a), std::abs(expected), 1e-8}));
    }
    record(name, worst);
  }

  SuiteReport finish() && {
    report_.tolerance = tolerance_;
    return std::move(report_);
  }

 private:
  void record(const std::string& name, double err) {
    report_.checks.push_back({name, err, err < tolerance_});
  }

  double delta_;
  double tolerance_;
  SuiteReport report_;
};

void op_checks(Suite& s, Rng& rng) {
  const Shape v{3, 4};
  const Tensor a = randn(v, rng), b = randn(v, rng);
  auto r = readout(v, rng);
  s.check("add[a]", [&](const Tensor& x) { return r(ops::add(x, b)); }, a);
  s.check("add[b]", [&](const Tensor& x) { return r(ops::add(a, x)); }, b);
  s.check("sub[a]", [&](const Tensor& x) { return r(ops::sub(x, b)); }, a);
  s.check("sub[b]", [&](const Tensor& x) { return r(ops::sub(a, x)); }, b);
  s.check("mul[a]", [&](const Tensor& x) { return r(ops::mul(x, b)); }, a);
  s.check("mul[b]", [&](const Tensor& x) { return r(ops::mul(a, x)); }, b);
  s.check("scale", [&](const Tensor& x) { return r(ops::scale(x, -1.7)); }, a);
  s.check("add_scalar", [&](const Tensor& x) { return r(ops::add_scalar(x, 0.3)); }, a);
  s.check("neg", [&](const Tensor& x) { return r(ops::neg(x)); }, a);
  s.check("square", [&](const Tensor& x) { return r(ops::square(x)); }, a);
  s.check("exp", [&](const Tensor& x) { return r(ops::exp(x)); }, a);
  s.check("log_clamped", [&](const Tensor& x) { return r(ops::log_clamped(x, 1e-12)); }, uniform(v, rng, 0.2, 2.0));
  s.check("relu", [&](const Tensor& x) { return r(ops::relu(x)); }, away_from_zero(v, rng, 0.05));
  s.check("log_sigmoid", [&](const Tensor& x) { return r(ops::log_sigmoid(x)); }, randn(v, rng, 3.0));
  s.check("sigmoid", [&](const Tensor& x) { return r(ops::sigmoid(x)); }, randn(v, rng, 3.0));
  {
    auto r2 = readout({4, 3}, rng);
    s.check("reshape", [&](const Tensor& x) { return r2(ops::reshape(x, {4, 3})); }, a);
    s.check("transpose", [&](const Tensor& x) { return r2(ops::transpose(x)); }, a);
  }
  {
    const Tensor m = randn({4, 5}, rng);
    auto r2 = readout({3, 5}, rng);
    s.check("matmul[a]", [&](const Tensor& x) { return r2(ops::matmul(x, m)); }, a);
    s.check("matmul[b]", [&](const Tensor& x) { return r2(ops::matmul(a, x)); }, m);
  }
  {
    const Tensor bias = randn({4}, rng);
    s.check("add_row_bias[x]", [&](const Tensor& x) { return r(ops::add_row_bias(x, bias)); }, a);
    s.check("add_row_bias[bias]", [&](const Tensor& x) { return r(ops::add_row_bias(a, x)); }, bias);
  }
  {
    const Tensor x = randn({2, 3, 16, 16}, rng);
    const Tensor w = randn({4, 3, 3, 3}, rng, 0.3);
    const Tensor bias = randn({4}, rng);
    auto r4 = readout({2, 4, 16, 16}, rng);
    s.check("conv2d[x]", [&](const Tensor& t) { return r4(ops::conv2d(t, w, bias)); }, x);
    s.check("conv2d[w]", [&](const Tensor& t) { return r4(ops::conv2d(x, t, bias)); }, w);
    s.check("conv2d[b]", [&](const Tensor& t) { return r4(ops::conv2d(x, w, t)); }, bias);
  }
  {
    const Tensor x = randn({2, 3, 5, 5}, rng);
    auto rc = readout({2, 3}, rng);
    auto rx = readout({2, 3, 5, 5}, rng);
    const Tensor mu = randn({2, 3}, rng), sd = uniform({2, 3}, rng, 0.5, 2.0);
    s.check("global_avg_pool", [&](const Tensor& t) { return rc(ops::global_avg_pool(t)); }, x);
    s.check("channel_std", [&](const Tensor& t) { return rc(ops::channel_std(t, 1e-6)); }, x);
    s.check("channel_normalize[x]", [&](const Tensor& t) { return rx(ops::channel_normalize(t, mu, sd)); }, x);
    s.check("channel_normalize[mean]", [&](const Tensor& t) { return rx(ops::channel_normalize(x, t, sd)); }, mu);
    s.check("channel_normalize[std]", [&](const Tensor& t) { return rx(ops::channel_normalize(x, mu, t)); }, sd);
    s.check("channel_scale_shift[x]", [&](const Tensor& t) { return rx(ops::channel_scale_shift(t, sd, mu)); }, x);
    s.check("channel_scale_shift[scale]", [&](const Tensor& t) { return rx(ops::channel_scale_shift(x, t, mu)); },
            sd);
    s.check("channel_scale_shift[shift]", [&](const Tensor& t) { return rx(ops::channel_scale_shift(x, sd, t)); },
            mu);
  }
  s.check("log_softmax", [&](const Tensor& x) { return r(ops::log_softmax(x)); }, a);
  s.check("softmax", [&](const Tensor& x) { return r(ops::softmax(x)); }, a);
  s.check("l2_normalize_rows", [&](const Tensor& x) { return r(ops::l2_normalize_rows(x)); }, a);
  {
    auto rr = readout({3}, rng);
    s.check("sum_rows", [&](const Tensor& x) { return rr(ops::sum_rows(x)); }, a);
  }
  s.check("sum", [&](const Tensor& x) { return ops::square(ops::sum(x)); }, a);
  s.check("mean", [&](const Tensor& x) { return ops::square(ops::mean(x)); }, a);
  {
    auto r6 = readout({6, 4}, rng);
    s.check("concat_batch", [&](const Tensor& x) { return r6(ops::concat_batch({x, b})); }, a);
    auto r1 = readout({2, 4}, rng);
    s.check("slice_batch", [&](const Tensor& x) { return r1(ops::slice_batch(x, 1, 3)); }, a);
    const Tensor c = randn(v, rng);
    s.check("sorted_mean", [&](const Tensor& x) { return r(ops::sorted_mean({b, x, c})); }, a);
  }
  s.check_reversed("grad_reverse", [&](const Tensor& x) { return r(ops::grad_reverse(x, 0.7)); }, a, 0.7);
}

mixstyle::StyleStats random_stats(std::size_t channels, std::uint16_t layer, Rng& rng) {
  mixstyle::StyleStats st;
  st.layer = layer;
  for (std::size_t c = 0; c < channels; ++c) {
    st.mean.push_back(rng.normal(0.0, 1.0));
    st.std.push_back(0.3 + rng.uniform());
  }
  return st;
}

mixstyle::MixPlan bank_plan(std::size_t batch, std::size_t channels, std::uint16_t layer, bool swap, Rng& rng) {
  mixstyle::MixPlan plan;
  plan.swap_affine_roles = swap;
  for (std::size_t i = 0; i < batch; ++i) {
    plan.partners.emplace_back(random_stats(channels, layer, rng));
    plan.lambdas.push_back(0.2 + 0.6 * rng.uniform());
  }
  return plan;
}

void mixstyle_checks(Suite& s, Rng& rng) {
  const Tensor x = randn({3, 4, 6, 6}, rng);
  auto r = readout({3, 4, 6, 6}, rng);
  for (bool swap : {false, true}) {
    const auto plan = bank_plan(3, 4, 1, swap, rng);
    s.check(swap ? "mixstyle.apply_plan[swapped]" : "mixstyle.apply_plan",
            [&](const Tensor& t) { return r(mixstyle::apply_plan(t, plan)); }, x);
  }
  const Tensor one = randn({4, 6, 6}, rng);
  auto r1 = readout({4, 6, 6}, rng);
  const auto own = mixstyle::channel_stats(ops::reshape(one, {1, 4, 6, 6})).front();
  const auto mixed = mixstyle::mix_statistics(own, random_stats(4, 1, rng), 0.4);
  s.check("mixstyle.apply_mixstyle", [&](const Tensor& t) { return r1(mixstyle::apply_mixstyle(t, own, mixed)); },
          one);
}

void loss_checks(Suite& s, Rng& rng) {
  const std::size_t B = 4, N = 5, D = 6;
  const std::vector<std::size_t> labels{0, 1, 0, 1};
  const Tensor logits = randn({B, N}, rng);
  s.check("cross_entropy", [&](const Tensor& t) { return losses::cross_entropy(ops::softmax(t), labels); }, logits);

  const Tensor z = randn({B, D}, rng), z1 = randn({B, D}, rng), z2 = randn({B, D}, rng);
  s.check("supervised_contrastive[view]",
          [&](const Tensor& t) { return losses::supervised_contrastive(t, z, labels, 0.1); }, z1);
  s.check("supervised_contrastive[reference]",
          [&](const Tensor& t) { return losses::supervised_contrastive(z1, t, labels, 0.1); }, z);
  s.check("symmetric_contrastive[z]",
          [&](const Tensor& t) { return losses::symmetric_contrastive(t, z1, z2, labels, 0.1); }, z);
  s.check("symmetric_contrastive[z1]",
          [&](const Tensor& t) { return losses::symmetric_contrastive(z, t, z2, labels, 0.1); }, z1);
  s.check("representation_consistency[z]",
          [&](const Tensor& t) { return losses::representation_consistency(t, {z1, z2}); }, z);
  s.check("representation_consistency[view]",
          [&](const Tensor& t) { return losses::representation_consistency(z, {t, z2}); }, z1);

  const Tensor l1 = randn({B, N}, rng), l2 = randn({B, N}, rng);
  auto rb = readout({B}, rng);
  s.check("kl_rows[p]", [&](const Tensor& t) { return rb(losses::kl_rows(ops::softmax(t), ops::softmax(l1))); },
          logits);
  s.check("kl_rows[q]", [&](const Tensor& t) { return rb(losses::kl_rows(ops::softmax(logits), ops::softmax(t))); },
          l1);
  for (int arg = 0; arg < 3; ++arg) {
    s.check("js_alignment[" + std::to_string(arg) + "]",
            [&, arg](const Tensor& t) {
              Tensor y = ops::softmax(logits), y1 = ops::softmax(l1), y2 = ops::softmax(l2);
              (arg == 0 ? y : arg == 1 ? y1 : y2) = ops::softmax(t);
              return losses::js_alignment(y, y1, y2);
            },
            arg == 0 ? logits : arg == 1 ? l1 : l2);
  }

  const Tensor parts = randn({4}, rng);
  s.check("total_loss",
          [&](const Tensor& t) {
            const Tensor sq = ops::square(t);
            auto pick = [&](std::size_t i) { return ops::slice_batch(sq, i, i + 1); };
            return losses::total_loss(pick(0), pick(1), pick(2), pick(3), 0.5, 0.1).value;
          },
          parts);

  auto disc = losses::Discriminator::init(D, 8, rng.engine()());
  s.check("adversarial_loss[disc.w1]",
          [&](const Tensor& t) {
            auto d = disc;
            d.w1 = t;
            return losses::adversarial_loss(z, {z1, z2}, d, 0.3).weighted;
          },
          disc.w1);
  s.check("adversarial_loss[disc.b2]",
          [&](const Tensor& t) {
            auto d = disc;
            d.b2 = t;
            return losses::adversarial_loss(z, {z1, z2}, d, 0.3).weighted;
          },
          disc.b2);
  s.check_reversed("adversarial_loss[z, reversed]",
                   [&](const Tensor& t) { return losses::adversarial_loss(t, {z1, z2}, disc, 0.3).weighted; }, z,
                   1.0);
}

const char* const kSlotNames[] = {"conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b", "classifier.w",
                                  "classifier.b"};

// Central differences are only meaningful away from relu kinks. Keeps the
// random weights and inputs but moves each conv bias (within +-0.25) to the
// centre of the widest gap between that channel's pre-activations, so no
// pre-activation in any view sits near zero.
double clear_kinks(model::ModelParams& params, const Tensor& x,
                   const std::vector<const model::MixDirective*>& views) {
  double narrowest = 1e300;
  const auto place = [&](std::vector<double>& bias, const std::vector<Tensor>& preacts) {
    for (std::size_t c = 0; c < bias.size(); ++c) {
      std::vector<double> cuts{-0.25, 0.25};
      for (const auto& p : preacts) {
        const std::size_t B = p.dim(0), C = p.dim(1), HW = p.dim(2) * p.dim(3);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < HW; ++i) {
            const double v = -p.values()[(b * C + c) * HW + i];
            if (v > -0.25 && v < 0.25) cuts.push_back(v);
          }
      }
      std::sort(cuts.begin(), cuts.end());
      std::size_t best = 0;
      for (std::size_t i = 1; i + 1 < cuts.size(); ++i)
        if (cuts[i + 1] - cuts[i] > cuts[best + 1] - cuts[best]) best = i;
      bias[c] = 0.5 * (cuts[best] + cuts[best + 1]);
      narrowest = std::min(narrowest, 0.5 * (cuts[best + 1] - cuts[best]));
    }
  };
  auto& b1 = params.entries[1].values;
  auto& b2 = params.entries[3].values;
  std::fill(b1.begin(), b1.end(), 0.0);
  std::fill(b2.begin(), b2.end(), 0.0);
  {
    const auto bp = model::BoundParams::bind(params, false);
    place(b1, {ops::conv2d(x, bp[0], bp[1])});
  }
  const auto bp = model::BoundParams::bind(params, false);
  const Tensor h1 = ops::relu(ops::conv2d(x, bp[0], bp[1]));
  std::vector<Tensor> pre2{ops::conv2d(h1, bp[2], bp[3])};
  for (const auto* v : views)
    if (v && v->point == 1) pre2.push_back(ops::conv2d(mixstyle::apply_plan(h1, v->plan), bp[2], bp[3]));
  place(b2, pre2);
  return narrowest;
}

void model_checks(Suite& s, Rng& rng) {
  model::Architecture arch;
  auto params = model::init_params(arch, rng.engine()());
  const std::size_t B = 4;
  const Tensor x = randn({B, arch.in_channels, arch.height, arch.width}, rng);
  const std::vector<std::size_t> labels{0, 3, 1, 3};
  clear_kinks(params, x, {});

  const Tensor z = randn({B, arch.d_z}, rng);
  auto bound = model::BoundParams::bind(params, false);
  auto rz = readout({B, arch.num_classes}, rng);
  s.check("model.classify[z]", [&](const Tensor& t) { return rz(model::classify(arch, bound, t)); }, z);

  for (std::size_t slot = 0; slot < 8; ++slot) {
    s.check(std::string("model.cross_entropy[") + kSlotNames[slot] + "]",
            [&, slot](const Tensor& t) {
              auto bp = model::BoundParams::bind(params, false);
              bp.set(slot, t);
              return losses::cross_entropy(model::forward_full(arch, bp, x).probs, labels);
            },
            bound[slot]);
  }
}

// The local objective on a 4-sample batch with one view mixed after each
// encoder layer. Partners come from a bank so that the objective is a
// deterministic function of the parameters.
void objective_checks(Suite& s, Rng& rng) {
  model::Architecture arch;
  auto params = model::init_params(arch, rng.engine()());
  const std::size_t B = 4;
  const Tensor x = randn({B, arch.in_channels, arch.height, arch.width}, rng);
  const std::vector<std::size_t> labels{2, 0, 2, 0};
  const model::MixDirective view1{1, bank_plan(B, arch.conv1_channels, 1, false, rng)};
  const model::MixDirective view2{2, bank_plan(B, arch.conv2_channels, 2, false, rng)};
  clear_kinks(params, x, {&view1, &view2});
  const double lambda1 = 1.0, lambda2 = 1.0, tau = 0.1;

  const auto objective = [&](const model::BoundParams& bp) {
    const Tensor z = model::encode(arch, bp, x);
    const Tensor za = model::encode(arch, bp, x, &view1);
    const Tensor zb = model::encode(arch, bp, x, &view2);
    const Tensor y = model::classify(arch, bp, z);
    const Tensor ya = model::classify(arch, bp, za);
    const Tensor yb = model::classify(arch, bp, zb);
    return losses::total_loss(losses::cross_entropy(y, labels), losses::symmetric_contrastive(z, za, zb, labels, tau),
                              losses::representation_consistency(z, {za, zb}), losses::js_alignment(y, ya, yb),
                              lambda1, lambda2)
        .value;
  };

  const auto bound = model::BoundParams::bind(params, false);
  for (std::size_t slot = 0; slot < 8; ++slot) {
    s.check(std::string("objective[") + kSlotNames[slot] + "]",
            [&, slot](const Tensor& t) {
              auto bp = model::BoundParams::bind(params, false);
              bp.set(slot, t);
              return objective(bp);
            },
            bound[slot]);
  }
}

}  // namespace

SuiteReport run_gradient_suite(std::uint64_t seed, double delta, double tolerance) {
  const auto start = std::chrono::steady_clock::now();
  Suite s(delta, tolerance);
  Rng rng(seed);
  op_checks(s, rng);
  mixstyle_checks(s, rng);
  loss_checks(s, rng);
  model_checks(s, rng);
  objective_checks(s, rng);
  auto report = std::move(s).finish();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace fedalign::verify
