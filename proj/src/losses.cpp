// SPDX-License-Identifier: Apache-2.0
#include "fedalign/losses.hpp"

#include <cmath>
#include <string>

#include "fedalign/errors.hpp"
#include "fedalign/numerics/ops.hpp"

namespace fedalign::losses {

namespace ops = numerics;

namespace {

void check_labels(const char* op, const Tensor& rows, std::span<const std::size_t> labels, std::size_t classes) {
  if (rows.rank() != 2 || rows.dim(0) != labels.size())
    throw ContractViolation(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                            numerics::shape_string(rows.shape()));
  for (std::size_t y : labels)
    if (y >= classes)
      throw ContractViolation(std::string(op) + ": label " + std::to_string(y) + " out of range for " +
                              std::to_string(classes) + " classes");
}

void check_distribution_rows(const char* op, const Tensor& p) {
  if (p.rank() != 2) throw ContractViolation(std::string(op) + ": expected [B,N] probabilities");
  const std::size_t rows = p.dim(0), cols = p.dim(1);
  const auto v = p.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += v[r * cols + c];
    if (std::abs(s - 1.0) > 1e-8)
      throw ContractViolation(std::string(op) + ": row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}

Tensor zero_loss() { return Tensor::scalar(0.0); }

}  // namespace

Tensor cross_entropy(const Tensor& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2) throw ContractViolation("cross_entropy: expected [B,N] probabilities");
  check_labels("cross_entropy", probs, labels, probs.dim(1));
  const std::size_t B = probs.dim(0), N = probs.dim(1);
  std::vector<double> pick(B * N, 0.0);
  for (std::size_t i = 0; i < B; ++i) pick[i * N + labels[i]] = -1.0 / static_cast<double>(B);
  return ops::sum(ops::mul(ops::log_clamped(probs, kProbabilityFloor), Tensor::constant({B, N}, std::move(pick))));
}

Tensor supervised_contrastive(const Tensor& view, const Tensor& reference, std::span<const std::size_t> labels,
                              double tau) {
  if (!(tau > 0.0)) throw ContractViolation("supervised_contrastive: tau must be positive");
  if (view.shape() != reference.shape() || view.rank() != 2)
    throw ContractViolation("supervised_contrastive: views must share a [B,d] shape");
  const std::size_t B = view.dim(0);
  if (labels.size() != B) throw ContractViolation("supervised_contrastive: label count does not match batch");

  std::vector<double> weight(B * B, 0.0);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < B; ++i) {
    std::size_t positives = 0;
    for (std::size_t p = 0; p < B; ++p) positives += (p != i && labels[p] == labels[i]) ? 1 : 0;
    if (positives == 0) continue;
    ++anchors;
    for (std::size_t p = 0; p < B; ++p)
      if (p != i && labels[p] == labels[i]) weight[i * B + p] = 1.0 / static_cast<double>(positives);
  }
  if (anchors == 0) return zero_loss();
  for (auto& w : weight) w /= -static_cast<double>(anchors);

  const Tensor a = ops::l2_normalize_rows(view);
  const Tensor r = ops::l2_normalize_rows(reference);
  const Tensor sim = ops::scale(ops::matmul(a, ops::transpose(r)), 1.0 / tau);
  return ops::sum(ops::mul(ops::log_softmax(sim), Tensor::constant({B, B}, std::move(weight))));
}

Tensor symmetric_contrastive(const Tensor& z, const Tensor& z1, const Tensor& z2, std::span<const std::size_t> labels,
                             double tau) {
  return ops::scale(ops::add(supervised_contrastive(z1, z, labels, tau), supervised_contrastive(z2, z, labels, tau)),
                    0.5);
}

Tensor representation_consistency(const Tensor& z, const std::vector<Tensor>& views) {
  if (views.empty()) throw ContractViolation("representation_consistency: no augmented views");
  Tensor acc;
  for (const auto& v : views) {
    if (v.shape() != z.shape()) throw ContractViolation("representation_consistency: view shape differs");
    Tensor term = ops::mean(ops::square(ops::sub(z, v)));
    acc = acc.defined() ? ops::add(acc, term) : term;
  }
  return ops::scale(acc, 1.0 / static_cast<double>(views.size()));
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ContractViolation("kl_divergence: length mismatch");
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-8 || std::abs(sq - 1.0) > 1e-8)
    throw ContractViolation("kl_divergence: inputs must sum to 1");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    kl += p[i] * (std::log(std::max(p[i], kProbabilityFloor)) - std::log(std::max(q[i], kProbabilityFloor)));
  return kl;
}

Tensor kl_rows(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) throw ContractViolation("kl_rows: shape mismatch");
  check_distribution_rows("kl_rows", p);
  check_distribution_rows("kl_rows", q);
  const Tensor log_ratio =
      ops::sub(ops::log_clamped(p, kProbabilityFloor), ops::log_clamped(q, kProbabilityFloor));
  return ops::sum_rows(ops::mul(p, log_ratio));
}

Tensor js_alignment(const Tensor& y, const Tensor& y1, const Tensor& y2) {
  if (y.shape() != y1.shape() || y.shape() != y2.shape() || y.rank() != 2)
    throw ContractViolation("js_alignment: predictions must share a [B,N] shape");
  const Tensor m = ops::sorted_mean({y, y1, y2});
  const Tensor per_row = ops::sorted_mean({kl_rows(y, m), kl_rows(y1, m), kl_rows(y2, m)});
  return ops::mean(per_row);
}

TotalLoss total_loss(const Tensor& l_cls, const Tensor& l_sc, const Tensor& l_rc, const Tensor& l_js, double lambda1,
                     double lambda2, const std::optional<AdversarialTerm>& adversarial) {
  const std::pair<const char*, const Tensor*> parts[] = {
      {"l_cls", &l_cls}, {"l_sc", &l_sc}, {"l_rc", &l_rc}, {"l_js", &l_js}};
  for (const auto& [name, t] : parts) {
    if (t->size() != 1) throw ContractViolation(std::string("total_loss: ") + name + " is not a scalar");
    if (!std::isfinite(t->item())) throw NumericFault(name, "non-finite loss component");
  }
  if (adversarial && !std::isfinite(adversarial->l_adv)) throw NumericFault("l_adv", "non-finite loss component");

  const Tensor ra = ops::add(l_sc, l_rc);
  Tensor total = ops::add(ops::add(l_cls, ops::scale(ra, lambda1)), ops::scale(l_js, lambda2));
  if (adversarial) total = ops::add(total, adversarial->weighted);

  TotalLoss out;
  out.breakdown.l_cls = l_cls.item();
  out.breakdown.l_sc = l_sc.item();
  out.breakdown.l_rc = l_rc.item();
  out.breakdown.l_ra = ra.item();
  out.breakdown.l_js = l_js.item();
  out.breakdown.lambda1 = lambda1;
  out.breakdown.lambda2 = lambda2;
  if (adversarial) {
    out.breakdown.l_adv = adversarial->l_adv;
    out.breakdown.lambda_adv = adversarial->lambda_adv;
  }
  out.breakdown.l_total = total.item();
  out.value = std::move(total);
  return out;
}

Discriminator Discriminator::init(std::size_t d_z, std::size_t hidden, std::uint64_t seed) {
  Rng rng(seed);
  auto kaiming = [&](std::size_t fan_in, std::size_t n) {
    std::vector<double> v(n);
    const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& x : v) x = rng.normal(0.0, s);
    return v;
  };
  Discriminator d;
  d.w1 = Tensor::parameter({d_z, hidden}, kaiming(d_z, d_z * hidden));
  d.b1 = Tensor::parameter({hidden}, std::vector<double>(hidden, 0.0));
  d.w2 = Tensor::parameter({hidden, 1}, kaiming(hidden, hidden));
  d.b2 = Tensor::parameter({1}, {0.0});
  return d;
}

Tensor Discriminator::logits(const Tensor& z) const {
  const Tensor h = ops::relu(ops::add_row_bias(ops::matmul(z, w1), b1));
  return ops::add_row_bias(ops::matmul(h, w2), b2);
}

Tensor Discriminator::predict(const Tensor& z) const { return ops::sigmoid(logits(z)); }

AdversarialTerm adversarial_loss(const Tensor& z, const std::vector<Tensor>& views, const Discriminator& disc,
                                 double lambda_adv) {
  if (views.empty()) throw ContractViolation("adversarial_loss: no augmented views");
  std::vector<Tensor> rows{ops::grad_reverse(z, 1.0)};
  for (const auto& v : views) {
    if (v.shape() != z.shape()) throw ContractViolation("adversarial_loss: view shape differs");
    rows.push_back(ops::grad_reverse(v, 1.0));
  }
  const Tensor logit = disc.logits(ops::concat_batch(rows));
  const std::size_t n = logit.dim(0), originals = z.dim(0);
  std::vector<double> is_aug(n, 1.0), is_orig(n, 0.0);
  for (std::size_t i = 0; i < originals; ++i) {
    is_aug[i] = 0.0;
    is_orig[i] = 1.0;
  }
  const Tensor log_p_aug = ops::log_sigmoid(logit);
  const Tensor log_p_orig = ops::log_sigmoid(ops::neg(logit));
  const Tensor ll = ops::add(ops::mul(log_p_aug, Tensor::constant({n, 1}, std::move(is_aug))),
                             ops::mul(log_p_orig, Tensor::constant({n, 1}, std::move(is_orig))));
  const Tensor bce = ops::neg(ops::mean(ll));
  AdversarialTerm term;
  term.l_adv = bce.item();
  term.lambda_adv = lambda_adv;
  term.weighted = ops::scale(bce, lambda_adv);
  return term;
}

}  // namespace fedalign::losses
