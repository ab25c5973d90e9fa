// SPDX-License-Identifier: Apache-2.0
//
// Training objective terms. All tensor-valued losses return shape [1] and are
// differentiable with respect to every input that requires grad.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedalign/numerics/tensor.hpp"
#include "fedalign/rng.hpp"

namespace fedalign::losses {

using numerics::Tensor;

inline constexpr double kProbabilityFloor = 1e-12;

// Mean over rows of -log(max(probs[i, label_i], floor)).
Tensor cross_entropy(const Tensor& probs, std::span<const std::size_t> labels);

// Supervised contrastive loss with rows of `view` as anchors against all rows
// of `reference` (cosine similarity / tau). Positives of anchor i are the
// reference rows j != i with the same label. Averaged over anchors that have
// at least one positive; zero when none do.
Tensor supervised_contrastive(const Tensor& view, const Tensor& reference, std::span<const std::size_t> labels,
                              double tau);

// 0.5 * (SC(z1, z) + SC(z2, z)).
Tensor symmetric_contrastive(const Tensor& z, const Tensor& z1, const Tensor& z2,
                             std::span<const std::size_t> labels, double tau);

// Mean squared difference between z and each augmented view, averaged over
// views, rows and components.
Tensor representation_consistency(const Tensor& z, const std::vector<Tensor>& views);

// KL(p || q) for probability vectors; both floored at kProbabilityFloor.
// Throws ContractViolation unless each sums to 1 within 1e-8.
double kl_divergence(std::span<const double> p, std::span<const double> q);
// Row-wise KL(p || q) for [B,N] probability matrices -> [B].
Tensor kl_rows(const Tensor& p, const Tensor& q);

// Mean over rows of the average KL of each prediction to their mean.
// Symmetric in its three arguments.
Tensor js_alignment(const Tensor& y, const Tensor& y1, const Tensor& y2);

struct LossBreakdown {
  double l_cls = 0.0;
  double l_sc = 0.0;
  double l_rc = 0.0;
  double l_ra = 0.0;
  double l_js = 0.0;
  double l_total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  std::optional<double> l_adv;
  double lambda_adv = 0.0;
};

struct TotalLoss {
  Tensor value;
  LossBreakdown breakdown;
};

// Optional adversarial contribution, already weighted (see adversarial_loss).
struct AdversarialTerm {
  Tensor weighted;  // lambda_adv * l_adv with reversed encoder-side gradient
  double l_adv = 0.0;
  double lambda_adv = 0.0;
};

// l_cls + lambda1 * (l_sc + l_rc) + lambda2 * l_js [+ lambda_adv * l_adv].
// Throws NumericFault naming the first non-finite component.
TotalLoss total_loss(const Tensor& l_cls, const Tensor& l_sc, const Tensor& l_rc, const Tensor& l_js, double lambda1,
                     double lambda2, const std::optional<AdversarialTerm>& adversarial = std::nullopt);

// Two-layer binary classifier telling original representations (label 0)
// from augmented ones (label 1).
struct Discriminator {
  Tensor w1;  // [d_z, hidden]
  Tensor b1;  // [hidden]
  Tensor w2;  // [hidden, 1]
  Tensor b2;  // [1]

  static Discriminator init(std::size_t d_z, std::size_t hidden, std::uint64_t seed);
  std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }
  // Probability that each row is augmented, in (0, 1).
  Tensor predict(const Tensor& z) const;
  Tensor logits(const Tensor& z) const;
};

// Binary cross-entropy of the discriminator over original and augmented
// representations. Representations enter through a gradient-reversal layer,
// so the discriminator descends lambda_adv * l_adv while the encoder ascends it.
AdversarialTerm adversarial_loss(const Tensor& z, const std::vector<Tensor>& views, const Discriminator& disc,
                                 double lambda_adv);

}  // namespace fedalign::losses
