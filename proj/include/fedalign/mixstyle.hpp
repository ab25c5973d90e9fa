// SPDX-License-Identifier: Apache-2.0
//
// Feature-statistics style mixing.
//
// A feature map's "style" is its per-channel (mean, std). Mixing replaces a
// sample's style with a convex combination of its own and a partner's, where
// the partner is either another sample of the same batch or an entry of a
// StyleBank holding statistics uploaded by other clients.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "fedalign/numerics/tensor.hpp"
#include "fedalign/rng.hpp"

namespace fedalign::mixstyle {

using numerics::Tensor;

inline constexpr double kStyleEpsilon = 1e-6;

struct StyleStats {
  std::vector<double> mean;
  std::vector<double> std;  // each entry >= kStyleEpsilon
  std::uint32_t client_id = 0;
  std::uint32_t sample_id = 0;
  std::uint16_t layer = 0;

  std::size_t channels() const { return mean.size(); }
  bool operator==(const StyleStats&) const = default;
};

struct MixConfig {
  double alpha = 0.1;       // Beta(alpha, alpha) for the mixing weight
  double p_cross = 0.5;     // chance of drawing the partner from the bank
  std::size_t k_clusters = 3;
  double apply_prob = 0.5;  // chance that a given batch is mixed at all
  // Use mixed means as the multiplicative factor and mixed stds as the shift
  // (the roles swapped relative to the identity-preserving form).
  bool swap_affine_roles = false;
};

// Empty when valid; otherwise one message per offending field.
std::vector<std::string> validate(const MixConfig& cfg);

// Per-sample statistics of x[B,C,H,W], std floored at kStyleEpsilon.
std::vector<StyleStats> channel_stats(const Tensor& x);

double sample_lambda(double alpha, Rng& rng);

struct MixedStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// lambda * s_i + (1 - lambda) * s_j, channel-wise for mean and std.
MixedStats mix_statistics(const StyleStats& s_i, const StyleStats& s_j, double lambda);

// Restyles one sample x[C,H,W] (or [1,C,H,W]): normalize with its own
// statistics, then scale by mixed.std and shift by mixed.mean. The mixed
// statistics are constants for differentiation; x's own statistics are not.
Tensor apply_mixstyle(const Tensor& x, const StyleStats& own, const MixedStats& mixed,
                      bool swap_affine_roles = false);

// k-means over per-dimension standardized (mean || std) vectors.
struct StyleClusters {
  std::vector<std::size_t> assignment;          // entry -> cluster
  std::vector<std::vector<double>> centroids;   // standardized space
  std::vector<std::vector<double>> features;    // standardized entries
  std::size_t count() const { return centroids.size(); }
  std::vector<std::size_t> members(std::size_t cluster) const;
};

inline constexpr std::size_t kMaxClusterIterations = 50;

// Throws DegenerateInput when fewer entries than clusters.
StyleClusters cluster_styles(std::span<const StyleStats> entries, std::size_t k, Rng& rng);

// Probabilities proportional to each cluster's mean squared distance to its
// centroid; uniform when the total is below 1e-12.
std::vector<double> sampling_weights(const StyleClusters& clusters);
std::vector<double> weights_from_variances(std::span<const double> variances);

// Statistics received from the server for one round. Immutable once built.
class StyleBank {
 public:
  StyleBank() = default;
  // Clusters into min(k, size) groups and derives sampling weights.
  static StyleBank build(std::vector<StyleStats> entries, std::size_t k, Rng& rng);
  static StyleBank unclustered(std::vector<StyleStats> entries);

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<StyleStats>& entries() const { return entries_; }
  const std::optional<StyleClusters>& clusters() const { return clusters_; }
  const std::optional<std::vector<double>>& weights() const { return weights_; }

  // Bank entry drawn by cluster weight, then uniformly within the cluster.
  const StyleStats& draw(Rng& rng) const;

 private:
  std::vector<StyleStats> entries_;
  std::optional<StyleClusters> clusters_;
  std::optional<std::vector<double>> weights_;
};

// Partner of one sample: an index into the same batch or external statistics.
using PartnerRef = std::variant<std::size_t, StyleStats>;

// With probability p_cross (and a nonempty bank) a bank entry; otherwise a
// uniformly drawn batch index other than `self` (self only when batch_size==1).
PartnerRef select_partner(std::size_t self, std::size_t batch_size, const StyleBank& bank,
                          const MixConfig& cfg, Rng& rng);

// Resolves a PartnerRef against the batch's statistics.
const StyleStats& resolve(const PartnerRef& partner, std::span<const StyleStats> batch);

struct MixPlan {
  std::vector<PartnerRef> partners;  // one per sample
  std::vector<double> lambdas;       // one per sample
  bool swap_affine_roles = false;
};

// Decides whether a batch is mixed (apply_prob) and, if so, draws a partner
// and a fresh lambda for every sample. Bank entries whose layer differs from
// `layer` are not eligible.
std::optional<MixPlan> plan_mix(std::size_t batch_size, std::uint16_t layer, const StyleBank& bank,
                                const MixConfig& cfg, Rng& rng);

// Applies a plan to x[B,C,H,W]. The sample's own statistics stay in the
// graph; partner statistics are constants.
Tensor apply_plan(const Tensor& x, const MixPlan& plan);

// plan_mix followed by apply_plan; returns x itself when the batch is not mixed.
Tensor augment_batch(const Tensor& x, std::uint16_t layer, const StyleBank& bank, const MixConfig& cfg,
                     Rng& rng);

// Wire record: client u32, sample u32, layer u16, C u16, then C means and C
// stds as little-endian f64.
std::size_t stats_record_size(std::size_t channels);
void encode_stats_record(const StyleStats& stats, std::vector<std::uint8_t>& out);
std::vector<StyleStats> decode_stats_records(std::span<const std::uint8_t> bytes);

}  // namespace fedalign::mixstyle
