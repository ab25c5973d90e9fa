// SPDX-License-Identifier: Apache-2.0
#include "fedalign/mixstyle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fedalign/bytes.hpp"
#include "fedalign/errors.hpp"
#include "fedalign/numerics/ops.hpp"

namespace fedalign::mixstyle {

namespace ops = numerics;

std::vector<std::string> validate(const MixConfig& cfg) {
  std::vector<std::string> problems;
  if (!(cfg.alpha > 0.0) || !std::isfinite(cfg.alpha)) problems.push_back("mix.alpha must be > 0");
  if (!(cfg.p_cross >= 0.0 && cfg.p_cross <= 1.0)) problems.push_back("mix.p_cross must be in [0, 1]");
  if (!(cfg.apply_prob >= 0.0 && cfg.apply_prob <= 1.0))
    problems.push_back("mix.apply_prob must be in [0, 1]");
  if (cfg.k_clusters < 1) problems.push_back("mix.k_clusters must be >= 1");
  return problems;
}

std::vector<StyleStats> channel_stats(const Tensor& x) {
  if (x.rank() != 4) throw ContractViolation("channel_stats expects [B,C,H,W], got " + numerics::shape_string(x.shape()));
  const Tensor plain = x.detach();
  const Tensor mu = ops::global_avg_pool(plain);
  const Tensor sig = ops::channel_std(plain, kStyleEpsilon);
  const std::size_t B = x.dim(0), C = x.dim(1);
  std::vector<StyleStats> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    out[b].mean.assign(mu.values().begin() + static_cast<long>(b * C), mu.values().begin() + static_cast<long>((b + 1) * C));
    out[b].std.assign(sig.values().begin() + static_cast<long>(b * C), sig.values().begin() + static_cast<long>((b + 1) * C));
    out[b].sample_id = static_cast<std::uint32_t>(b);
  }
  return out;
}

double sample_lambda(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw ContractViolation("sample_lambda: alpha must be positive");
  return rng.beta(alpha, alpha);
}

MixedStats mix_statistics(const StyleStats& s_i, const StyleStats& s_j, double lambda) {
  if (s_i.channels() != s_j.channels() || s_i.std.size() != s_i.channels() || s_j.std.size() != s_j.channels())
    throw ContractViolation("mix_statistics: channel counts differ (" + std::to_string(s_i.channels()) + " vs " +
                            std::to_string(s_j.channels()) + ")");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractViolation("mix_statistics: lambda outside [0, 1]");
  MixedStats out;
  out.mean.resize(s_i.channels());
  out.std.resize(s_i.channels());
  for (std::size_t c = 0; c < s_i.channels(); ++c) {
    out.mean[c] = lambda * s_i.mean[c] + (1.0 - lambda) * s_j.mean[c];
    out.std[c] = lambda * s_i.std[c] + (1.0 - lambda) * s_j.std[c];
  }
  return out;
}

Tensor apply_mixstyle(const Tensor& x, const StyleStats& own, const MixedStats& mixed, bool swap_affine_roles) {
  Tensor x4;
  if (x.rank() == 3) {
    x4 = ops::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  } else if (x.rank() == 4 && x.dim(0) == 1) {
    x4 = x;
  } else {
    throw ContractViolation("apply_mixstyle expects one sample [C,H,W], got " + numerics::shape_string(x.shape()));
  }
  const std::size_t C = x4.dim(1);
  if (own.channels() != C || mixed.mean.size() != C || mixed.std.size() != C)
    throw ContractViolation("apply_mixstyle: statistics do not match " + std::to_string(C) + " channels");

  const Tensor mu = ops::global_avg_pool(x4);
  const Tensor sig = ops::channel_std(x4, kStyleEpsilon);
  const Tensor normalized = ops::channel_normalize(x4, mu, sig);
  const Tensor mix_mean = Tensor::constant({1, C}, mixed.mean);
  const Tensor mix_std = Tensor::constant({1, C}, mixed.std);
  Tensor out = swap_affine_roles ? ops::channel_scale_shift(normalized, mix_mean, mix_std)
                                 : ops::channel_scale_shift(normalized, mix_std, mix_mean);
  return ops::reshape(out, x.shape());
}

std::vector<std::size_t> StyleClusters::members(std::size_t cluster) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] == cluster) out.push_back(i);
  return out;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

std::size_t nearest(const std::vector<double>& f, const std::vector<std::vector<double>>& centroids) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(f, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<std::vector<double>> standardized_features(std::span<const StyleStats> entries) {
  const std::size_t n = entries.size();
  const std::size_t dims = entries[0].mean.size() + entries[0].std.size();
  std::vector<std::vector<double>> f(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (entries[i].mean.size() + entries[i].std.size() != dims)
      throw ContractViolation("cluster_styles: entries have different channel counts");
    f[i] = entries[i].mean;
    f[i].insert(f[i].end(), entries[i].std.begin(), entries[i].std.end());
  }
  for (std::size_t d = 0; d < dims; ++d) {
    double m = 0.0;
    for (const auto& v : f) m += v[d];
    m /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& v : f) var += (v[d] - m) * (v[d] - m);
    const double s = std::sqrt(var / static_cast<double>(n));
    const double div = s < 1e-12 ? 1.0 : s;
    for (auto& v : f) v[d] = (v[d] - m) / div;
  }
  return f;
}

}  // namespace

StyleClusters cluster_styles(std::span<const StyleStats> entries, std::size_t k, Rng& rng) {
  if (k < 1) throw ContractViolation("cluster_styles: k must be >= 1");
  if (entries.size() < k)
    throw DegenerateInput("cluster_styles: " + std::to_string(entries.size()) + " entries cannot form " +
                          std::to_string(k) + " clusters");
  StyleClusters out;
  out.features = standardized_features(entries);
  const auto& f = out.features;
  const std::size_t n = f.size();

  // k-means++ seeding.
  out.centroids.push_back(f[rng.index(n)]);
  std::vector<double> d2(n);
  while (out.centroids.size() < k) {
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(f[i], out.centroids[nearest(f[i], out.centroids)]);
    out.centroids.push_back(f[rng.categorical(d2)]);
  }

  out.assignment.assign(n, 0);
  for (std::size_t iter = 0; iter < kMaxClusterIterations; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = nearest(f[i], out.centroids);
      if (c != out.assignment[i]) changed = true;
      out.assignment[i] = c;
    }
    if (!changed) break;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> sum(f[0].size(), 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (out.assignment[i] != c) continue;
        for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += f[i][d];
        ++count;
      }
      if (count == 0) continue;  // keep the previous centroid
      for (auto& v : sum) v /= static_cast<double>(count);
      out.centroids[c] = std::move(sum);
    }
    if (iter + 1 == kMaxClusterIterations)
      for (std::size_t i = 0; i < n; ++i) out.assignment[i] = nearest(f[i], out.centroids);
  }
  return out;
}

std::vector<double> weights_from_variances(std::span<const double> variances) {
  if (variances.empty()) throw ContractViolation("sampling weights need at least one cluster");
  double total = 0.0;
  for (double v : variances) {
    if (!(v >= 0.0)) throw ContractViolation("cluster variance must be nonnegative");
    total += v;
  }
  std::vector<double> w(variances.size());
  if (total < 1e-12) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
    return w;
  }
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = variances[i] / total;
  return w;
}

std::vector<double> sampling_weights(const StyleClusters& clusters) {
  std::vector<double> var(clusters.count(), 0.0);
  std::vector<std::size_t> count(clusters.count(), 0);
  for (std::size_t i = 0; i < clusters.assignment.size(); ++i) {
    const std::size_t c = clusters.assignment[i];
    var[c] += sq_dist(clusters.features[i], clusters.centroids[c]);
    ++count[c];
  }
  for (std::size_t c = 0; c < var.size(); ++c)
    if (count[c] > 0) var[c] /= static_cast<double>(count[c]);
  return weights_from_variances(var);
}

StyleBank StyleBank::build(std::vector<StyleStats> entries, std::size_t k, Rng& rng) {
  StyleBank bank;
  bank.entries_ = std::move(entries);
  if (bank.entries_.empty()) return bank;
  const std::size_t k_eff = std::min(std::max<std::size_t>(k, 1), bank.entries_.size());
  bank.clusters_ = cluster_styles(bank.entries_, k_eff, rng);
  bank.weights_ = sampling_weights(*bank.clusters_);
  return bank;
}

StyleBank StyleBank::unclustered(std::vector<StyleStats> entries) {
  StyleBank bank;
  bank.entries_ = std::move(entries);
  return bank;
}

const StyleStats& StyleBank::draw(Rng& rng) const {
  if (entries_.empty()) throw ContractViolation("StyleBank::draw on an empty bank");
  if (!clusters_) return entries_[rng.index(entries_.size())];
  const std::size_t c = rng.categorical(*weights_);
  const auto members = clusters_->members(c);
  if (members.empty()) return entries_[rng.index(entries_.size())];
  return entries_[members[rng.index(members.size())]];
}

PartnerRef select_partner(std::size_t self, std::size_t batch_size, const StyleBank& bank, const MixConfig& cfg,
                          Rng& rng) {
  if (batch_size == 0 || self >= batch_size) throw ContractViolation("select_partner: invalid batch position");
  if (!bank.empty() && cfg.p_cross > 0.0 && rng.uniform() < cfg.p_cross) return bank.draw(rng);
  if (batch_size == 1) return self;
  std::size_t j = rng.index(batch_size - 1);
  if (j >= self) ++j;
  return j;
}

const StyleStats& resolve(const PartnerRef& partner, std::span<const StyleStats> batch) {
  if (const auto* idx = std::get_if<std::size_t>(&partner)) {
    if (*idx >= batch.size()) throw ContractViolation("partner index outside the batch");
    return batch[*idx];
  }
  return std::get<StyleStats>(partner);
}

std::optional<MixPlan> plan_mix(std::size_t batch_size, std::uint16_t layer, const StyleBank& bank,
                                const MixConfig& cfg, Rng& rng) {
  if (!(rng.uniform() < cfg.apply_prob)) return std::nullopt;
  static const StyleBank kEmpty;
  const StyleBank& usable = (!bank.empty() && bank.entries().front().layer == layer) ? bank : kEmpty;
  MixPlan plan;
  plan.swap_affine_roles = cfg.swap_affine_roles;
  plan.partners.reserve(batch_size);
  plan.lambdas.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    plan.partners.push_back(select_partner(i, batch_size, usable, cfg, rng));
    plan.lambdas.push_back(sample_lambda(cfg.alpha, rng));
  }
  return plan;
}

Tensor apply_plan(const Tensor& x, const MixPlan& plan) {
  if (x.rank() != 4) throw ContractViolation("apply_plan expects [B,C,H,W], got " + numerics::shape_string(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1);
  if (plan.partners.size() != B || plan.lambdas.size() != B)
    throw ContractViolation("apply_plan: plan size does not match batch size");

  const Tensor mu = ops::global_avg_pool(x);
  const Tensor sig = ops::channel_std(x, kStyleEpsilon);

  std::vector<StyleStats> batch(B);
  for (std::size_t b = 0; b < B; ++b) {
    batch[b].mean.assign(mu.values().begin() + static_cast<long>(b * C), mu.values().begin() + static_cast<long>((b + 1) * C));
    batch[b].std.assign(sig.values().begin() + static_cast<long>(b * C), sig.values().begin() + static_cast<long>((b + 1) * C));
  }

  std::vector<double> own_weight(B * C), partner_mean(B * C), partner_std(B * C);
  for (std::size_t b = 0; b < B; ++b) {
    const double lam = plan.lambdas[b];
    if (!(lam >= 0.0 && lam <= 1.0)) throw ContractViolation("apply_plan: lambda outside [0, 1]");
    const StyleStats& p = resolve(plan.partners[b], batch);
    if (p.channels() != C || p.std.size() != C)
      throw ContractViolation("apply_plan: partner statistics have " + std::to_string(p.channels()) +
                              " channels, feature map has " + std::to_string(C));
    for (std::size_t c = 0; c < C; ++c) {
      own_weight[b * C + c] = lam;
      partner_mean[b * C + c] = (1.0 - lam) * p.mean[c];
      partner_std[b * C + c] = (1.0 - lam) * p.std[c];
    }
  }
  const Tensor lam_t = Tensor::constant({B, C}, std::move(own_weight));
  const Tensor mix_mean = ops::add(ops::mul(mu, lam_t), Tensor::constant({B, C}, std::move(partner_mean)));
  const Tensor mix_std = ops::add(ops::mul(sig, lam_t), Tensor::constant({B, C}, std::move(partner_std)));
  const Tensor normalized = ops::channel_normalize(x, mu, sig);
  return plan.swap_affine_roles ? ops::channel_scale_shift(normalized, mix_mean, mix_std)
                                : ops::channel_scale_shift(normalized, mix_std, mix_mean);
}

Tensor augment_batch(const Tensor& x, std::uint16_t layer, const StyleBank& bank, const MixConfig& cfg, Rng& rng) {
  if (x.rank() != 4) throw ContractViolation("augment_batch expects [B,C,H,W], got " + numerics::shape_string(x.shape()));
  auto plan = plan_mix(x.dim(0), layer, bank, cfg, rng);
  if (!plan) return x;
  return apply_plan(x, *plan);
}

std::size_t stats_record_size(std::size_t channels) { return 4 + 4 + 2 + 2 + 16 * channels; }

void encode_stats_record(const StyleStats& stats, std::vector<std::uint8_t>& out) {
  if (stats.std.size() != stats.mean.size() || stats.mean.size() > 0xFFFF)
    throw ContractViolation("encode_stats_record: malformed statistics");
  ByteWriter w(out);
  w.u32(stats.client_id);
  w.u32(stats.sample_id);
  w.u16(stats.layer);
  w.u16(static_cast<std::uint16_t>(stats.mean.size()));
  for (double v : stats.mean) w.f64(v);
  for (double v : stats.std) w.f64(v);
}

std::vector<StyleStats> decode_stats_records(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  std::vector<StyleStats> out;
  while (!r.done()) {
    StyleStats s;
    s.client_id = r.u32();
    s.sample_id = r.u32();
    s.layer = r.u16();
    const std::size_t c = r.u16();
    s.mean.resize(c);
    s.std.resize(c);
    for (auto& v : s.mean) v = r.f64();
    for (auto& v : s.std) v = r.f64();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fedalign::mixstyle
