// SPDX-License-Identifier: Apache-2.0
#include "fedalign/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

#include "fedalign/errors.hpp"
#include "fedalign/numerics/ops.hpp"

namespace fedalign::federation {

namespace ops = numerics;
using model::ModelParams;
using numerics::Tensor;

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::FedAlign: return "fedalign";
    case Algorithm::FedAvg: return "fedavg";
    case Algorithm::FedProx: return "fedprox";
  }
  return "unknown";
}

std::optional<Algorithm> parse_algorithm(std::string_view name) {
  if (name == "fedalign") return Algorithm::FedAlign;
  if (name == "fedavg") return Algorithm::FedAvg;
  if (name == "fedprox") return Algorithm::FedProx;
  return std::nullopt;
}

std::vector<std::string> validate(const FederationConfig& cfg) {
  std::vector<std::string> problems = model::validate(cfg.arch);
  const auto& l = cfg.local;
  if (l.batch_size < 1) problems.push_back("train.batch_size must be >= 1");
  if (!(l.learning_rate >= 0.0 && std::isfinite(l.learning_rate))) problems.push_back("train.lr must be >= 0");
  if (!(l.lambda1 >= 0.0)) problems.push_back("fedalign.lambda1 must be >= 0");
  if (!(l.lambda2 >= 0.0)) problems.push_back("fedalign.lambda2 must be >= 0");
  if (!(l.tau > 0.0)) problems.push_back("fedalign.tau must be > 0");
  if (!(l.lambda_adv >= 0.0)) problems.push_back("fedalign.lambda_adv must be >= 0");
  if (l.adversarial && l.disc_hidden < 1) problems.push_back("fedalign.disc_hidden must be >= 1");
  if (!(l.mu_prox >= 0.0)) problems.push_back("fedprox.mu must be >= 0");
  for (auto& p : mixstyle::validate(l.mix)) problems.push_back(p);
  if (cfg.rounds < 1) problems.push_back("federation.rounds must be >= 1");
  if (!(cfg.client_fraction > 0.0 && cfg.client_fraction <= 1.0))
    problems.push_back("federation.client_fraction must be in (0, 1]");
  if (!(cfg.upload_ratio >= 0.0 && cfg.upload_ratio <= 1.0))
    problems.push_back("federation.upload_ratio must be in [0, 1]");
  if (cfg.threads < 1) problems.push_back("threads must be >= 1");
  return problems;
}

std::vector<std::uint32_t> select_clients(std::size_t total, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractViolation("select_clients: fraction must be in (0, 1]");
  if (total == 0) throw ContractViolation("select_clients: no clients");
  const auto count = std::min(total, upload_count(fraction, total));
  std::vector<std::uint32_t> ids(total);
  for (std::size_t i = 0; i < total; ++i) ids[i] = static_cast<std::uint32_t>(i);
  if (count < total) {
    rng.shuffle(ids.begin(), ids.end());
    ids.resize(count);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  if (batch_size == 0) throw ContractViolation("steps_per_epoch: batch size must be positive");
  return (samples + batch_size - 1) / batch_size;
}

StepWindow step_window(std::size_t samples, const LocalConfig& cfg, std::size_t rounds, std::size_t round) {
  if (round < 1 || round > rounds) throw ContractViolation("step_window: round out of range");
  const std::uint64_t per_round = cfg.epochs * steps_per_epoch(samples, cfg.batch_size);
  StepWindow w;
  w.schedule.initial = cfg.learning_rate;
  w.schedule.total_steps = std::max<std::uint64_t>(1, per_round * rounds);
  w.first_step = per_round * (round - 1);
  return w;
}

namespace {

struct BreakdownSum {
  losses::LossBreakdown acc;
  std::size_t n = 0;
  bool has_adv = false;

  void add(const losses::LossBreakdown& b) {
    acc.l_cls += b.l_cls;
    acc.l_sc += b.l_sc;
    acc.l_rc += b.l_rc;
    acc.l_ra += b.l_ra;
    acc.l_js += b.l_js;
    acc.l_total += b.l_total;
    acc.lambda1 = b.lambda1;
    acc.lambda2 = b.lambda2;
    acc.lambda_adv = b.lambda_adv;
    if (b.l_adv) {
      has_adv = true;
      acc.l_adv = acc.l_adv.value_or(0.0) + *b.l_adv;
    }
    ++n;
  }

  losses::LossBreakdown mean() const {
    losses::LossBreakdown m = acc;
    if (n == 0) return m;
    const double d = static_cast<double>(n);
    m.l_cls /= d;
    m.l_sc /= d;
    m.l_rc /= d;
    m.l_ra /= d;
    m.l_js /= d;
    m.l_total /= d;
    if (has_adv) m.l_adv = *acc.l_adv / d;
    return m;
  }
};

// Picks a mix point and a plan for one augmented view; nullopt leaves the
// view equal to the clean representation.
std::optional<model::MixDirective> draw_view(const model::Architecture& arch, std::size_t batch,
                                             const mixstyle::StyleBank& bank, const mixstyle::MixConfig& mix,
                                             Rng& rng) {
  if (arch.mix_points.empty()) return std::nullopt;
  const std::size_t point = arch.mix_points[rng.index(arch.mix_points.size())];
  auto plan = mixstyle::plan_mix(batch, static_cast<std::uint16_t>(point), bank, mix, rng);
  if (!plan) return std::nullopt;
  return model::MixDirective{point, std::move(*plan)};
}

Tensor proximal_term(std::span<const Tensor> params, const ModelParams& anchor, double mu) {
  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = anchor.entries[i];
    const Tensor diff = ops::sub(params[i], Tensor::constant(e.shape, e.values));
    acc = ops::add(acc, ops::sum(ops::square(diff)));
  }
  return ops::scale(acc, 0.5 * mu);
}

}  // namespace

LocalResult local_train(const model::Architecture& arch, ClientState& client, const ModelParams& theta,
                        const LocalConfig& cfg, const StepWindow& window, Rng& rng) {
  if (client.samples.empty())
    throw DegenerateInput("client " + std::to_string(client.id) + " holds no training samples");
  if (cfg.batch_size < 1) throw ContractViolation("local_train: batch size must be positive");

  LocalResult result;
  if (cfg.epochs == 0) {
    result.params = theta;
    return result;
  }

  const bool align = cfg.algorithm == Algorithm::FedAlign;
  const bool adversarial = align && cfg.adversarial;
  if (adversarial && !client.discriminator)
    throw ContractViolation("local_train: adversarial training needs a discriminator");

  model::BoundParams bound = model::BoundParams::bind(theta, true);
  numerics::AdamState adam;
  numerics::AdamState disc_adam;
  std::vector<Tensor> disc_params;
  if (adversarial) disc_params = client.discriminator->parameters();

  const std::size_t n = client.samples.size();
  const std::size_t per_epoch = steps_per_epoch(n, cfg.batch_size);
  data::DatasetInfo info{static_cast<std::uint16_t>(arch.num_classes), 0, static_cast<std::uint16_t>(arch.in_channels),
                         static_cast<std::uint16_t>(arch.height), static_cast<std::uint16_t>(arch.width)};

  std::vector<std::size_t> order(n);
  std::vector<const data::LabeledSample*> batch;
  BreakdownSum sums;
  std::uint64_t step = window.first_step;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * cfg.batch_size, end = std::min(n, begin + cfg.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(client.samples[order[i]]);
      const Tensor x = data::to_batch(info, batch);
      const auto labels = data::labels_of(batch);
      const std::size_t B = batch.size();

      const Tensor z = model::encode(arch, bound, x);
      const Tensor y = model::classify(arch, bound, z);
      const Tensor l_cls = losses::cross_entropy(y, labels);

      losses::TotalLoss total;
      if (align) {
        std::vector<Tensor> zs, ys;
        for (int v = 0; v < 2; ++v) {
          const auto directive = draw_view(arch, B, client.bank, cfg.mix, rng);
          const Tensor zv = directive ? model::encode(arch, bound, x, &*directive) : z;
          zs.push_back(zv);
          ys.push_back(directive ? model::classify(arch, bound, zv) : y);
        }
        const Tensor l_sc = losses::symmetric_contrastive(z, zs[0], zs[1], labels, cfg.tau);
        const Tensor l_rc = losses::representation_consistency(z, zs);
        const Tensor l_js = losses::js_alignment(y, ys[0], ys[1]);
        std::optional<losses::AdversarialTerm> adv;
        if (adversarial) adv = losses::adversarial_loss(z, zs, *client.discriminator, cfg.lambda_adv);
        total = losses::total_loss(l_cls, l_sc, l_rc, l_js, cfg.lambda1, cfg.lambda2, adv);
      } else {
        const Tensor zero = Tensor::scalar(0.0);
        total = losses::total_loss(l_cls, zero, zero, zero, 0.0, 0.0);
        if (cfg.algorithm == Algorithm::FedProx && cfg.mu_prox > 0.0) {
          total.value = ops::add(total.value, proximal_term(bound.tensors(), theta, cfg.mu_prox));
          total.breakdown.l_total = total.value.item();
        }
      }

      numerics::backward(total.value);
      const double lr = numerics::cosine_lr(std::min(step, window.schedule.total_steps), window.schedule);
      numerics::adam_step(bound.tensors(), adam, lr);
      bound.zero_grad();
      if (adversarial) {
        numerics::adam_step(disc_params, disc_adam, lr);
        for (auto& p : disc_params) p.zero_grad();
      }
      sums.add(total.breakdown);
      ++step;
      ++result.steps;
    }
  }
  result.params = bound.snapshot();
  result.mean_loss = sums.mean();
  return result;
}

ModelParams aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw ContractViolation("aggregate: no updates");
  std::vector<const ClientUpdate*> ordered;
  std::size_t total = 0;
  for (const auto& u : updates) {
    if (u.samples < 1) throw ContractViolation("aggregate: every update needs n_k >= 1");
    if (!u.params.congruent_with(updates.front().params))
      throw ContractViolation("aggregate: update from client " + std::to_string(u.client_id) +
                              " is not shape-congruent");
    ordered.push_back(&u);
    total += u.samples;
  }
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < ordered.size(); ++i)
    if (ordered[i]->client_id == ordered[i - 1]->client_id)
      throw ContractViolation("aggregate: duplicate update from client " + std::to_string(ordered[i]->client_id));

  ModelParams out = ordered.front()->params;
  for (std::size_t e = 0; e < out.entries.size(); ++e) {
    const auto& base = ordered.front()->params.entries[e].values;
    auto& dst = out.entries[e].values;
    for (std::size_t j = 0; j < dst.size(); ++j) {
      double delta = 0.0;
      for (const auto* u : ordered) {
        const double w = static_cast<double>(u->samples) / static_cast<double>(total);
        delta += w * (u->params.entries[e].values[j] - base[j]);
      }
      dst[j] = base[j] + delta;
    }
  }
  return out;
}

std::size_t upload_count(double ratio, std::size_t samples) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ContractViolation("upload ratio must be in [0, 1]");
  // The small slack keeps products like 0.1 * 30 from rounding up past the integer.
  const double exact = ratio * static_cast<double>(samples);
  return std::min(samples, static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact))));
}

std::vector<mixstyle::StyleStats> upload_stats(const model::Architecture& arch, const ClientState& client,
                                               const ModelParams& theta, double ratio, Rng& rng) {
  const std::size_t count = upload_count(ratio, client.samples.size());
  if (count == 0) return {};
  std::vector<std::size_t> order(client.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  order.resize(count);

  std::vector<const data::LabeledSample*> chosen;
  for (std::size_t i : order) chosen.push_back(client.samples[i]);
  data::DatasetInfo info{static_cast<std::uint16_t>(arch.num_classes), 0, static_cast<std::uint16_t>(arch.in_channels),
                         static_cast<std::uint16_t>(arch.height), static_cast<std::uint16_t>(arch.width)};
  const auto bound = model::BoundParams::bind(theta, false);
  const Tensor act = model::encoder_activation(arch, bound, data::to_batch(info, chosen), 1);
  auto stats = mixstyle::channel_stats(act);
  for (std::size_t i = 0; i < stats.size(); ++i) {
    stats[i].client_id = client.id;
    stats[i].sample_id = chosen[i]->sample_id;
    stats[i].layer = 1;
  }
  return stats;
}

std::map<std::uint32_t, std::vector<mixstyle::StyleStats>> redistribute_stats(
    std::span<const mixstyle::StyleStats> pool, std::span<const std::uint32_t> clients) {
  std::map<std::uint32_t, std::vector<mixstyle::StyleStats>> out;
  for (std::uint32_t c : clients) {
    auto& bank = out[c];
    for (const auto& s : pool)
      if (s.client_id != c) bank.push_back(s);
  }
  return out;
}

std::uint64_t client_train_seed(std::uint64_t seed, std::uint32_t client, std::size_t round) {
  return derive_seed(seed, {stream_id(Stream::ClientTrain), client, round});
}

std::uint64_t model_init_seed(std::uint64_t seed) { return derive_seed(seed, {stream_id(Stream::ModelInit)}); }

double accuracy(const model::Architecture& arch, const ModelParams& params,
                std::span<const data::LabeledSample* const> samples) {
  if (samples.empty()) throw ContractViolation("evaluate: empty test set");
  const auto bound = model::BoundParams::bind(params, false);
  data::DatasetInfo info{static_cast<std::uint16_t>(arch.num_classes), 0, static_cast<std::uint16_t>(arch.in_channels),
                         static_cast<std::uint16_t>(arch.height), static_cast<std::uint16_t>(arch.width)};
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
    const auto chunk = samples.subspan(begin, std::min(kChunk, samples.size() - begin));
    const auto f = model::forward_full(arch, bound, data::to_batch(info, chunk));
    const auto p = f.probs.values();
    const std::size_t N = arch.num_classes;
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < N; ++c)
        if (p[i * N + c] > p[i * N + best]) best = c;
      if (best == chunk[i]->label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are
// rethrown for the lowest failing index.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(threads, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) guarded(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

LocalConfig effective_local(const LocalConfig& in) {
  LocalConfig c = in;
  if (c.algorithm != Algorithm::FedAlign) {
    c.lambda1 = 0.0;
    c.lambda2 = 0.0;
    c.adversarial = false;
  }
  return c;
}

}  // namespace

FederationResult run_federation(const FederationConfig& cfg,
                                std::span<const std::vector<const data::LabeledSample*>> client_data,
                                const Evaluator& evaluate) {
  if (auto problems = validate(cfg); !problems.empty()) throw ConfigError(problems);
  if (client_data.empty()) throw ContractViolation("run_federation: no clients");
  const LocalConfig local = effective_local(cfg.local);
  const bool align = local.algorithm == Algorithm::FedAlign;
  const std::size_t K = client_data.size();

  std::vector<ClientState> clients(K);
  for (std::size_t k = 0; k < K; ++k) {
    clients[k].id = static_cast<std::uint32_t>(k);
    clients[k].samples = client_data[k];
    if (clients[k].samples.empty())
      throw DegenerateInput("client " + std::to_string(k) + " received no training samples");
    if (local.adversarial)
      clients[k].discriminator = losses::Discriminator::init(
          cfg.arch.d_z, local.disc_hidden, derive_seed(cfg.seed, {stream_id(Stream::Discriminator), k}));
  }

  transport::Channel channel;
  FederationResult result;
  ModelParams theta = model::init_params(cfg.arch, model_init_seed(cfg.seed));
  std::vector<mixstyle::StyleStats> pool;
  transport::ByteCounts before{};

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    Rng select_rng(derive_seed(cfg.seed, {stream_id(Stream::ClientSelect), t}));
    const auto selected = select_clients(K, cfg.client_fraction, select_rng);
    const auto banks = redistribute_stats(pool, selected);

    std::vector<ClientUpdate> updates(selected.size());
    std::vector<losses::LossBreakdown> losses_out(selected.size());
    std::vector<std::vector<mixstyle::StyleStats>> uploads(selected.size());

    parallel_for(selected.size(), cfg.threads, [&](std::size_t slot) {
      const std::uint32_t id = selected[slot];
      ClientState& client = clients[id];
      const auto t32 = static_cast<std::uint32_t>(t);

      const ModelParams received = transport::read_params(channel.send(transport::DownlinkMessage::broadcast(t32, id, theta)));
      if (align) {
        const auto entries =
            transport::read_stats(channel.send(transport::DownlinkMessage::bank(t32, id, banks.at(id))));
        Rng bank_rng(derive_seed(cfg.seed, {stream_id(Stream::BankCluster), id, t}));
        client.bank = entries.empty() ? mixstyle::StyleBank{}
                                      : mixstyle::StyleBank::build(entries, local.mix.k_clusters, bank_rng);
      }

      Rng rng(client_train_seed(cfg.seed, id, t));
      const auto window = step_window(client.size(), local, cfg.rounds, t);
      auto trained = local_train(cfg.arch, client, received, local, window, rng);
      losses_out[slot] = trained.mean_loss;

      updates[slot] = {id, client.size(),
                       transport::read_params(channel.send(transport::UplinkMessage::params(t32, id, trained.params)))};
      if (align) {
        Rng stats_rng(derive_seed(cfg.seed, {stream_id(Stream::StatsUpload), id, t}));
        const auto stats = upload_stats(cfg.arch, client, received, cfg.upload_ratio, stats_rng);
        uploads[slot] = transport::read_stats(channel.send(transport::UplinkMessage::stats(t32, id, stats)));
      }
    });

    theta = aggregate(updates);
    pool.clear();
    for (auto& u : uploads) pool.insert(pool.end(), u.begin(), u.end());

    RoundReport report;
    report.round = t;
    report.selected = selected;
    report.client_loss = losses_out;
    BreakdownSum sums;
    for (const auto& b : losses_out) sums.add(b);
    report.mean_loss = sums.mean();
    report.accuracy = evaluate ? evaluate(theta) : std::vector<double>{};
    report.bytes = channel.counts();
    report.round_bytes = {report.bytes.uplink - before.uplink, report.bytes.downlink - before.downlink};
    report.uploaded_stats = pool.size();
    before = report.bytes;
    result.reports.push_back(std::move(report));
  }
  result.params = std::move(theta);
  result.message_log = channel.log();
  return result;
}

}  // namespace fedalign::federation
