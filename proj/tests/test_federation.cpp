#include <set>

#include "doctest.h"
#include "fedalign/errors.hpp"
#include "fedalign/federation.hpp"
#include "support.hpp"

using namespace fedalign;
using namespace fedalign::federation;
using model::ModelParams;

namespace {

ModelParams scalar_params(double v) { return ModelParams{{{"w", {1}, {v}}}}; }

struct SmallWorld {
  data::Dataset dataset;
  std::vector<std::vector<const data::LabeledSample*>> clients;
};

SmallWorld small_world(std::size_t clients, std::size_t per_domain = 30, std::uint64_t seed = 1) {
  data::DataConfig dc;
  dc.per_domain = per_domain;
  SmallWorld w;
  w.dataset = data::generate_synthetic_domains(dc, seed);
  const auto plan = data::leave_one_domain_out(w.dataset, 0, clients, 1.0, seed);
  for (const auto& ids : plan.train) w.clients.push_back(data::select(w.dataset, ids));
  return w;
}

FederationConfig small_config(Algorithm alg, std::size_t rounds = 2) {
  FederationConfig cfg;
  cfg.local.algorithm = alg;
  cfg.local.epochs = 1;
  cfg.rounds = rounds;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("select_clients") {
  Rng rng(1);
  CHECK(select_clients(4, 1.0, rng) == std::vector<std::uint32_t>{0, 1, 2, 3});
  const auto half = select_clients(4, 0.5, rng);
  CHECK(half.size() == 2);
  CHECK(std::set<std::uint32_t>(half.begin(), half.end()).size() == 2);
  for (auto id : half) CHECK(id < 4);
  Rng a(derive_seed(9, {2, 3})), b(derive_seed(9, {2, 3}));
  CHECK(select_clients(10, 0.3, a) == select_clients(10, 0.3, b));
  CHECK_THROWS_AS(select_clients(4, 0.0, rng), ContractViolation);
}

TEST_CASE("aggregate") {
  const std::vector<ClientUpdate> weighted{{0, 1, scalar_params(0.0)}, {1, 3, scalar_params(4.0)}};
  CHECK(aggregate(weighted).entries[0].values[0] == 3.0);

  const std::vector<ClientUpdate> equal{{0, 2, scalar_params(1.0)}, {1, 2, scalar_params(2.0)}, {2, 2, scalar_params(6.0)}};
  CHECK(aggregate(equal).entries[0].values[0] == doctest::Approx(3.0).epsilon(1e-15));

  const auto params = model::init_params(model::Architecture{}, 3);
  const std::vector<ClientUpdate> single{{7, 11, params}};
  CHECK(aggregate(single) == params);
  const std::vector<ClientUpdate> same{{0, 5, params}, {1, 9, params}, {2, 1, params}};
  CHECK(aggregate(same) == params);

  // Input order does not matter; accumulation follows client ids.
  const std::vector<ClientUpdate> shuffled{{2, 2, scalar_params(6.0)}, {0, 2, scalar_params(1.0)}, {1, 2, scalar_params(2.0)}};
  CHECK(aggregate(shuffled) == aggregate(equal));

  const std::vector<ClientUpdate> dup{{0, 1, scalar_params(0.0)}, {0, 3, scalar_params(4.0)}};
  CHECK_THROWS_AS(aggregate(dup), ContractViolation);
  CHECK_THROWS_AS(aggregate(std::span<const ClientUpdate>{}), ContractViolation);
}

TEST_CASE("local_train edge cases") {
  const auto w = small_world(1);
  const model::Architecture arch;
  const auto theta = model::init_params(arch, 2);
  ClientState client{0, w.clients[0], {}, std::nullopt};

  LocalConfig cfg;
  cfg.epochs = 0;
  Rng rng(1);
  CHECK(local_train(arch, client, theta, cfg, step_window(client.size(), cfg, 1, 1), rng).params == theta);

  cfg.epochs = 2;
  cfg.learning_rate = 0.0;
  for (auto alg : {Algorithm::FedAlign, Algorithm::FedAvg, Algorithm::FedProx}) {
    cfg.algorithm = alg;
    CHECK(local_train(arch, client, theta, cfg, step_window(client.size(), cfg, 1, 1), rng).params == theta);
  }
}

TEST_CASE("local training lowers the classification loss") {
  const model::Architecture arch;
  data::DataConfig dc;
  dc.domains = 2;
  dc.per_domain = 100;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::vector<data::DomainSpec> specs{data::DomainSpec::identity(0), data::DomainSpec::identity(1)};
    const auto ds = data::generate_with_specs(dc, specs, seed);
    ClientState client;
    for (const auto& s : ds.samples)
      if (s.domain == 0) client.samples.push_back(&s);
    LocalConfig cfg;
    cfg.algorithm = Algorithm::FedAvg;
    cfg.epochs = 1;
    auto theta = model::init_params(arch, seed);
    std::vector<double> per_epoch;
    for (std::size_t e = 1; e <= 3; ++e) {
      Rng rng(client_train_seed(seed, 0, e));
      const auto r = local_train(arch, client, theta, cfg, step_window(client.size(), cfg, 3, e), rng);
      per_epoch.push_back(r.mean_loss.l_cls);
      theta = r.params;
    }
    INFO("seed " << seed);
    CHECK(per_epoch[2] < per_epoch[0]);
  }
}

TEST_CASE("statistics upload and redistribution") {
  const auto w = small_world(3, 50);
  const model::Architecture arch;
  const auto theta = model::init_params(arch, 1);
  ClientState client{2, w.clients[2], {}, std::nullopt};
  REQUIRE(client.size() == 50);

  Rng rng(3);
  CHECK(upload_stats(arch, client, theta, 0.0, rng).empty());
  CHECK(upload_stats(arch, client, theta, 1.0, rng).size() == 50);
  Rng a(4), b(4);
  const auto sa = upload_stats(arch, client, theta, 0.1, a);
  const auto sb = upload_stats(arch, client, theta, 0.1, b);
  REQUIRE(sa.size() == 5);
  CHECK(sa == sb);
  std::set<std::uint32_t> ids;
  for (const auto& s : sa) {
    ids.insert(s.sample_id);
    CHECK(s.client_id == 2);
    CHECK(s.layer == 1);
    CHECK(s.channels() == arch.conv1_channels);
  }
  CHECK(ids.size() == 5);

  CHECK(upload_count(0.1, 50) == 5);
  CHECK(upload_count(0.1, 51) == 6);
  CHECK(upload_count(0.3, 10) == 3);
  CHECK(upload_count(1.0, 7) == 7);
  CHECK(upload_count(0.0, 7) == 0);
}

TEST_CASE("redistribute_stats") {
  auto entry = [](std::uint32_t client, std::uint32_t sample) {
    return mixstyle::StyleStats{{0.0}, {1.0}, client, sample, 1};
  };
  std::vector<mixstyle::StyleStats> pool;
  for (std::uint32_t c : {0u, 1u})
    for (std::uint32_t i = 0; i < 3; ++i) pool.push_back(entry(c, i));
  const std::vector<std::uint32_t> both{0, 1};
  auto banks = redistribute_stats(pool, both);
  REQUIRE(banks.at(0).size() == 3);
  REQUIRE(banks.at(1).size() == 3);
  for (const auto& s : banks.at(0)) CHECK(s.client_id == 1);
  for (const auto& s : banks.at(1)) CHECK(s.client_id == 0);

  const std::vector<std::uint32_t> one{0};
  const std::vector<mixstyle::StyleStats> own{entry(0, 0), entry(0, 1)};
  CHECK(redistribute_stats(own, one).at(0).empty());

  pool.push_back(entry(2, 0));
  const std::vector<std::uint32_t> three{0, 1, 2};
  banks = redistribute_stats(pool, three);
  for (std::uint32_t c : three) {
    std::multiset<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (const auto& s : banks.at(c)) seen.insert({s.client_id, s.sample_id});
    for (const auto& s : pool)
      if (s.client_id == c) seen.insert({s.client_id, s.sample_id});
    std::multiset<std::pair<std::uint32_t, std::uint32_t>> all;
    for (const auto& s : pool) all.insert({s.client_id, s.sample_id});
    CHECK(seen == all);
  }
}

TEST_CASE("single client, single round equals centralized training") {
  const auto w = small_world(1, 30);
  auto cfg = small_config(Algorithm::FedAlign, 1);
  const auto fed = run_federation(cfg, w.clients, nullptr);

  ClientState client{0, w.clients[0], {}, std::nullopt};
  Rng rng(client_train_seed(cfg.seed, 0, 1));
  const auto central = local_train(cfg.arch, client, model::init_params(cfg.arch, model_init_seed(cfg.seed)),
                                   cfg.local, step_window(client.size(), cfg.local, 1, 1), rng);
  CHECK(fed.params == central.params);
}

TEST_CASE("baselines drop the alignment terms") {
  const auto w = small_world(3, 30);
  for (auto alg : {Algorithm::FedAvg, Algorithm::FedProx}) {
    auto cfg = small_config(alg, 2);
    const auto res = run_federation(cfg, w.clients, nullptr);
    REQUIRE(res.reports.size() == 2);
    for (const auto& r : res.reports) {
      CHECK(r.mean_loss.l_sc == 0.0);
      CHECK(r.mean_loss.l_rc == 0.0);
      CHECK(r.mean_loss.l_js == 0.0);
      CHECK(r.uploaded_stats == 0);
    }
    for (const auto& h : res.message_log) {
      CHECK(h.type != transport::MessageType::UploadStats);
      CHECK(h.type != transport::MessageType::StyleBank);
    }
  }
}

TEST_CASE("run_federation reports, byte meter and message audit") {
  const auto w = small_world(3, 30);
  auto cfg = small_config(Algorithm::FedAlign, 3);
  std::size_t evals = 0;
  const auto res = run_federation(cfg, w.clients, [&](const ModelParams&) {
    ++evals;
    return std::vector<double>{0.5};
  });
  REQUIRE(res.reports.size() == 3);
  CHECK(evals == 3);

  const std::uint64_t ckpt = model::serialize_checkpoint(res.params).size();
  const std::uint64_t record = mixstyle::stats_record_size(cfg.arch.conv1_channels);
  std::uint64_t up_total = 0, down_total = 0;
  for (const auto& r : res.reports) {
    CHECK(r.selected == std::vector<std::uint32_t>{0, 1, 2});
    std::uint64_t up = 0, stats = 0;
    for (auto id : r.selected) {
      const auto n = upload_count(cfg.upload_ratio, w.clients[id].size());
      up += ckpt + record * n;
      stats += n;
    }
    CHECK(r.round_bytes.uplink == up);
    CHECK(r.uploaded_stats == stats);
    // Each client receives the parameters plus everyone else's records from the previous round.
    const std::uint64_t prev = r.round == 1 ? 0 : res.reports[r.round - 2].uploaded_stats;
    std::uint64_t down = 0;
    for (auto id : r.selected) {
      const std::uint64_t own = r.round == 1 ? 0 : upload_count(cfg.upload_ratio, w.clients[id].size());
      down += ckpt + record * (prev - own);
    }
    CHECK(r.round_bytes.downlink == down);
    up_total += up;
    down_total += down;
    CHECK(r.bytes == transport::ByteCounts{up_total, down_total});
  }

  for (const auto& h : res.message_log) {
    if (transport::direction_of(h.type) == transport::Direction::Uplink)
      CHECK_UNARY(h.type == transport::MessageType::UploadParams || h.type == transport::MessageType::UploadStats);
  }
}

TEST_CASE("results do not depend on the worker count") {
  const auto w = small_world(3, 30);
  auto cfg = small_config(Algorithm::FedAlign, 2);
  cfg.client_fraction = 0.6;
  const auto one = run_federation(cfg, w.clients, nullptr);
  cfg.threads = 4;
  const auto four = run_federation(cfg, w.clients, nullptr);
  CHECK(one.params == four.params);
  REQUIRE(one.reports.size() == four.reports.size());
  for (std::size_t i = 0; i < one.reports.size(); ++i) {
    CHECK(one.reports[i].selected == four.reports[i].selected);
    CHECK(one.reports[i].selected.size() == 3 - 1);
    CHECK(one.reports[i].mean_loss.l_total == four.reports[i].mean_loss.l_total);
    CHECK(one.reports[i].bytes == four.reports[i].bytes);
  }
}

TEST_CASE("adversarial extension runs and reports its term") {
  const auto w = small_world(3, 20);
  auto cfg = small_config(Algorithm::FedAlign, 1);
  cfg.local.adversarial = true;
  const auto res = run_federation(cfg, w.clients, nullptr);
  REQUIRE(res.reports.size() == 1);
  const auto& b = res.reports[0].mean_loss;
  REQUIRE(b.l_adv);
  CHECK(*b.l_adv > 0.0);
  CHECK(std::abs(b.l_total - (b.l_cls + b.lambda1 * b.l_ra + b.lambda2 * b.l_js + b.lambda_adv * *b.l_adv)) < 1e-9);
}

TEST_CASE("accuracy uses the lowest index on ties") {
  model::Architecture arch;
  auto params = model::init_params(arch, 1);
  for (auto& v : params.entries[6].values) v = 0.0;
  data::DataConfig dc;
  dc.per_domain = 25;
  const auto ds = data::generate_synthetic_domains(dc, 1);
  std::vector<const data::LabeledSample*> all;
  for (const auto& s : ds.samples) all.push_back(&s);
  CHECK(accuracy(arch, params, all) == doctest::Approx(0.2));
}
