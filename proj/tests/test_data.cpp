#include <fstream>
#include <set>

#include "doctest.h"
#include "fedalign/data.hpp"
#include "fedalign/errors.hpp"
#include "fedalign/federation.hpp"
#include "support.hpp"

using namespace fedalign;
using namespace fedalign::data;

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<const LabeledSample*> of_domain(const Dataset& ds, std::uint16_t d) {
  std::vector<const LabeledSample*> out;
  for (const auto& s : ds.samples)
    if (s.domain == d) out.push_back(&s);
  return out;
}

}  // namespace

TEST_CASE("generation is deterministic and well formed") {
  const DataConfig cfg;
  const auto a = generate_synthetic_domains(cfg, 3);
  CHECK(a == generate_synthetic_domains(cfg, 3));
  CHECK_FALSE(a == generate_synthetic_domains(cfg, 4));
  REQUIRE(a.samples.size() == cfg.domains * cfg.per_domain);
  std::set<std::uint32_t> ids;
  for (const auto& s : a.samples) {
    ids.insert(s.sample_id);
    CHECK(s.image.size() == 3 * 16 * 16);
    CHECK(s.label < cfg.classes);
    CHECK(s.domain < cfg.domains);
    for (float v : s.image) CHECK_UNARY(std::isfinite(v));
  }
  CHECK(ids.size() == a.samples.size());
  for (const auto& spec : make_domain_specs(cfg, 3)) CHECK(std::abs(spec.mixing_determinant()) > 1e-3);
}

TEST_CASE("identity style makes paired samples identical across domains") {
  DataConfig cfg;
  cfg.domains = 2;
  cfg.per_domain = 20;
  const std::vector<DomainSpec> specs{DomainSpec::identity(0), DomainSpec::identity(1)};
  const auto ds = generate_with_specs(cfg, specs, 5);
  for (std::size_t i = 0; i < cfg.per_domain; ++i) {
    CHECK(ds.samples[i].image == ds.samples[cfg.per_domain + i].image);
    CHECK(ds.samples[i].label == ds.samples[cfg.per_domain + i].label);
  }
  std::vector<DomainSpec> singular = specs;
  singular[1].mixing = {{{1, 1, 0}, {1, 1, 0}, {0, 0, 1}}};
  CHECK_THROWS_AS(generate_with_specs(cfg, singular, 5), ContractViolation);
}

TEST_CASE("domains differ in style") {
  const DataConfig cfg;
  const auto specs = make_domain_specs(cfg, 0);
  for (std::size_t i = 0; i < specs.size(); ++i)
    for (std::size_t j = i + 1; j < specs.size(); ++j) {
      const auto a = specs[i].expected_channel_mean(0.5), b = specs[j].expected_channel_mean(0.5);
      double shift = 0.0;
      for (std::size_t c = 0; c < 3; ++c) shift = std::max(shift, std::abs(a[c] - b[c]));
      CHECK(shift >= cfg.min_mean_shift);
    }
}

TEST_CASE("content is learnable by a centralized model") {
  // Content check: pooled training on every domain reaches > 90% per domain.
  const DataConfig cfg;
  const model::Architecture arch;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = generate_synthetic_domains(cfg, seed);
    federation::ClientState all;
    for (const auto& s : ds.samples) all.samples.push_back(&s);
    federation::LocalConfig local;
    local.algorithm = federation::Algorithm::FedAvg;
    local.epochs = 20;
    const auto window = federation::step_window(all.size(), local, 1, 1);
    Rng rng(seed);
    const auto trained =
        federation::local_train(arch, all, model::init_params(arch, federation::model_init_seed(seed)), local, window,
                                rng);
    for (std::uint16_t d = 0; d < cfg.domains; ++d) {
      const double acc = federation::accuracy(arch, trained.params, of_domain(ds, d));
      INFO("seed " << seed << " domain " << d);
      CHECK(acc > 0.9);
    }
  }
}

TEST_CASE("partition_to_clients") {
  DataConfig cfg;
  cfg.per_domain = 100;
  const auto ds = generate_synthetic_domains(cfg, 1);
  Rng rng(2);

  SUBCASE("skew 1 with one client per domain is domain pure") {
    const auto parts = partition_to_clients(ds.samples, 4, 1.0, rng);
    for (std::size_t c = 0; c < 4; ++c) {
      REQUIRE(parts[c].size() == 100);
      for (auto p : select(ds, parts[c])) CHECK(p->domain == c);
    }
  }
  SUBCASE("skew 0 is balanced") {
    const auto parts = partition_to_clients(ds.samples, 4, 0.0, rng);
    for (const auto& p : parts) CHECK(p.size() == 100);
  }
  SUBCASE("every sample lands on exactly one client") {
    for (double skew : {0.0, 0.3, 0.8, 1.0})
      for (std::size_t k : {1, 3, 7, 16}) {
        const auto parts = partition_to_clients(ds.samples, k, skew, rng);
        std::multiset<std::uint32_t> seen;
        for (const auto& p : parts) seen.insert(p.begin(), p.end());
        CHECK(seen.size() == ds.samples.size());
        CHECK(std::set<std::uint32_t>(seen.begin(), seen.end()).size() == ds.samples.size());
      }
  }
  CHECK_THROWS_AS(partition_to_clients(ds.samples, 0, 1.0, rng), ContractViolation);
}

TEST_CASE("leave_one_domain_out") {
  const DataConfig cfg;
  const auto ds = generate_synthetic_domains(cfg, 7);
  std::multiset<std::uint16_t> tested;
  for (std::uint16_t t = 0; t < cfg.domains; ++t) {
    const auto plan = leave_one_domain_out(ds, t, 3, 1.0, 7);
    std::set<std::uint16_t> test_domains;
    for (auto p : select(ds, plan.test_ids)) test_domains.insert(p->domain);
    CHECK(test_domains == std::set<std::uint16_t>{t});
    tested.insert(t);

    std::set<std::uint32_t> train_ids;
    for (const auto& c : plan.train) train_ids.insert(c.begin(), c.end());
    for (auto id : plan.test_ids) CHECK(train_ids.count(id) == 0);
    for (auto p : select(ds, std::vector<std::uint32_t>(train_ids.begin(), train_ids.end()))) CHECK(p->domain != t);
  }
  CHECK(tested.size() == cfg.domains);

  const auto plan = leave_one_domain_out(ds, 3, 3, 1.0, 7);
  REQUIRE(plan.train.size() == 3);
  std::set<std::uint16_t> held;
  for (const auto& c : plan.train) {
    std::set<std::uint16_t> doms;
    for (auto p : select(ds, c)) doms.insert(p->domain);
    REQUIRE(doms.size() == 1);
    held.insert(*doms.begin());
  }
  CHECK(held == std::set<std::uint16_t>{0, 1, 2});
  CHECK_THROWS_AS(leave_one_domain_out(ds, 9, 3, 1.0, 7), ContractViolation);
}

TEST_CASE("FDGD files") {
  testing::TempDir dir("fdgd");
  DataConfig cfg;
  cfg.per_domain = 10;
  const auto ds = generate_synthetic_domains(cfg, 2);
  const auto path = dir.path() / "d.fdgd";
  save_dataset(ds, path);
  const auto back = load_dataset(path);
  CHECK(back == ds);
  save_dataset(back, dir.path() / "again.fdgd");
  CHECK(read_bytes(path) == read_bytes(dir.path() / "again.fdgd"));

  SUBCASE("header only") {
    Dataset empty;
    empty.info = ds.info;
    save_dataset(empty, dir.path() / "e.fdgd");
    const auto e = load_dataset(dir.path() / "e.fdgd");
    CHECK(e.samples.empty());
    CHECK(e.info == ds.info);
  }
  SUBCASE("truncation names the offset") {
    auto bytes = read_bytes(path);
    const std::size_t header = 20, record = 8 + 4 * ds.info.pixels();
    bytes.resize(header + record + 17);
    write_bytes(dir.path() / "t.fdgd", bytes);
    try {
      (void)load_dataset(dir.path() / "t.fdgd");
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(e.offset() == header + record + 17);
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }
  SUBCASE("bad magic and out-of-range labels") {
    auto bytes = read_bytes(path);
    bytes[0] = 'X';
    write_bytes(dir.path() / "m.fdgd", bytes);
    CHECK_THROWS_AS(load_dataset(dir.path() / "m.fdgd"), FormatError);
    bytes = read_bytes(path);
    bytes[20 + 6] = 0xFF;
    write_bytes(dir.path() / "l.fdgd", bytes);
    CHECK_THROWS_AS(load_dataset(dir.path() / "l.fdgd"), FormatError);
  }
  SUBCASE("streaming reader") {
    DatasetReader reader(path);
    CHECK(reader.count() == ds.samples.size());
    std::size_t n = 0;
    while (auto s = reader.next()) CHECK(*s == ds.samples[n++]);
    CHECK(n == ds.samples.size());
  }
}

TEST_CASE("to_batch layout") {
  DataConfig cfg;
  cfg.per_domain = 5;
  const auto ds = generate_synthetic_domains(cfg, 1);
  const std::vector<const LabeledSample*> two{&ds.samples[3], &ds.samples[7]};
  const auto x = to_batch(ds.info, two);
  CHECK(x.shape() == numerics::Shape{2, 3, 16, 16});
  CHECK(x.values()[768 + 5] == static_cast<double>(ds.samples[7].image[5]));
  CHECK(labels_of(two) == std::vector<std::size_t>{ds.samples[3].label, ds.samples[7].label});
}
