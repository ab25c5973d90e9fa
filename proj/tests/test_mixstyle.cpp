#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "fedalign/errors.hpp"
#include "fedalign/mixstyle.hpp"
#include "fedalign/numerics/ops.hpp"
#include "support.hpp"

using namespace fedalign;
using namespace fedalign::mixstyle;
using fedalign::testing::random_const;

namespace {

StyleStats stats(std::vector<double> mean, std::vector<double> std, std::uint32_t client = 0,
                 std::uint32_t sample = 0, std::uint16_t layer = 1) {
  return StyleStats{std::move(mean), std::move(std), client, sample, layer};
}

std::vector<StyleStats> random_bank(Rng& rng, std::size_t n, std::size_t channels, std::uint16_t layer = 1) {
  std::vector<StyleStats> out;
  for (std::size_t i = 0; i < n; ++i) {
    StyleStats s;
    for (std::size_t c = 0; c < channels; ++c) {
      s.mean.push_back(rng.normal());
      s.std.push_back(0.5 + rng.uniform());
    }
    s.client_id = 9;
    s.sample_id = static_cast<std::uint32_t>(i);
    s.layer = layer;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("channel_stats") {
  const auto s = channel_stats(Tensor::constant({1, 1, 2, 2}, {1, 2, 3, 4}));
  REQUIRE(s.size() == 1);
  CHECK(s[0].mean[0] == 2.5);
  CHECK(s[0].std[0] == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));

  const auto flat = channel_stats(Tensor::constant({1, 1, 2, 2}, {5, 5, 5, 5}));
  CHECK(flat[0].mean[0] == 5.0);
  CHECK(flat[0].std[0] == kStyleEpsilon);

  Rng rng(1);
  const auto many = channel_stats(random_const(rng, {2, 3, 4, 4}));
  REQUIRE(many.size() == 2);
  for (const auto& st : many) {
    CHECK(st.mean.size() == 3);
    CHECK(st.std.size() == 3);
    for (double v : st.std) CHECK(v >= kStyleEpsilon);
  }
}

TEST_CASE("sample_lambda distribution") {
  Rng rng(2);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double l = sample_lambda(1.0, rng);
    CHECK_UNARY(l >= 0.0 && l <= 1.0);
    sum += l;
  }
  CHECK(std::abs(sum / n - 0.5) < 0.01);

  int extreme = 0;
  for (int i = 0; i < n; ++i) {
    const double l = sample_lambda(0.1, rng);
    extreme += (l < 0.1 || l > 0.9) ? 1 : 0;
  }
  CHECK(extreme > n / 2);
}

TEST_CASE("mix_statistics") {
  const auto a = stats({1.0}, {2.0});
  const auto b = stats({3.0}, {4.0});
  CHECK(mix_statistics(a, b, 1.0).mean == a.mean);
  CHECK(mix_statistics(a, b, 1.0).std == a.std);
  CHECK(mix_statistics(a, b, 0.0).mean == b.mean);
  CHECK(mix_statistics(a, b, 0.0).std == b.std);
  const auto mid = mix_statistics(a, b, 0.5);
  CHECK(mid.mean[0] == 2.0);
  CHECK(mid.std[0] == 3.0);
}

TEST_CASE("apply_mixstyle") {
  const auto x = Tensor::constant({1, 2, 2}, {1, 2, 3, 4});
  const auto own = channel_stats(numerics::reshape(x, {1, 1, 2, 2}))[0];
  const auto out = apply_mixstyle(x, own, MixedStats{{0.0}, {1.0}});
  const double k = 1.0 / std::sqrt(1.25);
  const std::vector<double> expected{-1.5 * k, -0.5 * k, 0.5 * k, 1.5 * k};
  for (std::size_t i = 0; i < 4; ++i) CHECK(out.values()[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  CHECK(out.values()[0] == doctest::Approx(-1.3416).epsilon(1e-4));

  SUBCASE("own statistics reproduce the input") {
    Rng rng(3);
    const auto img = random_const(rng, {3, 5, 5});
    const auto s = channel_stats(numerics::reshape(img, {1, 3, 5, 5}))[0];
    const auto same = apply_mixstyle(img, s, mix_statistics(s, s, 1.0));
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(same.values()[i] - img.values()[i]) <= 1e-6);
  }
  SUBCASE("output carries the mixed statistics") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const auto img = random_const(rng, {1, 3, 4, 4});
      const auto s = channel_stats(img)[0];
      const auto partner = random_bank(rng, 1, 3)[0];
      const auto mixed = mix_statistics(s, partner, rng.uniform());
      const auto got = channel_stats(apply_mixstyle(img, s, mixed))[0];
      for (std::size_t c = 0; c < 3; ++c) {
        CHECK(std::abs(got.mean[c] - mixed.mean[c]) <= 1e-5);
        CHECK(std::abs(got.std[c] - mixed.std[c]) <= 1e-5);
      }
    }
  }
}

TEST_CASE("cluster_styles") {
  Rng rng(5);
  std::vector<StyleStats> entries;
  for (int i = 0; i < 6; ++i) entries.push_back(stats({0.0 + 0.1 * rng.normal()}, {1.0 + 0.1 * rng.uniform()}));
  for (int i = 0; i < 6; ++i) entries.push_back(stats({10.0 + 0.1 * rng.normal()}, {5.0 + 0.1 * rng.uniform()}));

  SUBCASE("one cluster") {
    const auto c = cluster_styles(entries, 1, rng);
    CHECK(c.count() == 1);
    for (auto a : c.assignment) CHECK(a == 0);
  }
  SUBCASE("two separated groups") {
    const auto c = cluster_styles(entries, 2, rng);
    REQUIRE(c.count() == 2);
    for (int i = 1; i < 6; ++i) CHECK(c.assignment[i] == c.assignment[0]);
    for (int i = 7; i < 12; ++i) CHECK(c.assignment[i] == c.assignment[6]);
    CHECK(c.assignment[0] != c.assignment[6]);
    // Every entry sits with its nearest centroid.
    for (std::size_t i = 0; i < entries.size(); ++i) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t k = 0; k < c.count(); ++k) {
        double d = 0.0;
        for (std::size_t j = 0; j < c.features[i].size(); ++j)
          d += std::pow(c.features[i][j] - c.centroids[k][j], 2);
        if (d < best_d) best_d = d, best = k;
      }
      CHECK(c.assignment[i] == best);
    }
  }
  SUBCASE("fewer entries than clusters") {
    std::vector<StyleStats> two(entries.begin(), entries.begin() + 2);
    CHECK_THROWS_AS(cluster_styles(two, 3, rng), DegenerateInput);
  }
}

TEST_CASE("sampling weights") {
  CHECK(weights_from_variances(std::vector<double>{1.0, 3.0}) == std::vector<double>{0.25, 0.75});
  CHECK(weights_from_variances(std::vector<double>{2.0, 2.0, 2.0}) ==
        std::vector<double>(3, 1.0 / 3.0));
  CHECK(weights_from_variances(std::vector<double>{0.0, 0.0}) == std::vector<double>{0.5, 0.5});

  Rng rng(6);
  const auto bank = StyleBank::build(random_bank(rng, 20, 4), 3, rng);
  REQUIRE(bank.weights());
  const auto& w = *bank.weights();
  for (double v : w) CHECK(v >= 0.0);
  CHECK(std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) <= 1e-10);

  const auto singles = StyleBank::build(random_bank(rng, 3, 4), 3, rng);
  for (double v : *singles.weights()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("select_partner") {
  MixConfig cfg;
  Rng rng(7);
  SUBCASE("empty bank falls back to the batch") {
    cfg.p_cross = 1.0;
    for (int i = 0; i < 50; ++i) {
      const auto p = select_partner(2, 5, StyleBank{}, cfg, rng);
      REQUIRE(std::holds_alternative<std::size_t>(p));
      CHECK(std::get<std::size_t>(p) != 2);
      CHECK(std::get<std::size_t>(p) < 5);
    }
    CHECK(std::get<std::size_t>(select_partner(0, 1, StyleBank{}, cfg, rng)) == 0);
  }
  SUBCASE("p_cross 1 draws from the bank") {
    cfg.p_cross = 1.0;
    const auto bank = StyleBank::unclustered(random_bank(rng, 4, 3));
    for (int i = 0; i < 20; ++i) {
      const auto p = select_partner(0, 5, bank, cfg, rng);
      REQUIRE(std::holds_alternative<StyleStats>(p));
      CHECK(std::get<StyleStats>(p).client_id == 9);
    }
  }
  SUBCASE("same seed, same partners") {
    const auto bank = StyleBank::unclustered(random_bank(rng, 4, 3));
    Rng a(42), b(42);
    for (int i = 0; i < 30; ++i) CHECK(select_partner(1, 6, bank, cfg, a) == select_partner(1, 6, bank, cfg, b));
  }
}

TEST_CASE("plan_mix and augment_batch") {
  Rng rng(8);
  const auto x = random_const(rng, {4, 3, 4, 4});
  MixConfig cfg;

  SUBCASE("apply_prob 0 never mixes") {
    cfg.apply_prob = 0.0;
    for (int i = 0; i < 10; ++i) CHECK_FALSE(plan_mix(4, 1, StyleBank{}, cfg, rng));
    CHECK(augment_batch(x, 1, StyleBank{}, cfg, rng).node() == x.node());
  }
  SUBCASE("lambda 1 plans are the identity") {
    cfg.apply_prob = 1.0;
    auto plan = plan_mix(4, 1, StyleBank{}, cfg, rng);
    REQUIRE(plan);
    CHECK(plan->partners.size() == 4);
    std::fill(plan->lambdas.begin(), plan->lambdas.end(), 1.0);
    const auto y = apply_plan(x, *plan);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y.values()[i] - x.values()[i]) <= 1e-6);
  }
  SUBCASE("independent draws give distinct views") {
    cfg.apply_prob = 1.0;
    const auto a = augment_batch(x, 1, StyleBank{}, cfg, rng);
    const auto b = augment_batch(x, 1, StyleBank{}, cfg, rng);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) differs |= a.values()[i] != b.values()[i];
    CHECK(differs);
  }
  SUBCASE("bank entries from another layer are ignored") {
    cfg.apply_prob = 1.0;
    cfg.p_cross = 1.0;
    const auto bank = StyleBank::unclustered(random_bank(rng, 5, 3, 2));
    const auto plan = plan_mix(4, 1, bank, cfg, rng);
    REQUIRE(plan);
    for (const auto& p : plan->partners) CHECK(std::holds_alternative<std::size_t>(p));
  }
}

TEST_CASE("stats wire records") {
  Rng rng(9);
  auto entries = random_bank(rng, 3, 8);
  entries[1].client_id = 4;
  entries[2].layer = 2;
  std::vector<std::uint8_t> bytes;
  for (const auto& e : entries) encode_stats_record(e, bytes);
  CHECK(stats_record_size(8) == 12 + 16 * 8);
  CHECK(bytes.size() == 3 * stats_record_size(8));
  CHECK(decode_stats_records(bytes) == entries);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_stats_records(bytes), FormatError);
}
