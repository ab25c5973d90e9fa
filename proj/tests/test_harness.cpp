#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "fedalign/config.hpp"
#include "fedalign/errors.hpp"
#include "fedalign/harness.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace fedalign;
using namespace fedalign::harness;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::map<std::string, std::string>> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  std::stringstream hs(line);
  for (std::string cell; std::getline(hs, cell, ',');) header.push_back(cell);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::map<std::string, std::string> row;
    std::size_t i = 0;
    for (std::string cell; std::getline(ls, cell, ','); ++i) {
      REQUIRE(i < header.size());
      row[header[i]] = cell;
    }
    REQUIRE(i == header.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

// Tiny but complete experiment: 4 domains of 20 samples, 2 rounds of 1 epoch.
ExperimentConfig tiny(const std::filesystem::path& out) {
  auto cfg = parse_config(
      "[experiment]\nseeds = 2\n"
      "[federation]\nrounds = 2\n"
      "[train]\nepochs = 1\n"
      "[data]\nper_domain = 20\n");
  cfg.output = out;
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDALIGN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config defaults follow the training setup") {
  const auto cfg = parse_config("");
  CHECK(cfg.fed.rounds == 10);
  CHECK(cfg.fed.local.epochs == 3);
  CHECK(cfg.fed.local.learning_rate == 1e-3);
  CHECK(cfg.fed.local.tau == 0.1);
  CHECK(cfg.fed.upload_ratio == 0.1);
  CHECK(cfg.clients == 3);
  CHECK(cfg.seeds == 5);
  CHECK(cfg.fed.local.algorithm == Algorithm::FedAlign);
  CHECK(cfg.fed.local.mix.alpha == 0.1);
  CHECK(cfg.fed.local.mix.p_cross == 0.5);
  CHECK(cfg.fed.local.mix.k_clusters == 3);
  CHECK(cfg.fed.local.mix.apply_prob == 0.5);
  CHECK_FALSE(cfg.fed.local.adversarial);
  CHECK_FALSE(cfg.target);
  CHECK(cfg.data.domains == 4);
  CHECK(cfg.data.classes == 5);
  CHECK(cfg.data.per_domain == 200);
  CHECK(cfg.sweep_clients == std::vector<std::size_t>{4, 8, 16});
}

TEST_CASE("config parsing") {
  const auto cfg = parse_config(
      "; comment\n[experiment]\nalgorithm = fedprox\ntarget = 2\nseed = 7\n"
      "[fedalign]\nmix_points = 2\nadversarial = true\n[fedprox]\nmu = 0.5\n"
      "[compare]\nalgorithms = fedavg, fedprox\n");
  CHECK(cfg.fed.local.algorithm == Algorithm::FedProx);
  CHECK(cfg.target == 2);
  CHECK(cfg.seed == 7);
  CHECK(cfg.fed.arch.mix_points == std::vector<std::size_t>{2});
  CHECK(cfg.fed.local.adversarial);
  CHECK(cfg.fed.local.mu_prox == 0.5);
  CHECK(cfg.compare_algorithms == std::vector<Algorithm>{Algorithm::FedAvg, Algorithm::FedProx});
  CHECK(target_domains(cfg, 4) == std::vector<std::uint16_t>{2});
  CHECK(target_domains(parse_config(""), 4) == std::vector<std::uint16_t>{0, 1, 2, 3});
}

TEST_CASE("config errors are reported together") {
  try {
    (void)parse_config(
        "[experiment]\nalgorithm = sgd\nbogus = 1\n[federation]\nrounds = -3\nclient_fraction = 2\n"
        "[fedalign]\ntau = 0\n[nosuch]\nx = 1\n");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    const auto& p = e.problems();
    CHECK(p.size() >= 6);
    const std::string all = e.what();
    for (const char* key : {"experiment.algorithm", "experiment.bogus", "federation.rounds",
                            "federation.client_fraction", "fedalign.tau", "nosuch.x"})
      CHECK_MESSAGE(all.find(key) != std::string::npos, key);
  }
  CHECK_THROWS_AS(parse_config("[data]\nskew = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[experiment]\ntarget = 9\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[compare]\nalgorithms = fedavg\n"), ConfigError);
}

TEST_CASE("evaluate") {
  const model::Architecture arch;
  auto params = model::init_params(arch, 1);
  for (auto& v : params.entries[6].values) v = 0.0;
  data::DataConfig dc;
  dc.per_domain = 25;
  const auto ds = data::generate_synthetic_domains(dc, 1);
  std::vector<const data::LabeledSample*> all, zeros;
  for (const auto& s : ds.samples) {
    all.push_back(&s);
    if (s.label == 0) zeros.push_back(&s);
  }
  CHECK(evaluate(arch, params, all) == doctest::Approx(0.2));
  CHECK(evaluate(arch, params, all) == evaluate(arch, params, all));
  // A classifier bias that always picks class 0 is exact on class-0 samples.
  params.entries[7].values = {10.0, 0.0, 0.0, 0.0, 0.0};
  CHECK(evaluate(arch, params, zeros) == 1.0);
  CHECK_THROWS_AS(evaluate(arch, params, std::span<const data::LabeledSample* const>{}), ContractViolation);
}

TEST_CASE("mean_std") {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto s = mean_std(v);
  CHECK(s.mean == 2.5);
  CHECK(s.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(s.n == 4);
  CHECK(mean_std(std::vector<double>{7.0}).std == 0.0);
}

TEST_CASE("run_experiment writes a deterministic, well-formed metrics file") {
  testing::TempDir dir("exp");
  auto cfg = tiny(dir.path() / "a");
  cfg.seeds = 1;
  const auto res = run_experiment(cfg);
  REQUIRE(res.runs.size() == 4);
  std::set<std::uint16_t> targets;
  for (const auto& r : res.runs) targets.insert(r.spec.target);
  CHECK(targets.size() == 4);

  const auto text = slurp(dir.path() / "a" / "metrics.csv");
  cfg.output = dir.path() / "b";
  (void)run_experiment(cfg);
  CHECK(text == slurp(dir.path() / "b" / "metrics.csv"));

  const auto rows = parse_csv(text);
  CHECK(rows.size() == 4 * 2);
  const auto columns = metrics_columns(4);
  std::map<std::string, double> last_up, last_down;
  for (const auto& row : rows) {
    CHECK(row.size() == columns.size());
    for (const auto& c : columns) CHECK(row.count(c) == 1);
    for (const char* acc : {"target_acc", "mean_acc", "acc_d0", "acc_d1", "acc_d2", "acc_d3"}) {
      const double a = std::stod(row.at(acc));
      CHECK_UNARY(a >= 0.0 && a <= 1.0);
    }
    const auto key = row.at("seed") + "/" + row.at("target");
    const double up = std::stod(row.at("bytes_up")), down = std::stod(row.at("bytes_down"));
    CHECK(up >= last_up[key]);
    CHECK(down >= last_down[key]);
    last_up[key] = up;
    last_down[key] = down;
    CHECK(std::stod(row.at("l_ra")) == doctest::Approx(std::stod(row.at("l_sc")) + std::stod(row.at("l_rc"))));
    CHECK(std::stod(row.at("l_js")) <= std::log(3.0));
  }

  const auto summary = nlohmann::json::parse(slurp(dir.path() / "a" / "summary.json"));
  CHECK(summary.contains("runs"));
  CHECK(std::filesystem::exists(dir.path() / "a" / "timing.csv"));
}

TEST_CASE("fedavg uploads no statistics") {
  testing::TempDir dir("avg");
  auto cfg = tiny(dir.path());
  cfg.seeds = 1;
  cfg.target = 1;
  cfg.fed.local.algorithm = Algorithm::FedAvg;
  const auto res = run_experiment(cfg);
  REQUIRE(res.runs.size() == 1);
  const auto ckpt = model::serialize_checkpoint(res.runs[0].final_params).size();
  for (const auto& r : res.runs[0].reports) {
    CHECK(r.uploaded_stats == 0);
    CHECK(r.round_bytes.uplink == 3 * ckpt);
  }
}

TEST_CASE("invalid configuration leaves no output behind") {
  testing::TempDir dir("bad");
  auto cfg = tiny(dir.path() / "never");
  cfg.fed.rounds = 0;
  CHECK_THROWS_AS(run_experiment(cfg), ConfigError);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "never"));
}

TEST_CASE("compare pairs seeds and data") {
  testing::TempDir dir("cmp");
  auto cfg = tiny(dir.path());
  const auto res = compare(cfg);
  CHECK(res.algorithms == std::vector<Algorithm>{Algorithm::FedAlign, Algorithm::FedAvg});
  CHECK(res.paired_deltas.size() == 2);
  CHECK(res.experiment.runs.size() == 2 * 4 * 2);

  const auto table = parse_csv(slurp(dir.path() / "compare.csv"));
  REQUIRE(table.size() == 2);
  CHECK(table[0].size() == 1 + 2 * 4 + 2);
  CHECK(table[0].count("avg_mean") == 1);

  const auto a = domain_average_by_seed(res.experiment.runs, Algorithm::FedAlign, cfg.clients);
  const auto b = domain_average_by_seed(res.experiment.runs, Algorithm::FedAvg, cfg.clients);
  const double delta_of_means = mean_std(a).mean - mean_std(b).mean;
  CHECK(mean_std(res.paired_deltas).mean == doctest::Approx(delta_of_means).epsilon(1e-12));

  // Both algorithms saw the same clients for every (seed, target).
  for (const auto& r : res.experiment.runs)
    for (const auto& o : res.experiment.runs)
      if (r.spec.seed == o.spec.seed && r.spec.target == o.spec.target) CHECK(r.client_sizes == o.client_sizes);
}

TEST_CASE("scaling sweep") {
  testing::TempDir dir("sweep");
  auto cfg = tiny(dir.path() / "a");
  cfg.seeds = 1;
  cfg.fed.rounds = 1;
  cfg.target = 0;
  cfg.sweep_clients = {4, 8, 16};
  const auto res = scaling_sweep(cfg);
  REQUIRE(res.points.size() == 6);
  std::map<Algorithm, std::vector<double>> sizes;
  for (const auto& p : res.points) sizes[p.algorithm].push_back(p.mean_client_samples);
  for (const auto& [alg, s] : sizes) {
    REQUIRE(s.size() == 3);
    CHECK(s[0] > s[1]);
    CHECK(s[1] > s[2]);
  }
  const auto csv = parse_csv(slurp(dir.path() / "a" / "sweep.csv"));
  CHECK(csv.size() == 6);
  const auto summary = nlohmann::json::parse(slurp(dir.path() / "a" / "sweep_summary.json"));
  CHECK(summary.contains("within_noise"));

  cfg.output = dir.path() / "b";
  (void)scaling_sweep(cfg);
  CHECK(slurp(dir.path() / "a" / "sweep.csv") == slurp(dir.path() / "b" / "sweep.csv"));
  CHECK(slurp(dir.path() / "a" / "metrics.csv") == slurp(dir.path() / "b" / "metrics.csv"));
}

TEST_CASE("command-line exit codes") {
  testing::TempDir dir("cli");
  const auto bad = dir.path() / "bad.ini";
  std::ofstream(bad) << "[federation]\nrounds = zero\n";
  CHECK(run_cli("train --config " + bad.string()) == 2);
  CHECK(run_cli("train --threads 0") == 2);
  CHECK(run_cli("nosuchcommand") == 2);
  CHECK(run_cli("--help") == 0);

  const auto good = dir.path() / "good.ini";
  std::ofstream(good) << "[data]\nper_domain = 10\n";
  CHECK(run_cli("generate --config " + good.string() + " --out " + (dir.path() / "gen").string()) == 0);
  const auto ds = data::load_dataset(dir.path() / "gen" / "dataset.fdgd");
  CHECK(ds.samples.size() == 40);
}
