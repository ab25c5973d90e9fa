// SPDX-License-Identifier: Apache-2.0
// fedalign: command-line entry point.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "fedalign/config.hpp"
#include "fedalign/data.hpp"
#include "fedalign/errors.hpp"
#include "fedalign/harness.hpp"
#include "fedalign/verify.hpp"

namespace {

using namespace fedalign;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Experiment config file (INI)");
  cmd->add_option("--seed", f.seed, "Master seed; overrides experiment.seed");
  cmd->add_option("--out", f.out, "Output directory; overrides experiment.output");
  cmd->add_option("--threads", f.threads, "Worker threads for client training")->check(CLI::PositiveNumber);
}

harness::ExperimentConfig resolve(const CommonFlags& f) {
  harness::ExperimentConfig cfg = f.config.empty() ? harness::parse_config("") : harness::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.output = f.out;
  if (f.threads) cfg.fed.threads = *f.threads;
  if (auto problems = harness::validate(cfg); !problems.empty()) throw ConfigError(problems);
  return cfg;
}

void print_table(const harness::CompareResult& res) {
  std::printf("%-10s", "algorithm");
  for (auto t : res.targets) std::printf("  %13s", ("d" + std::to_string(t)).c_str());
  std::printf("  %13s\n", "avg");
  for (auto a : res.algorithms) {
    std::printf("%-10s", federation::to_string(a).c_str());
    for (auto t : res.targets) {
      std::vector<double> v;
      for (const auto& r : res.experiment.runs)
        if (r.spec.algorithm == a && r.spec.target == t) v.push_back(r.final_acc);
      const auto s = harness::mean_std(v);
      std::printf("  %6.4f±%6.4f", s.mean, s.std);
    }
    const auto avg = harness::domain_average_by_seed(res.experiment.runs, a, res.experiment.runs.front().spec.clients);
    const auto s = harness::mean_std(avg);
    std::printf("  %6.4f±%6.4f\n", s.mean, s.std);
  }
  std::size_t positive = 0;
  for (double d : res.paired_deltas) positive += d > 0 ? 1 : 0;
  const auto d = harness::mean_std(res.paired_deltas);
  std::printf("paired delta %s - %s: mean %+.4f, positive in %zu of %zu seeds\n",
              federation::to_string(res.algorithms[0]).c_str(), federation::to_string(res.algorithms[1]).c_str(),
              d.mean, positive, res.paired_deltas.size());
}

int run(int argc, char** argv) {
  CLI::App app{"Federated domain generalization with style-statistics alignment"};
  app.require_subcommand(1);

  CommonFlags generate_flags, train_flags, compare_flags, sweep_flags;
  std::uint64_t gradcheck_seed = 0;

  auto* generate = app.add_subcommand("generate", "Write the synthetic dataset as an FDGD file");
  add_common(generate, generate_flags);
  auto* train = app.add_subcommand("train", "Run one algorithm over the configured targets and seeds");
  add_common(train, train_flags);
  auto* cmp = app.add_subcommand("compare", "Run every algorithm in compare.algorithms on paired seeds");
  add_common(cmp, compare_flags);
  auto* sweep = app.add_subcommand("sweep", "Repeat compare for every client count in sweep.clients");
  add_common(sweep, sweep_flags);
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  gradcheck->add_option("--seed", gradcheck_seed, "Seed for the random test inputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (*generate) {
    const auto cfg = resolve(generate_flags);
    const auto dataset = data::generate_synthetic_domains(cfg.data, cfg.seed);
    std::filesystem::create_directories(cfg.output);
    const auto path = cfg.output / "dataset.fdgd";
    data::save_dataset(dataset, path);
    std::printf("wrote %zu samples to %s\n", dataset.samples.size(), path.string().c_str());
    return kExitOk;
  }
  if (*train) {
    const auto res = harness::run_experiment(resolve(train_flags));
    for (const auto& r : res.runs)
      std::printf("seed %llu target d%u: final %.4f best %.4f (round %zu)\n",
                  static_cast<unsigned long long>(r.spec.seed), r.spec.target, r.final_acc, r.best_acc,
                  r.best_round);
    return kExitOk;
  }
  if (*cmp) {
    print_table(harness::compare(resolve(compare_flags)));
    return kExitOk;
  }
  if (*sweep) {
    const auto res = harness::scaling_sweep(resolve(sweep_flags));
    for (const auto& p : res.points)
      std::printf("K=%-3zu %-9s %.4f ± %.4f (%.1f samples/client)\n", p.clients,
                  federation::to_string(p.algorithm).c_str(), p.accuracy.mean, p.accuracy.std,
                  p.mean_client_samples);
    return kExitOk;
  }
  if (*gradcheck) {
    const auto report = verify::run_gradient_suite(gradcheck_seed);
    for (const auto& c : report.checks)
      std::printf("%-40s %.3e %s\n", c.name.c_str(), c.max_rel_error, c.passed ? "ok" : "FAIL");
    std::printf("%zu checks, worst %.3e (tolerance %.0e), %.2f s\n", report.checks.size(), report.worst(),
                report.tolerance, report.seconds);
    return report.passed() ? kExitOk : kExitFailure;
  }
  return kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const fedalign::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const fedalign::NumericFault& e) {
    std::cerr << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}
