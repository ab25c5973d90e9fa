// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver: leave-one-domain-out runs over seeds, algorithm
// comparison, client-count sweep, and the CSV/JSON reports.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedalign/config.hpp"
#include "fedalign/data.hpp"
#include "fedalign/federation.hpp"

namespace fedalign::harness {

using federation::Algorithm;

// Fraction of samples whose argmax prediction equals the label; ties go to
// the lowest class index. Throws ContractViolation on an empty set.
double evaluate(const model::Architecture& arch, const model::ModelParams& params,
                std::span<const data::LabeledSample* const> test);

struct RunSpec {
  Algorithm algorithm = Algorithm::FedAlign;
  std::uint64_t seed = 0;
  std::uint16_t target = 0;
  std::size_t clients = 3;
};

struct RunOutcome {
  RunSpec spec;
  std::vector<federation::RoundReport> reports;  // accuracy indexed by domain
  std::vector<std::size_t> client_sizes;
  model::ModelParams final_params;
  double final_acc = 0.0;  // held-out domain, last round
  double best_acc = 0.0;   // held-out domain, best round
  std::size_t best_round = 0;
  double wall_seconds = 0.0;
};

std::vector<std::uint64_t> seed_list(const ExperimentConfig& cfg);

// Generated from (cfg.data, seed) or loaded from cfg.data_path.
data::Dataset obtain_dataset(const ExperimentConfig& cfg, std::uint64_t seed);

RunOutcome run_single(const ExperimentConfig& cfg, const data::Dataset& dataset, const RunSpec& spec);

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
  std::size_t n = 0;
};
Stat mean_std(std::span<const double> values);

// Final held-out accuracy averaged over targets, one entry per seed in seed order.
std::vector<double> domain_average_by_seed(std::span<const RunOutcome> runs, Algorithm algorithm,
                                           std::size_t clients);

// Metrics CSV: one row per (run, round). The schema is fixed by
// metrics_columns(num_domains).
std::vector<std::string> metrics_columns(std::size_t num_domains);
std::string metrics_csv(std::span<const RunOutcome> runs, std::size_t num_domains);

struct ExperimentResult {
  std::vector<RunOutcome> runs;
  std::size_t num_domains = 0;
  std::vector<std::filesystem::path> files;
};

// Runs cfg.fed.local.algorithm over every requested target and seed and
// writes metrics.csv, summary.json and timing.csv to cfg.output.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

struct CompareResult {
  ExperimentResult experiment;
  std::vector<Algorithm> algorithms;
  std::vector<std::uint16_t> targets;
  std::vector<std::uint64_t> seeds;
  // Per-seed domain-averaged deltas: algorithms[0] minus algorithms[1].
  std::vector<double> paired_deltas;
};

// Runs every algorithm in cfg.compare_algorithms on identical data and seeds;
// writes metrics.csv, compare.csv, deltas.csv, summary.json, timing.csv.
CompareResult compare(const ExperimentConfig& cfg);

struct SweepPoint {
  std::size_t clients = 0;
  Algorithm algorithm = Algorithm::FedAlign;
  Stat accuracy;  // domain-averaged final held-out accuracy over seeds
  double mean_client_samples = 0.0;
};

struct SweepResult {
  ExperimentResult experiment;
  std::vector<SweepPoint> points;
};

// compare() repeated for every client count in cfg.sweep_clients; writes
// sweep.csv and sweep_summary.json in addition to metrics.csv.
SweepResult scaling_sweep(const ExperimentConfig& cfg);

}  // namespace fedalign::harness
