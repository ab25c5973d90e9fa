// SPDX-License-Identifier: Apache-2.0
#include "fedalign/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "json.hpp"

#include "fedalign/errors.hpp"

namespace fedalign::harness {

using nlohmann::json;

double evaluate(const model::Architecture& arch, const model::ModelParams& params,
                std::span<const data::LabeledSample* const> test) {
  return federation::accuracy(arch, params, test);
}

std::vector<std::uint64_t> seed_list(const ExperimentConfig& cfg) {
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < cfg.seeds; ++i) out.push_back(cfg.seed + i);
  return out;
}

data::Dataset obtain_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.data_path) return data::load_dataset(*cfg.data_path);
  return data::generate_synthetic_domains(cfg.data, seed);
}

RunOutcome run_single(const ExperimentConfig& cfg, const data::Dataset& dataset, const RunSpec& spec) {
  const auto start = std::chrono::steady_clock::now();
  federation::FederationConfig fed = cfg.fed;
  fed.seed = spec.seed;
  fed.local.algorithm = spec.algorithm;
  fed.arch.num_classes = dataset.info.num_classes;
  fed.arch.in_channels = dataset.info.channels;
  fed.arch.height = dataset.info.height;
  fed.arch.width = dataset.info.width;

  const auto plan = data::leave_one_domain_out(dataset, spec.target, spec.clients, cfg.data.skew, spec.seed);
  std::vector<std::vector<const data::LabeledSample*>> client_data;
  RunOutcome out;
  out.spec = spec;
  for (const auto& ids : plan.train) {
    client_data.push_back(data::select(dataset, ids));
    out.client_sizes.push_back(ids.size());
  }

  std::vector<std::vector<const data::LabeledSample*>> by_domain(dataset.info.num_domains);
  for (const auto& s : dataset.samples) by_domain[s.domain].push_back(&s);
  const auto evaluator = [&](const model::ModelParams& params) {
    std::vector<double> acc;
    for (const auto& d : by_domain) acc.push_back(d.empty() ? 0.0 : evaluate(fed.arch, params, d));
    return acc;
  };

  auto result = federation::run_federation(fed, client_data, evaluator);
  out.reports = std::move(result.reports);
  out.final_params = std::move(result.params);
  for (const auto& r : out.reports) {
    const double a = r.accuracy.at(spec.target);
    if (r.round == 1 || a > out.best_acc) {
      out.best_acc = a;
      out.best_round = r.round;
    }
  }
  out.final_acc = out.reports.back().accuracy.at(spec.target);
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

Stat mean_std(std::span<const double> values) {
  Stat s;
  s.n = values.size();
  if (s.n == 0) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

std::vector<double> domain_average_by_seed(std::span<const RunOutcome> runs, Algorithm algorithm,
                                           std::size_t clients) {
  std::map<std::uint64_t, std::pair<double, std::size_t>> acc;
  for (const auto& r : runs) {
    if (r.spec.algorithm != algorithm || r.spec.clients != clients) continue;
    auto& slot = acc[r.spec.seed];
    slot.first += r.final_acc;
    ++slot.second;
  }
  std::vector<double> out;
  for (const auto& [seed, v] : acc) out.push_back(v.first / static_cast<double>(v.second));
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string domain_label(std::size_t d) { return "d" + std::to_string(d); }

// Writes every output at the end and removes them again if anything fails.
class OutputSet {
 public:
  explicit OutputSet(std::filesystem::path dir) : dir_(std::move(dir)) {}
  ~OutputSet() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : written_) std::filesystem::remove(p, ec);
    if (created_dir_) std::filesystem::remove(dir_, ec);
  }

  void write(const std::string& name, const std::string& contents) {
    if (!std::filesystem::exists(dir_)) {
      std::filesystem::create_directories(dir_);
      created_dir_ = true;
    }
    const auto path = dir_ / name;
    written_.push_back(path);
    std::ofstream out(path, std::ios::binary);
    out << contents;
    if (!out) throw std::runtime_error("failed writing " + path.string());
  }

  std::vector<std::filesystem::path> commit() {
    committed_ = true;
    return written_;
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> written_;
  bool created_dir_ = false;
  bool committed_ = false;
};

std::string timing_csv(std::span<const RunOutcome> runs) {
  std::string out = "seed,algorithm,target,clients,wall_seconds\n";
  for (const auto& r : runs)
    out += std::to_string(r.spec.seed) + "," + federation::to_string(r.spec.algorithm) + "," +
           std::to_string(r.spec.target) + "," + std::to_string(r.spec.clients) + "," + fmt(r.wall_seconds) + "\n";
  return out;
}

json stat_json(const Stat& s) { return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; }

json summary_json(std::span<const RunOutcome> runs, std::span<const Algorithm> algorithms,
                  std::span<const std::uint16_t> targets, std::size_t clients) {
  json j;
  j["runs"] = json::array();
  for (const auto& r : runs) {
    if (r.spec.clients != clients) continue;
    j["runs"].push_back({{"seed", r.spec.seed},
                         {"algorithm", federation::to_string(r.spec.algorithm)},
                         {"target", r.spec.target},
                         {"clients", r.spec.clients},
                         {"final_acc", r.final_acc},
                         {"best_acc", r.best_acc},
                         {"best_round", r.best_round}});
  }
  json per = json::object();
  for (Algorithm a : algorithms) {
    json entry = json::object();
    for (std::uint16_t t : targets) {
      std::vector<double> finals, bests;
      for (const auto& r : runs)
        if (r.spec.algorithm == a && r.spec.target == t && r.spec.clients == clients) {
          finals.push_back(r.final_acc);
          bests.push_back(r.best_acc);
        }
      entry[domain_label(t)] = {{"final", stat_json(mean_std(finals))}, {"best", stat_json(mean_std(bests))}};
    }
    entry["average"] = {{"final", stat_json(mean_std(domain_average_by_seed(runs, a, clients)))}};
    per[federation::to_string(a)] = entry;
  }
  j["per_target"] = per;
  return j;
}

struct Grid {
  std::vector<Algorithm> algorithms;
  std::vector<std::size_t> clients;
};

ExperimentResult run_grid(const ExperimentConfig& cfg, const Grid& grid) {
  ExperimentResult result;
  for (std::uint64_t seed : seed_list(cfg)) {
    const data::Dataset dataset = obtain_dataset(cfg, seed);
    if (result.num_domains != 0 && result.num_domains != dataset.info.num_domains)
      throw ContractViolation("datasets differ in domain count across seeds");
    result.num_domains = dataset.info.num_domains;
    for (std::size_t k : grid.clients)
      for (Algorithm a : grid.algorithms)
        for (std::uint16_t t : target_domains(cfg, dataset.info.num_domains))
          result.runs.push_back(run_single(cfg, dataset, {a, seed, t, k}));
  }
  return result;
}

std::vector<std::uint16_t> targets_of(std::span<const RunOutcome> runs) {
  std::set<std::uint16_t> s;
  for (const auto& r : runs) s.insert(r.spec.target);
  return {s.begin(), s.end()};
}

void require_valid(const ExperimentConfig& cfg) {
  if (auto problems = validate(cfg); !problems.empty()) throw ConfigError(problems);
}

}  // namespace

std::vector<std::string> metrics_columns(std::size_t num_domains) {
  std::vector<std::string> cols{"seed", "algorithm", "target", "clients", "round", "target_acc", "mean_acc"};
  for (std::size_t d = 0; d < num_domains; ++d) cols.push_back("acc_" + domain_label(d));
  for (const char* c : {"l_cls", "l_sc", "l_rc", "l_ra", "l_js", "l_total", "bytes_up", "bytes_down",
                        "round_bytes_up", "round_bytes_down", "stats_uploaded"})
    cols.push_back(c);
  return cols;
}

std::string metrics_csv(std::span<const RunOutcome> runs, std::size_t num_domains) {
  std::string out;
  const auto cols = metrics_columns(num_domains);
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += "\n";
  for (const auto& run : runs) {
    for (const auto& r : run.reports) {
      if (r.accuracy.size() != num_domains) throw ContractViolation("metrics_csv: accuracy width mismatch");
      double mean = 0.0;
      for (double a : r.accuracy) mean += a;
      mean /= static_cast<double>(num_domains);
      std::string row = std::to_string(run.spec.seed) + "," + federation::to_string(run.spec.algorithm) + "," +
                        std::to_string(run.spec.target) + "," + std::to_string(run.spec.clients) + "," +
                        std::to_string(r.round) + "," + fmt(r.accuracy[run.spec.target]) + "," + fmt(mean);
      for (double a : r.accuracy) row += "," + fmt(a);
      const auto& l = r.mean_loss;
      for (double v : {l.l_cls, l.l_sc, l.l_rc, l.l_ra, l.l_js, l.l_total}) row += "," + fmt(v);
      row += "," + std::to_string(r.bytes.uplink) + "," + std::to_string(r.bytes.downlink) + "," +
             std::to_string(r.round_bytes.uplink) + "," + std::to_string(r.round_bytes.downlink) + "," +
             std::to_string(r.uploaded_stats);
      out += row + "\n";
    }
  }
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  require_valid(cfg);
  const Algorithm algorithm = cfg.fed.local.algorithm;
  auto result = run_grid(cfg, {{algorithm}, {cfg.clients}});
  OutputSet out(cfg.output);
  out.write("metrics.csv", metrics_csv(result.runs, result.num_domains));
  auto summary = summary_json(result.runs, std::vector<Algorithm>{algorithm}, targets_of(result.runs), cfg.clients);
  summary["algorithm"] = federation::to_string(algorithm);
  summary["seeds"] = seed_list(cfg);
  out.write("summary.json", summary.dump(2) + "\n");
  out.write("timing.csv", timing_csv(result.runs));
  result.files = out.commit();
  return result;
}

CompareResult compare(const ExperimentConfig& cfg) {
  require_valid(cfg);
  CompareResult res;
  res.algorithms = cfg.compare_algorithms;
  res.seeds = seed_list(cfg);
  res.experiment = run_grid(cfg, {cfg.compare_algorithms, {cfg.clients}});
  res.targets = targets_of(res.experiment.runs);
  const auto& runs = res.experiment.runs;

  std::map<Algorithm, std::vector<double>> avg;
  for (Algorithm a : res.algorithms) avg[a] = domain_average_by_seed(runs, a, cfg.clients);
  const Algorithm first = res.algorithms[0], second = res.algorithms[1];
  for (std::size_t i = 0; i < res.seeds.size(); ++i) res.paired_deltas.push_back(avg[first][i] - avg[second][i]);

  std::string table = "algorithm";
  for (std::uint16_t t : res.targets) table += "," + domain_label(t) + "_mean," + domain_label(t) + "_std";
  table += ",avg_mean,avg_std\n";
  for (Algorithm a : res.algorithms) {
    table += federation::to_string(a);
    for (std::uint16_t t : res.targets) {
      std::vector<double> finals;
      for (const auto& r : runs)
        if (r.spec.algorithm == a && r.spec.target == t) finals.push_back(r.final_acc);
      const Stat s = mean_std(finals);
      table += "," + fmt(s.mean) + "," + fmt(s.std);
    }
    const Stat s = mean_std(avg[a]);
    table += "," + fmt(s.mean) + "," + fmt(s.std) + "\n";
  }

  // Per (seed, target) deltas of every other algorithm against the first.
  std::string deltas = "seed,target,baseline,reference_acc,baseline_acc,delta\n";
  for (std::size_t b = 1; b < res.algorithms.size(); ++b) {
    const Algorithm base = res.algorithms[b];
    for (std::uint64_t seed : res.seeds) {
      for (std::uint16_t t : res.targets) {
        double ref = 0.0, other = 0.0;
        for (const auto& r : runs) {
          if (r.spec.seed != seed || r.spec.target != t) continue;
          if (r.spec.algorithm == first) ref = r.final_acc;
          if (r.spec.algorithm == base) other = r.final_acc;
        }
        deltas += std::to_string(seed) + "," + std::to_string(t) + "," + federation::to_string(base) + "," +
                  fmt(ref) + "," + fmt(other) + "," + fmt(ref - other) + "\n";
      }
    }
    const auto base_avg = avg[base];
    for (std::size_t i = 0; i < res.seeds.size(); ++i)
      deltas += std::to_string(res.seeds[i]) + ",avg," + federation::to_string(base) + "," + fmt(avg[first][i]) +
                "," + fmt(base_avg[i]) + "," + fmt(avg[first][i] - base_avg[i]) + "\n";
  }

  OutputSet out(cfg.output);
  out.write("metrics.csv", metrics_csv(runs, res.experiment.num_domains));
  out.write("compare.csv", table);
  out.write("deltas.csv", deltas);
  auto summary = summary_json(runs, res.algorithms, res.targets, cfg.clients);
  const Stat d = mean_std(res.paired_deltas);
  std::size_t positive = 0;
  for (double v : res.paired_deltas) positive += v > 0.0 ? 1 : 0;
  summary["paired_delta"] = {{"reference", federation::to_string(first)},
                             {"baseline", federation::to_string(second)},
                             {"per_seed", res.paired_deltas},
                             {"mean", d.mean},
                             {"std", d.std},
                             {"positive_seeds", positive},
                             {"seeds", res.seeds.size()}};
  out.write("summary.json", summary.dump(2) + "\n");
  out.write("timing.csv", timing_csv(runs));
  res.experiment.files = out.commit();
  return res;
}

SweepResult scaling_sweep(const ExperimentConfig& cfg) {
  require_valid(cfg);
  SweepResult res;
  res.experiment = run_grid(cfg, {cfg.compare_algorithms, cfg.sweep_clients});
  const auto& runs = res.experiment.runs;

  std::string csv = "clients,algorithm,mean_acc,std_acc,seeds,mean_client_samples\n";
  for (std::size_t k : cfg.sweep_clients) {
    for (Algorithm a : cfg.compare_algorithms) {
      SweepPoint p;
      p.clients = k;
      p.algorithm = a;
      const auto per_seed = domain_average_by_seed(runs, a, k);
      p.accuracy = mean_std(per_seed);
      double samples = 0.0;
      std::size_t count = 0;
      for (const auto& r : runs)
        if (r.spec.algorithm == a && r.spec.clients == k)
          for (std::size_t n : r.client_sizes) {
            samples += static_cast<double>(n);
            ++count;
          }
      p.mean_client_samples = count ? samples / static_cast<double>(count) : 0.0;
      csv += std::to_string(k) + "," + federation::to_string(a) + "," + fmt(p.accuracy.mean) + "," +
             fmt(p.accuracy.std) + "," + std::to_string(p.accuracy.n) + "," + fmt(p.mean_client_samples) + "\n";
      res.points.push_back(p);
    }
  }

  json summary;
  const std::size_t k_lo = cfg.sweep_clients.front(), k_hi = cfg.sweep_clients.back();
  summary["clients_from"] = k_lo;
  summary["clients_to"] = k_hi;
  json degr = json::object();
  std::map<Algorithm, std::vector<double>> drops;
  for (Algorithm a : cfg.compare_algorithms) {
    const auto lo = domain_average_by_seed(runs, a, k_lo), hi = domain_average_by_seed(runs, a, k_hi);
    for (std::size_t i = 0; i < lo.size(); ++i) drops[a].push_back(lo[i] - hi[i]);
    degr[federation::to_string(a)] = stat_json(mean_std(drops[a]));
  }
  summary["degradation"] = degr;
  const Algorithm first = cfg.compare_algorithms[0], second = cfg.compare_algorithms[1];
  std::vector<double> diff;
  for (std::size_t i = 0; i < drops[first].size(); ++i) diff.push_back(drops[second][i] - drops[first][i]);
  const Stat dd = mean_std(diff);
  const double stderr_ = dd.n > 1 ? dd.std / std::sqrt(static_cast<double>(dd.n)) : 0.0;
  summary["reference_degrades_less"] = dd.mean > 0.0;
  summary["degradation_gap"] = stat_json(dd);
  summary["within_noise"] = dd.n < 2 || std::abs(dd.mean) <= stderr_;

  OutputSet out(cfg.output);
  out.write("metrics.csv", metrics_csv(runs, res.experiment.num_domains));
  out.write("sweep.csv", csv);
  out.write("sweep_summary.json", summary.dump(2) + "\n");
  out.write("timing.csv", timing_csv(runs));
  res.experiment.files = out.commit();
  return res;
}

}  // namespace fedalign::harness
