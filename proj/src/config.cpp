// SPDX-License-Identifier: Apache-2.0
#include "fedalign/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fedalign/errors.hpp"

namespace fedalign::harness {

namespace pt = boost::property_tree;
using federation::Algorithm;

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

template <typename T>
  requires std::is_unsigned_v<T> && (!std::is_same_v<T, bool>)
bool parse_value(const std::string& s, T& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_value(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_value(const std::string& s, bool& out) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "true" || l == "1" || l == "yes" || l == "on") {
    out = true;
    return true;
  }
  if (l == "false" || l == "0" || l == "no" || l == "off") {
    out = false;
    return true;
  }
  return false;
}

template <typename T>
  requires std::is_unsigned_v<T> && (!std::is_same_v<T, bool>)
const char* type_name(const T&) {
  return "a non-negative integer";
}
const char* type_name(const double&) { return "a finite number"; }
const char* type_name(const bool&) { return "true or false"; }

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  template <typename T>
  void get(const std::string& section, const std::string& key, T& dst) {
    if (auto raw = lookup(section, key)) {
      T value{};
      if (parse_value(*raw, value))
        dst = value;
      else
        problems.push_back(section + "." + key + " must be " + type_name(dst) + ", got '" + *raw + "'");
    }
  }

  std::optional<std::string> lookup(const std::string& section, const std::string& key) {
    used_.insert(section + "." + key);
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!v) return std::nullopt;
    return trim(*v);
  }

  void report_unknown() {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty()) {
        problems.push_back("key '" + section + "' must be inside a [section]");
        continue;
      }
      for (const auto& [key, value] : body)
        if (!used_.count(section + "." + key)) problems.push_back("unknown setting " + section + "." + key);
    }
  }

  std::vector<std::string> problems;

 private:
  const pt::ptree& tree_;
  std::set<std::string> used_;
};

std::optional<Algorithm> read_algorithm(Reader& r, const std::string& text, const std::string& field) {
  auto a = federation::parse_algorithm(text);
  if (!a) r.problems.push_back(field + " must be fedalign, fedavg or fedprox, got '" + text + "'");
  return a;
}

}  // namespace

std::vector<std::string> validate(const ExperimentConfig& cfg) {
  std::vector<std::string> problems = federation::validate(cfg.fed);
  for (auto& p : data::validate(cfg.data)) problems.push_back(p);
  if (cfg.clients < 1) problems.push_back("federation.clients must be >= 1");
  if (cfg.seeds < 1) problems.push_back("experiment.seeds must be >= 1");
  if (cfg.target && *cfg.target >= cfg.data.domains)
    problems.push_back("experiment.target " + std::to_string(*cfg.target) + " is not a domain (have " +
                       std::to_string(cfg.data.domains) + ")");
  const std::size_t source = (cfg.data.domains > 0 ? cfg.data.domains - 1 : 0) * cfg.data.per_domain;
  if (!cfg.data_path && cfg.clients > source)
    problems.push_back("federation.clients exceeds the " + std::to_string(source) + " source samples");
  if (cfg.fed.arch.num_classes != cfg.data.classes) problems.push_back("model classes must equal data.classes");
  if (cfg.fed.arch.height != cfg.data.image_size || cfg.fed.arch.width != cfg.data.image_size)
    problems.push_back("model input size must equal data.image_size");
  if (cfg.compare_algorithms.size() < 2) problems.push_back("compare.algorithms needs at least two algorithms");
  if (std::set<Algorithm>(cfg.compare_algorithms.begin(), cfg.compare_algorithms.end()).size() !=
      cfg.compare_algorithms.size())
    problems.push_back("compare.algorithms lists an algorithm twice");
  if (cfg.sweep_clients.empty()) problems.push_back("sweep.clients must list at least one client count");
  for (std::size_t k : cfg.sweep_clients)
    if (k < 1 || (!cfg.data_path && k > source))
      problems.push_back("sweep.clients entry " + std::to_string(k) + " is incompatible with the partitioner");
  if (cfg.output.empty()) problems.push_back("experiment.output must not be empty");
  return problems;
}

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError({std::string("unreadable config: ") + e.message() + " (line " + std::to_string(e.line()) + ")"});
  }

  ExperimentConfig cfg;
  Reader r(tree);
  auto& fed = cfg.fed;
  auto& local = fed.local;

  if (auto a = r.lookup("experiment", "algorithm"))
    if (auto alg = read_algorithm(r, *a, "experiment.algorithm")) local.algorithm = *alg;
  r.get("experiment", "seed", cfg.seed);
  r.get("experiment", "seeds", cfg.seeds);
  if (auto t = r.lookup("experiment", "target"); t && *t != "all") {
    std::size_t v = 0;
    if (parse_value(*t, v) && v <= 0xFFFF)
      cfg.target = static_cast<std::uint16_t>(v);
    else
      r.problems.push_back("experiment.target must be a domain index or 'all', got '" + *t + "'");
  }
  if (auto o = r.lookup("experiment", "output")) cfg.output = *o;
  r.get("experiment", "threads", fed.threads);

  r.get("federation", "clients", cfg.clients);
  r.get("federation", "rounds", fed.rounds);
  r.get("federation", "client_fraction", fed.client_fraction);
  r.get("federation", "upload_ratio", fed.upload_ratio);

  r.get("train", "epochs", local.epochs);
  r.get("train", "batch_size", local.batch_size);
  r.get("train", "lr", local.learning_rate);

  r.get("fedalign", "lambda1", local.lambda1);
  r.get("fedalign", "lambda2", local.lambda2);
  r.get("fedalign", "tau", local.tau);
  r.get("fedalign", "alpha", local.mix.alpha);
  r.get("fedalign", "p_cross", local.mix.p_cross);
  r.get("fedalign", "k_clusters", local.mix.k_clusters);
  r.get("fedalign", "apply_prob", local.mix.apply_prob);
  r.get("fedalign", "swap_affine_roles", local.mix.swap_affine_roles);
  r.get("fedalign", "adversarial", local.adversarial);
  r.get("fedalign", "lambda_adv", local.lambda_adv);
  r.get("fedalign", "disc_hidden", local.disc_hidden);
  if (auto mp = r.lookup("fedalign", "mix_points")) {
    fed.arch.mix_points.clear();
    for (const auto& item : split_list(*mp)) {
      std::size_t v = 0;
      if (parse_value(item, v))
        fed.arch.mix_points.push_back(v);
      else
        r.problems.push_back("fedalign.mix_points entry '" + item + "' is not an integer");
    }
  }

  r.get("fedprox", "mu", local.mu_prox);
  r.get("model", "d_z", fed.arch.d_z);

  r.get("data", "domains", cfg.data.domains);
  r.get("data", "classes", cfg.data.classes);
  r.get("data", "per_domain", cfg.data.per_domain);
  r.get("data", "image_size", cfg.data.image_size);
  r.get("data", "skew", cfg.data.skew);
  r.get("data", "min_mean_shift", cfg.data.min_mean_shift);
  if (auto p = r.lookup("data", "path"); p && !p->empty()) cfg.data_path = *p;

  if (auto list = r.lookup("compare", "algorithms")) {
    cfg.compare_algorithms.clear();
    for (const auto& item : split_list(*list))
      if (auto a = read_algorithm(r, item, "compare.algorithms")) cfg.compare_algorithms.push_back(*a);
  }
  if (auto list = r.lookup("sweep", "clients")) {
    cfg.sweep_clients.clear();
    for (const auto& item : split_list(*list)) {
      std::size_t v = 0;
      if (parse_value(item, v))
        cfg.sweep_clients.push_back(v);
      else
        r.problems.push_back("sweep.clients entry '" + item + "' is not an integer");
    }
  }

  r.report_unknown();
  fed.arch.num_classes = cfg.data.classes;
  fed.arch.height = cfg.data.image_size;
  fed.arch.width = cfg.data.image_size;

  std::vector<std::string> problems = std::move(r.problems);
  for (auto& p : validate(cfg)) problems.push_back(p);
  if (!problems.empty()) throw ConfigError(problems);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file " + path.string()});
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::vector<std::uint16_t> target_domains(const ExperimentConfig& cfg, std::size_t num_domains) {
  if (cfg.target) {
    if (*cfg.target >= num_domains)
      throw ConfigError({"experiment.target " + std::to_string(*cfg.target) + " is not a domain of the dataset"});
    return {*cfg.target};
  }
  std::vector<std::uint16_t> out;
  for (std::size_t d = 0; d < num_domains; ++d) out.push_back(static_cast<std::uint16_t>(d));
  return out;
}

}  // namespace fedalign::harness
