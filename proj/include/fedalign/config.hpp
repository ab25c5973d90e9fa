// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: INI-style "key = value" lines under [section]
// headers, ';' line comments. Unknown sections and keys are errors.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedalign/data.hpp"
#include "fedalign/federation.hpp"

namespace fedalign::harness {

struct ExperimentConfig {
  federation::FederationConfig fed;  // fed.seed is overwritten per run
  std::size_t clients = 3;
  data::DataConfig data;
  std::optional<std::filesystem::path> data_path;  // load instead of generating
  std::optional<std::uint16_t> target;             // nullopt = every domain
  std::uint64_t seed = 0;
  std::size_t seeds = 5;
  std::filesystem::path output = "out";
  std::vector<federation::Algorithm> compare_algorithms{federation::Algorithm::FedAlign,
                                                        federation::Algorithm::FedAvg};
  std::vector<std::size_t> sweep_clients{4, 8, 16};
};

// Every problem found, one message per field; empty when valid.
std::vector<std::string> validate(const ExperimentConfig& cfg);

// Throws ConfigError listing every unreadable or invalid field.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Domains evaluated as held-out targets, in ascending order.
std::vector<std::uint16_t> target_domains(const ExperimentConfig& cfg, std::size_t num_domains);

}  // namespace fedalign::harness
