// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-domain image data, client partitioning, leave-one-domain-out
// splits and the FDGD binary dataset format.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedalign/numerics/tensor.hpp"
#include "fedalign/rng.hpp"

namespace fedalign::data {

using numerics::Tensor;

// Per-domain appearance: x[c] = gain[c] * sum_d mixing[c][d] * content[d] + bias[c] + noise * N(0,1).
struct DomainSpec {
  std::uint16_t id = 0;
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> bias{0.0, 0.0, 0.0};
  std::array<std::array<double, 3>, 3> mixing{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  double noise = 0.0;

  static DomainSpec identity(std::uint16_t id);
  double mixing_determinant() const;
  // Expected per-channel image mean given the content's expected intensity.
  std::array<double, 3> expected_channel_mean(double content_mean) const;
};

struct LabeledSample {
  std::vector<float> image;  // C*H*W, row-major [C,H,W]
  std::uint16_t label = 0;
  std::uint16_t domain = 0;
  std::uint32_t sample_id = 0;
  bool operator==(const LabeledSample&) const = default;
};

struct DatasetInfo {
  std::uint16_t num_classes = 0;
  std::uint16_t num_domains = 0;
  std::uint16_t channels = 3;
  std::uint16_t height = 16;
  std::uint16_t width = 16;
  bool operator==(const DatasetInfo&) const = default;
  std::size_t pixels() const { return std::size_t{channels} * height * width; }
};

struct Dataset {
  DatasetInfo info;
  std::vector<LabeledSample> samples;
  bool operator==(const Dataset&) const = default;
};

struct DataConfig {
  std::size_t domains = 4;
  std::size_t classes = 5;
  std::size_t per_domain = 200;
  std::size_t image_size = 16;
  double skew = 1.0;
  // Every pair of domains differs by at least this much in some channel's
  // expected mean.
  double min_mean_shift = 0.3;
};

std::vector<std::string> validate(const DataConfig& cfg);

// Draws one DomainSpec per domain; deterministic in (cfg, seed).
std::vector<DomainSpec> make_domain_specs(const DataConfig& cfg, std::uint64_t seed);

// Renders class content once per (index, seed) and applies each domain's
// style to it, so sample i of every domain shares label and content.
Dataset generate_synthetic_domains(const DataConfig& cfg, std::uint64_t seed);
Dataset generate_with_specs(const DataConfig& cfg, std::span<const DomainSpec> specs, std::uint64_t seed);

// Stacks sample images into x[B,C,H,W].
Tensor to_batch(const DatasetInfo& info, std::span<const LabeledSample* const> samples);
std::vector<std::size_t> labels_of(std::span<const LabeledSample* const> samples);

using ClientAssignment = std::vector<std::vector<std::uint32_t>>;  // client -> sample ids

// skew = 0: balanced uniform split; skew = 1: every client holds one domain
// (clients cycle over the sorted domain list); in between, each sample goes
// to one of its domain's clients with probability `skew`, else to the least
// loaded client. Every sample is assigned exactly once.
ClientAssignment partition_to_clients(std::span<const LabeledSample> samples, std::size_t clients, double skew,
                                      Rng& rng);

struct SplitPlan {
  std::uint16_t target_domain = 0;
  ClientAssignment train;
  std::vector<std::uint32_t> test_ids;
};

// All target-domain samples become the test set; the remaining domains are
// partitioned over `clients` (one domain per client when the count matches
// and skew is 1).
SplitPlan leave_one_domain_out(const Dataset& dataset, std::uint16_t target, std::size_t clients, double skew,
                               std::uint64_t seed);

// Lookup of samples by id.
std::vector<const LabeledSample*> select(const Dataset& dataset, std::span<const std::uint32_t> ids);

// FDGD file: "FDGD", version u16, samples u32, classes u16, domains u16, C u16,
// H u16, W u16, then per sample: id u32, domain u16, label u16, C*H*W f32.
inline constexpr std::uint16_t kFormatVersion = 1;
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Sample-at-a-time reader; keeps only one record in memory.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path);
  const DatasetInfo& info() const { return info_; }
  std::uint32_t count() const { return count_; }
  std::optional<LabeledSample> next();

 private:
  std::ifstream in_;
  DatasetInfo info_;
  std::uint32_t count_ = 0;
  std::uint32_t read_ = 0;
  std::uint64_t offset_ = 0;
};

}  // namespace fedalign::data
