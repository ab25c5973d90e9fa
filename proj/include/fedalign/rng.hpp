// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace fedalign {

// Mixes a master seed with a path of stream identifiers (client id, round,
// purpose tag, ...) into an independent 64-bit seed. Pure function.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path);

// Stream tags for derive_seed; keep values stable, they define reproducibility.
enum class Stream : std::uint64_t {
  ModelInit = 1,
  ClientSelect = 2,
  ClientTrain = 3,
  StatsUpload = 4,
  BankCluster = 5,
  DataGenerate = 6,
  DataPartition = 7,
  Discriminator = 8,
};

inline std::uint64_t stream_id(Stream s) { return static_cast<std::uint64_t>(s); }

// Seeded random source. Every draw goes through this class so the sequence of
// draws is a pure function of the seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform();                      // [0, 1)
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t index(std::size_t n);      // uniform in [0, n), n > 0
  double beta(double a, double b);       // Beta(a, b) via two gamma draws
  std::size_t categorical(std::span<const double> weights);

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = index(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fedalign
