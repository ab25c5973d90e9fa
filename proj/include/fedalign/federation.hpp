// SPDX-License-Identifier: Apache-2.0
//
// Server round loop, client-side local training, weighted aggregation and
// the style-statistics exchange.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedalign/data.hpp"
#include "fedalign/losses.hpp"
#include "fedalign/mixstyle.hpp"
#include "fedalign/model.hpp"
#include "fedalign/numerics/optim.hpp"
#include "fedalign/transport.hpp"

namespace fedalign::federation {

enum class Algorithm { FedAlign, FedAvg, FedProx };

std::string to_string(Algorithm a);
std::optional<Algorithm> parse_algorithm(std::string_view name);

struct LocalConfig {
  Algorithm algorithm = Algorithm::FedAlign;
  std::size_t epochs = 3;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double tau = 0.1;
  mixstyle::MixConfig mix;
  bool adversarial = false;
  double lambda_adv = 0.1;
  std::size_t disc_hidden = 16;
  double mu_prox = 0.01;
};

struct FederationConfig {
  model::Architecture arch;
  LocalConfig local;
  std::size_t rounds = 10;
  double client_fraction = 1.0;
  double upload_ratio = 0.1;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

std::vector<std::string> validate(const FederationConfig& cfg);

// ceil(fraction * total) distinct ids, sorted ascending.
std::vector<std::uint32_t> select_clients(std::size_t total, double fraction, Rng& rng);

struct ClientState {
  std::uint32_t id = 0;
  std::vector<const data::LabeledSample*> samples;
  mixstyle::StyleBank bank;
  // Client-private; never uploaded.
  std::optional<losses::Discriminator> discriminator;

  std::size_t size() const { return samples.size(); }
};

// Global step numbering for the cosine schedule across all rounds.
struct StepWindow {
  numerics::LrSchedule schedule;
  std::uint64_t first_step = 0;
};

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);
// Schedule covering `rounds` rounds of `epochs` epochs over `samples` samples,
// positioned at the start of 1-based round `round`.
StepWindow step_window(std::size_t samples, const LocalConfig& cfg, std::size_t rounds, std::size_t round);

struct LocalResult {
  model::ModelParams params;
  losses::LossBreakdown mean_loss;
  std::size_t steps = 0;
};

// E epochs of minibatch Adam starting from theta; theta itself is untouched.
// Adam moments start fresh on every call.
LocalResult local_train(const model::Architecture& arch, ClientState& client, const model::ModelParams& theta,
                        const LocalConfig& cfg, const StepWindow& window, Rng& rng);

struct ClientUpdate {
  std::uint32_t client_id = 0;
  std::size_t samples = 0;
  model::ModelParams params;
};

// Sample-weighted parameter average, accumulated in client-id order as
// first + sum_k (n_k / N) * (theta_k - first).
model::ModelParams aggregate(std::span<const ClientUpdate> updates);

// Number of records a client with n samples uploads.
std::size_t upload_count(double ratio, std::size_t samples);

// Layer-1 statistics of ceil(r * n_k) distinct samples under theta.
std::vector<mixstyle::StyleStats> upload_stats(const model::Architecture& arch, const ClientState& client,
                                               const model::ModelParams& theta, double ratio, Rng& rng);

// Every pooled entry except those that came from the receiving client.
std::map<std::uint32_t, std::vector<mixstyle::StyleStats>> redistribute_stats(
    std::span<const mixstyle::StyleStats> pool, std::span<const std::uint32_t> clients);

struct RoundReport {
  std::size_t round = 0;
  std::vector<std::uint32_t> selected;
  std::vector<losses::LossBreakdown> client_loss;  // aligned with `selected`
  losses::LossBreakdown mean_loss;
  std::vector<double> accuracy;  // evaluator output after aggregation
  transport::ByteCounts bytes;   // cumulative through this round
  transport::ByteCounts round_bytes;
  std::size_t uploaded_stats = 0;
};

struct FederationResult {
  model::ModelParams params;
  std::vector<RoundReport> reports;
  std::vector<transport::Header> message_log;
};

using Evaluator = std::function<std::vector<double>(const model::ModelParams&)>;

// T rounds of select, broadcast, local training (in parallel across
// cfg.threads workers), aggregation and statistics exchange. Results do not
// depend on the worker count.
FederationResult run_federation(const FederationConfig& cfg,
                                std::span<const std::vector<const data::LabeledSample*>> client_data,
                                const Evaluator& evaluate);

// Seeds used for client k in round t, shared with the centralized oracle.
std::uint64_t client_train_seed(std::uint64_t seed, std::uint32_t client, std::size_t round);
std::uint64_t model_init_seed(std::uint64_t seed);

// Argmax accuracy with ties going to the lowest class index.
double accuracy(const model::Architecture& arch, const model::ModelParams& params,
                std::span<const data::LabeledSample* const> samples);

}  // namespace fedalign::federation
