#pragma once

// Stateless cross-device rounds: cohort sampling, local SGD on copies of the
// global model, example-weighted pseudo-gradient aggregation and a server
// momentum step.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedvi/datagen.hpp"
#include "fedvi/model.hpp"
#include "fedvi/nn/params.hpp"
#include "fedvi/rng.hpp"

namespace fedvi::fed {

enum class Algorithm { FedVI, FedAvg };

std::string to_string(Algorithm a);
/// Accepts "fedvi" or "fedavg"; throws std::invalid_argument otherwise.
Algorithm parse_algorithm(const std::string& s);

struct TrainConfig {
  std::size_t rounds = 200;
  std::size_t cohort_size = 8;
  double client_lr = 0.02;
  double server_lr = 1.0;
  double server_momentum = 0.9;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  double tau = 0.0;
  double gamma = 0.0;
  Algorithm algorithm = Algorithm::FedVI;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  /// Worker threads for client updates within a round; results do not depend on it.
  std::size_t threads = 1;
  /// Number of trailing evaluated rounds averaged in the summary.
  std::size_t summary_window = 100;

  void validate(std::size_t participating_clients) const;
};

struct ServerState {
  model::FedVIParams params;
  nn::ParamSet momentum;
  std::size_t round = 0;

  static ServerState start(model::FedVIParams params);
};

struct ClientUpdate {
  nn::ParamSet delta;  // initial − final
  double weight = 0.0; // training example count
  double mean_loss = 0.0;
  double mean_kl = 0.0;
  std::size_t steps = 0;
  bool skipped = false;  // fewer than two training examples
};

/// One local optimisation step, reported before the parameters move.
struct StepRecord {
  std::size_t round = 0;
  std::size_t client = 0;
  const model::FedVIParams* params = nullptr;
  std::span<const std::size_t> rows;
  std::span<const double> noise;
  double loss = 0.0;
  double kl = 0.0;
};

struct RunHooks {
  /// Called with the dataset index of every client handed to client_update.
  std::function<void(std::size_t client)> on_client_update;
  /// Called for every local step. Invocations are serialised, but with
  /// threads > 1 their order across clients is unspecified.
  std::function<void(const StepRecord&)> on_step;
};

std::vector<std::size_t> sample_cohort(std::span<const std::size_t> ids, std::size_t m, Rng& rng);

/// Index batches for one epoch over the first `n` rows: reshuffled, chunks of
/// at most `batch_size`, a trailing chunk shorter than two rows dropped.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng);

ClientUpdate client_update(const model::FedVIParams& global, const data::ClientDataset& client,
                           const TrainConfig& cfg, Rng& rng, std::size_t round = 0, std::size_t client_index = 0,
                           const RunHooks* hooks = nullptr);

void server_apply(ServerState& state, std::span<const nn::ParamSet> deltas, std::span<const double> weights,
                  const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0.0;  // NaN when no client could be evaluated
  double weight = 0.0;
  std::size_t excluded = 0;
};

/// Test-set evaluation split into balanced batches of at most `batch_size`
/// rows (each at least two). Accuracy is weighted by test-set size.
double client_accuracy(const model::FedVIParams& params, const data::ClientDataset& client, Algorithm algorithm,
                       std::size_t batch_size);
EvalResult evaluate(const model::FedVIParams& params, const data::FederatedDataset& ds,
                    std::span<const std::size_t> clients, Algorithm algorithm, std::size_t batch_size);

struct RoundReport {
  std::size_t round = 0;  // 1-based
  std::vector<std::string> cohort;
  double mean_loss = 0.0;
  double mean_kl = 0.0;
  bool evaluated = false;
  double part_acc = 0.0;
  double nonpart_acc = 0.0;  // NaN without holdout clients
  std::size_t excluded = 0;
  std::uint64_t client_steps = 0;  // cumulative over the run
  double seconds = 0.0;
};

struct TrainingSummary {
  std::size_t window = 0;  // evaluated rounds averaged
  double part_acc = 0.0;
  double nonpart_acc = 0.0;
  double gap = 0.0;  // part_acc − nonpart_acc
};

struct TrainingResult {
  std::vector<RoundReport> reports;
  ServerState state;
  TrainingSummary summary;
};

std::vector<std::size_t> participating_ids(const data::FederatedDataset& ds);
std::vector<std::size_t> holdout_ids(const data::FederatedDataset& ds);

TrainingSummary summarize(std::span<const RoundReport> reports, std::size_t window);

/// Fresh parameters drawn from the run's init stream.
model::FedVIParams initial_params(const model::ArchConfig& arch, std::uint64_t seed);

TrainingResult run_training(const TrainConfig& cfg, const model::ArchConfig& arch, const data::FederatedDataset& ds,
                            const RunHooks& hooks = {});
/// Same loop from a caller-supplied starting point.
TrainingResult run_training(const TrainConfig& cfg, ServerState start, const data::FederatedDataset& ds,
                            const RunHooks& hooks = {});

}  // namespace fedvi::fed
