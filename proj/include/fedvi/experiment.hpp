#pragma once

// Experiment orchestration behind the command-line tool: dataset generation,
// training with persisted metrics, the tau sweep, the bound report and
// evaluation of saved parameters.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedvi/bounds.hpp"
#include "fedvi/config.hpp"
#include "fedvi/datagen.hpp"
#include "fedvi/federation.hpp"
#include "fedvi/model.hpp"

namespace fedvi::exp {

class ParamsIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class MalformedParamsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class MetricsSchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class OutputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kParamsFormatVersion = 1;
inline constexpr const char* kMetricsHeader = "round,loss,part_acc,nonpart_acc,kl_mean,timestamp";

/// Versioned binary of named parameter blocks; `provenance` is stored verbatim
/// in the JSON header next to the architecture.
void save_params(const model::FedVIParams& params, const std::filesystem::path& path,
                 const std::string& provenance = "{}");
model::FedVIParams load_params(const std::filesystem::path& path);

std::string arch_json(const model::ArchConfig& arch);

struct MetricsRow {
  std::size_t round = 0;
  double loss = 0.0;
  double part_acc = 0.0;
  double nonpart_acc = 0.0;
  double kl_mean = 0.0;
  std::uint64_t timestamp = 0;  // cumulative client steps: a logical clock
};

std::vector<MetricsRow> metrics_rows(std::span<const fed::RoundReport> reports);
/// `#`-prefixed reproducibility lines, the header row, then one row per entry.
std::string metrics_csv(std::span<const MetricsRow> rows, const std::vector<std::string>& preamble);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

/// "key = value  (source)" lines describing the resolved configuration.
std::vector<std::string> provenance_lines(const config::ExperimentConfig& cfg);
std::string config_json(const config::ExperimentConfig& cfg);

/// Loads `cfg.dataset` or generates from the synthetic generator.
data::FederatedDataset obtain_dataset(const config::ExperimentConfig& cfg);

std::filesystem::path cmd_generate(const config::ExperimentConfig& cfg);

struct TrainOutcome {
  fed::TrainingResult result;
  std::filesystem::path metrics, params, summary;
};
TrainOutcome cmd_train(const config::ExperimentConfig& cfg);
/// Training on an already materialised dataset, writing into `out_dir`.
TrainOutcome train_and_write(const config::ExperimentConfig& cfg, const data::FederatedDataset& ds,
                             const std::filesystem::path& out_dir);

struct AblationRow {
  double tau = 0.0;
  double part_acc = 0.0;
  double nonpart_acc = 0.0;
  double gap = 0.0;
  std::uint64_t train_seed = 0;
  std::string error;  // empty on success
};

/// Training seed used for one tau of the sweep.
std::uint64_t ablation_seed(std::uint64_t seed, double tau);

/// One training run per tau (0 added when absent) on a shared dataset; rows
/// sorted by tau. A failing run is recorded and the sweep continues.
std::vector<AblationRow> run_ablation(const config::ExperimentConfig& cfg, std::vector<double> taus);
std::string ablation_csv(std::span<const AblationRow> rows, const std::vector<std::string>& preamble);

struct BoundReport {
  bounds::BoundEvaluation eval;
  bounds::SlackEstimate slack;
  double eta = 0.0, delta = 0.0;
  std::optional<double> holding_fraction;
  std::size_t trials = 0;
};
BoundReport compute_bound(const config::ExperimentConfig& cfg, const model::FedVIParams& params);
BoundReport cmd_bound(const config::ExperimentConfig& cfg, const std::filesystem::path& params_path);
std::string bound_report_text(const BoundReport& r);
std::string bound_report_csv(const BoundReport& r);

struct EvalOutcome {
  double part_acc = 0.0;
  double nonpart_acc = 0.0;
  std::size_t excluded = 0;
};
EvalOutcome cmd_eval(const config::ExperimentConfig& cfg, const std::filesystem::path& params_path);

}  // namespace fedvi::exp
