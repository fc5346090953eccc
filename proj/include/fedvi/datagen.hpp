#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedvi/nn/tensor.hpp"
#include "fedvi/rng.hpp"

namespace fedvi::data {

struct Batch {
  nn::Tensor x;
  std::vector<int> y;
};

struct ClientDataset {
  std::string client_id;
  nn::Tensor x;            // [n_k × d]
  std::vector<int> y;      // [n_k]
  std::size_t n_train = 0; // rows [0, n_train) train, [n_train, n_k) test

  std::size_t size() const { return y.size(); }
  std::size_t n_test() const { return size() - n_train; }
  std::size_t dim() const { return x.cols(); }
  Batch rows(std::span<const std::size_t> idx) const;
  Batch test_rows(std::size_t begin, std::size_t end) const;

  friend bool operator==(const ClientDataset&, const ClientDataset&) = default;
};

struct FederatedDataset {
  std::vector<ClientDataset> clients;
  std::size_t num_classes = 0;
  std::size_t holdout_count = 0;  // the first holdout_count clients never train

  std::size_t participating_count() const { return clients.size() - holdout_count; }
  bool is_holdout(std::size_t index) const { return index < holdout_count; }
  std::size_t input_dim() const { return clients.empty() ? 0 : clients.front().dim(); }
  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;

  friend bool operator==(const FederatedDataset&, const FederatedDataset&) = default;
};

struct GenConfig {
  std::size_t clients = 40;
  std::size_t holdout = 8;
  std::size_t n_min = 200;
  std::size_t n_max = 400;
  std::size_t input_dim = 16;
  std::size_t num_classes = 5;
  double sigma_beta = 2.0;
  double input_shift_scale = 1.0;
  /// Correlation in [0,1] between the client's input mean and the first
  /// input_dim coordinates of its flattened local effect. 0 draws them
  /// independently; marginals are N(0, input_shift_scale^2 I) either way.
  double shift_coupling = 0.0;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parameters of the generating process, retained for oracle use.
struct GroundTruth {
  nn::Tensor theta;                              // [d × |Y|]
  std::vector<nn::Tensor> betas;                 // per client [d × |Y|]
  std::vector<std::vector<double>> input_means;  // per client [d]
  std::vector<std::size_t> sizes;                // n_k

  std::size_t num_clients() const { return betas.size(); }
  std::size_t num_classes() const { return theta.cols(); }
  std::size_t input_dim() const { return theta.rows(); }
  /// softmax((theta + beta_k)ᵀ x)
  std::vector<double> class_probabilities(std::size_t k, std::span<const double> x) const;
  /// Fresh draw of n labelled examples from client k's generating process.
  Batch sample_client(std::size_t k, std::size_t n, Rng& rng) const;
};

struct SyntheticData {
  FederatedDataset dataset;
  GroundTruth truth;
};

SyntheticData generate_hierarchical(const GenConfig& cfg, Rng& rng);

class PartitionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dirichlet label-skew partition: each client draws class proportions from
/// Dirichlet(alpha · 1); every example of class c then goes to client k with
/// probability proportional to that client's weight on c. Each client gets at least one example.
FederatedDataset partition_dirichlet(const nn::Tensor& x, std::span<const int> y, std::size_t clients, double alpha,
                                     Rng& rng, double train_fraction = 0.8);

class DatasetIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class MalformedDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

std::string gen_config_json(const GenConfig& cfg);

/// Writes the binary dataset; when `provenance` is given also writes
/// `<path>.json` holding the generator configuration.
void save_dataset(const FederatedDataset& ds, const std::filesystem::path& path, const GenConfig* provenance = nullptr);
FederatedDataset load_dataset(const std::filesystem::path& path);

}  // namespace fedvi::data
