#pragma once

// The FedVI network: embedding MLP, support/query split over the batch,
// global/local split over features, a posterior constructor that maps the
// unlabeled support set to q(beta), and the merged global + local classifier.

#include <span>
#include <vector>

#include "fedvi/datagen.hpp"
#include "fedvi/distributions.hpp"
#include "fedvi/nn/autograd.hpp"
#include "fedvi/nn/params.hpp"
#include "fedvi/rng.hpp"

namespace fedvi::model {

struct ArchConfig {
  std::size_t input_dim = 16;
  std::vector<std::size_t> embed_widths{32, 20};  // last entry is the representation size d
  std::size_t local_dim = 4;                      // L; global features G = d - L come first
  std::size_t num_classes = 5;
  std::vector<std::size_t> posterior_widths{256, 256};
  double support_fraction = 0.5;
  double mean_damp = 0.1;
  double logscale_damp = 0.01;
  double scale_floor = 1e-5;
  double dropout = 0.0;
  /// Multiplier on the Glorot range of the posterior constructor's output layer.
  double post_out_init_scale = 0.5;

  std::size_t rep_dim() const { return embed_widths.empty() ? 0 : embed_widths.back(); }
  std::size_t global_dim() const { return rep_dim() - local_dim; }
  std::size_t beta_dim() const { return local_dim * num_classes; }
  std::size_t posterior_out_width() const { return (2 * local_dim + 1) * num_classes; }
  /// Standard deviation of the local prior r(beta).
  double prior_scale() const { return dist::glorot_scale(local_dim, num_classes); }
  dist::DiagGaussian prior() const { return dist::DiagGaussian::isotropic(beta_dim(), prior_scale()); }

  void validate() const;
  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// theta = embedding ("embed.*") ∪ posterior constructor ("post.*") ∪ global
/// classifier ("cls.w" [G×|Y|], "cls.b" [|Y|]).
struct FedVIParams {
  ArchConfig arch;
  nn::ParamSet blocks;

  const nn::Tensor& posterior_output_bias() const;
};

FedVIParams init_params(const ArchConfig& arch, Rng& rng);

/// Throws std::invalid_argument if block names or shapes disagree with arch.
void check_layout(const FedVIParams& params);

struct PosteriorStats {
  dist::DiagGaussian q;
  std::vector<double> b_beta;
};

// ---- tape-level building blocks ------------------------------------------

struct BoundParams {
  std::vector<nn::Var> embed_w, embed_b, post_w, post_b;
  nn::Var cls_w, cls_b;
};

/// Binds every block; trainable blocks receive gradients on backward().
BoundParams bind(nn::Tape& tape, FedVIParams& params);
/// Binds copies of the blocks as constants.
BoundParams bind_const(nn::Tape& tape, const FedVIParams& params);

/// Inverted dropout; a null rng disables it.
struct DropoutSpec {
  double rate = 0.0;
  Rng* rng = nullptr;
};

nn::Var embed(const BoundParams& p, nn::Var x, const DropoutSpec& dropout = {});

struct FeatureSplit {
  nn::Var global;
  nn::Var local;
};
FeatureSplit split_features(nn::Var rep, std::size_t global_dim);

struct PosteriorVars {
  nn::Var mean, scale, b_beta;
};
PosteriorVars construct_posterior(const BoundParams& p, const ArchConfig& arch, nn::Var support_global);

nn::Var predict_logits(nn::Var cls_w, nn::Var b_global, nn::Var beta, nn::Var b_beta, nn::Var query_global,
                       nn::Var query_local, const ArchConfig& arch);

// ---- tensor-level conveniences -------------------------------------------

struct SupportQuery {
  std::vector<std::size_t> support, query;
};
/// support = first floor(fraction·B) rows, query = the rest.
SupportQuery split_support_query(std::size_t batch_size, double support_fraction);

nn::Tensor embed(const FedVIParams& params, const nn::Tensor& x);
std::pair<nn::Tensor, nn::Tensor> split_features(const nn::Tensor& rep, std::size_t global_dim);
PosteriorStats construct_posterior(const FedVIParams& params, const nn::Tensor& support_global);
nn::Tensor predict_logits(const nn::Tensor& cls_w, const nn::Tensor& b_global, std::span<const double> beta,
                          std::span<const double> b_beta, const nn::Tensor& query_global,
                          const nn::Tensor& query_local, const ArchConfig& arch);

// ---- losses --------------------------------------------------------------

struct LossParts {
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  double kl_weight = 0.0;
};

/// Per-minibatch FedVI loss: query NLL + (tau / B) · KL[q(beta | support), r].
/// Support labels are never read. A non-null `dropout_rng` selects training
/// mode (dropout active). With `compute_grad` the blocks' grads are overwritten.
LossParts minibatch_loss(FedVIParams& params, const data::Batch& batch, double tau, std::span<const double> noise,
                         Rng* dropout_rng = nullptr, bool compute_grad = true);
LossParts minibatch_loss(const FedVIParams& params, const data::Batch& batch, double tau,
                         std::span<const double> noise);

/// FedAvg objective: NLL of the global classifier over the whole batch.
double global_only_loss(FedVIParams& params, const data::Batch& batch, Rng* dropout_rng = nullptr,
                        bool compute_grad = true);

// ---- prediction ----------------------------------------------------------

struct QueryPredictions {
  std::vector<std::size_t> query;  // row indices within the batch
  std::vector<int> predicted;
};

/// FedVI evaluation path: posterior from the batch's own support rows, beta
/// set to the posterior mean, predictions on the query rows.
QueryPredictions predict_query(const FedVIParams& params, const nn::Tensor& x);
std::vector<int> predict_global(const FedVIParams& params, const nn::Tensor& x);

}  // namespace fedvi::model
