#pragma once

// ELBO bookkeeping and the PAC-Bayes bound for the trained network.
//
// For the bound the global parameters are held at their trained values, so the
// hypothesis is the collection of local effects B^c = (beta_1..beta_c) and the
// prior is r(beta) for every client. Risks are per-datum means of the negative
// log-likelihood. Each client's logit bias b_beta is anchored to a reference
// dataset that is independent of the data the bound is evaluated on.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedvi/datagen.hpp"
#include "fedvi/distributions.hpp"
#include "fedvi/model.hpp"
#include "fedvi/rng.hpp"

namespace fedvi::bounds {

struct BatchPlan {
  std::size_t client = 0;
  std::vector<std::size_t> rows;
  std::vector<double> noise;
};

struct ElboReport {
  double expected_loss = 0.0;
  double global_reg = 0.0;
  std::vector<std::size_t> clients;  // order of first appearance in the plans
  /// Σ over the client's batches of KL[q, r] / B.
  std::vector<double> local_regs;
  double tau = 0.0;
  double gamma = 0.0;
  double total = 0.0;  // expected_loss + gamma·global_reg + tau·Σ local_regs
};

ElboReport elbo_components(const model::FedVIParams& params, const data::FederatedDataset& ds,
                           std::span<const BatchPlan> plans, double tau, double gamma = 0.0);

/// empirical_risk + (kl + ln(1/delta) + slack) / eta, with `slack` the
/// log-moment term alone.
double pacbayes_rhs(double empirical_risk, double kl, double eta, double delta, double slack);

struct PacBayesConfig {
  double eta = 1.0;
  double delta = 0.05;
  std::size_t prior_samples = 1000;     // draws of B^c from the prior
  std::size_t data_draws = 1000;        // datasets drawn from the generator
  std::size_t posterior_samples = 32;   // draws of B^c from q per risk estimate
  std::size_t true_risk_points = 10000; // fresh points for a true risk
};

/// The fixed part of the hypothesis: trained network plus per-client anchors.
struct BoundModel {
  const model::FedVIParams* params = nullptr;
  std::vector<std::vector<double>> b_beta;  // per client, length |Y|
};

/// Anchors each client's b_beta to the posterior constructor's output on all
/// rows of the corresponding reference client.
BoundModel anchor_model(const model::FedVIParams& params, const data::FederatedDataset& reference);

/// Network outputs for one client's points with the local branch factored out.
struct ClientFeatures {
  nn::Tensor base;   // [n × |Y|] global logits + b_global + anchored b_beta
  nn::Tensor local;  // [n × L]
  std::vector<int> y;
};
ClientFeatures client_features(const BoundModel& m, std::size_t client, const data::Batch& batch);

/// Σ over points of −log p(y | x, beta).
double gibbs_nll_sum(const ClientFeatures& f, std::span<const double> beta, std::size_t num_classes);

/// q_k from the posterior constructor over every row of x.
dist::DiagGaussian client_posterior(const model::FedVIParams& params, const nn::Tensor& x);

struct SlackOptions {
  double eta = 1.0;
  double delta = 0.05;
  std::size_t prior_samples = 1000;
  std::size_t data_draws = 1000;
  std::size_t true_risk_points = 10000;
  /// Evaluate the true risk on the drawn dataset itself, forcing a zero gap.
  bool reuse_sample_for_true_risk = false;
};

struct SlackEstimate {
  /// log((1/delta) · mean exp(eta · (true − empirical))); +inf on overflow.
  double value = 0.0;
  /// value − ln(1/delta), the term pacbayes_rhs expects.
  double log_moment = 0.0;
  bool finite = true;
  bool heavy_tail = false;
  double max_term_share = 0.0;
  std::string diagnostic;
};

SlackEstimate estimate_slack(const data::GroundTruth& truth, const BoundModel& m, const dist::DiagGaussian& prior,
                             const SlackOptions& opt, Rng& rng);

struct BoundEvaluation {
  double empirical_risk = 0.0;
  double kl = 0.0;        // Σ_k KL[q_k, r]
  double theta_kl = 0.0;  // always 0: the global parameters are a point estimate
  double rhs = 0.0;
  double true_risk = 0.0; // −log of the posterior-mixture predictive, per datum
};

/// Bound terms on one dataset drawn from the generator; `slack` is the log-moment term.
BoundEvaluation evaluate_bound(const data::GroundTruth& truth, const BoundModel& m,
                               std::span<const data::Batch> dataset, const PacBayesConfig& cfg, double slack,
                               Rng& rng);

/// One dataset per client with the generator's per-client sizes.
std::vector<data::Batch> draw_dataset(const data::GroundTruth& truth, Rng& rng);

struct BoundCheck {
  double holding_fraction = 1.0;
  std::vector<BoundEvaluation> trials;
};

/// Fraction of fresh datasets on which the true risk is at most the RHS.
BoundCheck bound_holds_check(const data::GroundTruth& truth, const BoundModel& m, const PacBayesConfig& cfg,
                             double slack, std::size_t trials, Rng& rng);

}  // namespace fedvi::bounds
