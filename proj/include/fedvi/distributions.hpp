#pragma once

#include <span>
#include <vector>

#include "fedvi/nn/autograd.hpp"
#include "fedvi/rng.hpp"

namespace fedvi::dist {

/// Diagonal Gaussian; `scale` holds standard deviations, not variances.
class DiagGaussian {
 public:
  DiagGaussian(std::vector<double> mean, std::vector<double> scale);
  /// N(0, sigma^2 I_m).
  static DiagGaussian isotropic(std::size_t m, double sigma);

  std::size_t dim() const { return mean_.size(); }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& scale() const { return scale_; }

  double log_density(std::span<const double> x) const;

  friend bool operator==(const DiagGaussian&, const DiagGaussian&) = default;

 private:
  std::vector<double> mean_;
  std::vector<double> scale_;
};

double kl_diag(const DiagGaussian& q, const DiagGaussian& p);

/// KL[N(mean, diag(scale^2)) || p] recorded on the tape, differentiable in
/// mean and scale.
nn::Var kl_diag(nn::Var mean, nn::Var scale, const DiagGaussian& p);

std::vector<double> sample_reparam(const DiagGaussian& q, std::span<const double> noise);
/// mean + scale ⊙ noise; gradients flow to mean and scale.
nn::Var sample_reparam(nn::Var mean, nn::Var scale, std::span<const double> noise);

double glorot_scale(std::size_t fan_in, std::size_t fan_out);

/// (1/n) Σ [log q(x) − log p(x)] over n reparameterized draws x ~ q.
double mc_kl_estimate(const DiagGaussian& q, const DiagGaussian& p, std::size_t n, Rng& rng);

struct McEstimate {
  double mean;
  double std_error;
};
/// Same estimator, also reporting the standard error of the mean.
McEstimate mc_kl_estimate_with_error(const DiagGaussian& q, const DiagGaussian& p, std::size_t n, Rng& rng);

}  // namespace fedvi::dist
