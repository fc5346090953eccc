#include "fedvi/distributions.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fedvi::dist {

namespace {

void require_dims(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                                std::to_string(b) + ")");
}

}  // namespace

DiagGaussian::DiagGaussian(std::vector<double> mean, std::vector<double> scale)
    : mean_(std::move(mean)), scale_(std::move(scale)) {
  require_dims(mean_.size(), scale_.size(), "DiagGaussian");
  for (double s : scale_)
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("DiagGaussian: scale must be positive and finite");
  for (double m : mean_)
    if (!std::isfinite(m)) throw std::invalid_argument("DiagGaussian: mean must be finite");
}

DiagGaussian DiagGaussian::isotropic(std::size_t m, double sigma) {
  return DiagGaussian(std::vector<double>(m, 0.0), std::vector<double>(m, sigma));
}

double DiagGaussian::log_density(std::span<const double> x) const {
  require_dims(x.size(), dim(), "log_density");
  const double log_2pi = std::log(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (std::size_t i = 0; i < dim(); ++i) {
    const double z = (x[i] - mean_[i]) / scale_[i];
    acc += z * z + 2.0 * std::log(scale_[i]) + log_2pi;
  }
  return -0.5 * acc;
}

double kl_diag(const DiagGaussian& q, const DiagGaussian& p) {
  require_dims(q.dim(), p.dim(), "kl_diag");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double qs = q.scale()[i], ps = p.scale()[i];
    const double dm = q.mean()[i] - p.mean()[i];
    kl += std::log(ps / qs) + (qs * qs + dm * dm) / (2.0 * ps * ps) - 0.5;
  }
  return kl;
}

nn::Var kl_diag(nn::Var mean, nn::Var scale, const DiagGaussian& p) {
  const nn::Tensor& mv = mean.value();
  const nn::Tensor& sv = scale.value();
  require_dims(mv.size(), p.dim(), "kl_diag");
  require_dims(sv.size(), p.dim(), "kl_diag");
  const DiagGaussian q(mv.storage(), sv.storage());
  const double kl = kl_diag(q, p);
  nn::Tape& t = *mean.tape();
  const nn::Var parents[] = {mean, scale};
  return t.record(nn::Tensor::scalar(kl), parents, [mean, scale, p](nn::Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const nn::Tensor& mv = t.value(mean.id());
    const nn::Tensor& sv = t.value(scale.id());
    if (nn::Tensor* gm = t.grad_sink(mean.id()))
      for (std::size_t i = 0; i < mv.size(); ++i) {
        const double ps = p.scale()[i];
        (*gm)[i] += g * (mv[i] - p.mean()[i]) / (ps * ps);
      }
    if (nn::Tensor* gs = t.grad_sink(scale.id()))
      for (std::size_t i = 0; i < sv.size(); ++i) {
        const double ps = p.scale()[i];
        (*gs)[i] += g * (sv[i] / (ps * ps) - 1.0 / sv[i]);
      }
  }, "kl_diag");
}

std::vector<double> sample_reparam(const DiagGaussian& q, std::span<const double> noise) {
  require_dims(noise.size(), q.dim(), "sample_reparam");
  std::vector<double> out(q.dim());
  for (std::size_t i = 0; i < q.dim(); ++i) out[i] = q.mean()[i] + q.scale()[i] * noise[i];
  return out;
}

nn::Var sample_reparam(nn::Var mean, nn::Var scale, std::span<const double> noise) {
  require_dims(mean.value().size(), noise.size(), "sample_reparam");
  require_dims(scale.value().size(), noise.size(), "sample_reparam");
  nn::Tape& t = *mean.tape();
  const nn::Var z = t.constant(nn::Tensor(mean.shape(), std::vector<double>(noise.begin(), noise.end())));
  return nn::add(mean, nn::mul(scale, z));
}

double glorot_scale(std::size_t fan_in, std::size_t fan_out) {
  if (fan_in == 0 || fan_out == 0) throw std::invalid_argument("glorot_scale: fans must be positive");
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

McEstimate mc_kl_estimate_with_error(const DiagGaussian& q, const DiagGaussian& p, std::size_t n, Rng& rng) {
  require_dims(q.dim(), p.dim(), "mc_kl_estimate");
  if (n == 0) throw std::invalid_argument("mc_kl_estimate: n must be positive");
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> noise(q.dim());
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    for (auto& z : noise) z = nd(rng);
    const auto x = sample_reparam(q, noise);
    const double r = q.log_density(x) - p.log_density(x);
    sum += r;
    sum_sq += r * r;
  }
  const double nn_ = static_cast<double>(n);
  const double mean = sum / nn_;
  const double var = n > 1 ? std::max(0.0, (sum_sq - nn_ * mean * mean) / (nn_ - 1.0)) : 0.0;
  return {mean, std::sqrt(var / nn_)};
}

double mc_kl_estimate(const DiagGaussian& q, const DiagGaussian& p, std::size_t n, Rng& rng) {
  return mc_kl_estimate_with_error(q, p, n, rng).mean;
}

}  // namespace fedvi::dist
