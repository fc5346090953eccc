#include "fedvi/nn/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fedvi::nn {

std::vector<Tensor> finite_diff_grad(const std::function<double(const ParamSet&)>& f, ParamSet& params,
                                     double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (auto& block : params) {
    Tensor g(block.value.shape(), 0.0);
    for (std::size_t i = 0; i < block.value.size(); ++i) {
      const double orig = block.value[i];
      block.value[i] = orig + eps;
      const double up = f(params);
      block.value[i] = orig - eps;
      const double down = f(params);
      block.value[i] = orig;
      g[i] = (up - down) / (2.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double max_relative_error(const Tensor& a, const Tensor& b, double ignore_below, double floor) {
  if (a.shape() != b.shape()) throw ShapeError("max_relative_error: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double mag = std::max(std::abs(a[i]), std::abs(b[i]));
    if (mag <= ignore_below) continue;
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(mag, floor));
  }
  return worst;
}

}  // namespace fedvi::nn
