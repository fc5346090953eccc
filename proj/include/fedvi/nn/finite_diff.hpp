#pragma once

#include <functional>
#include <vector>

#include "fedvi/nn/params.hpp"

namespace fedvi::nn {

/// Central-difference gradient of a scalar function of `params`, one tensor
/// per block. Parameters are perturbed in place and restored afterwards.
std::vector<Tensor> finite_diff_grad(const std::function<double(const ParamSet&)>& f, ParamSet& params,
                                     double eps);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor) over coordinates where
/// max(|a_i|, |b_i|) exceeds `ignore_below`.
double max_relative_error(const Tensor& a, const Tensor& b, double ignore_below = 0.0, double floor = 1e-12);

}  // namespace fedvi::nn
