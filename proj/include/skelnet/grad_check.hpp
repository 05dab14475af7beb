#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "skelnet/autodiff.hpp"

namespace skelnet::ad {

/// Relative error with a floor on the denominator so that gradients near
/// zero are compared in absolute terms.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Compares the analytic gradient of a scalar function against central
/// differences (f(x+eps e_i) - f(x-eps e_i)) / 2 eps for every element of x.
inline GradCheckResult grad_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                                  double eps = 1e-5) {
  Var leaf = parameter(x);
  Var out = f(leaf);
  backward(out);
  const Tensor analytic = leaf.grad();

  GradCheckResult result;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(constant(probe)).value().item();
    probe[i] = orig - eps;
    const double down = f(constant(probe)).value().item();
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(analytic[i], numeric);
    if (err > result.max_relative_error || i == 0) {
      result.max_relative_error = std::max(result.max_relative_error, err);
      result.worst_index = i;
      result.analytic_at_worst = analytic[i];
      result.numeric_at_worst = numeric;
    }
  }
  return result;
}

}  // namespace skelnet::ad
