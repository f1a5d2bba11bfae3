#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "autodiff.hpp"

namespace gibayes {

using ScalarFunction = std::function<Var(const std::vector<Var>&)>;

/// Compares reverse-mode gradients of a scalar function against central
/// differences (absolute step h per coordinate) and returns the worst
/// relative error. The denominator is floored at 1e-4 × max(1, max|numeric|)
/// so coordinates whose gradient is near zero are measured absolutely.
/// Returns NaN when f is not finite at x.
inline double grad_check(const ScalarFunction& f, const std::vector<Tensor>& x, double h = 1e-5) {
  std::vector<Var> params;
  params.reserve(x.size());
  for (const auto& t : x) params.push_back(Var::param(t));
  const Var y = f(params);
  if (!std::isfinite(y.item())) return std::numeric_limits<double>::quiet_NaN();
  backward(y);

  auto eval = [&](const std::vector<Tensor>& pt) {
    std::vector<Var> vs;
    vs.reserve(pt.size());
    for (const auto& t : pt) vs.push_back(Var::constant(t));
    return f(vs).item();
  };

  std::vector<Tensor> analytic, numeric;
  double scale = 1.0;
  std::vector<Tensor> pt = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    analytic.push_back(params[k].grad());
    Tensor num(x[k].shape());
    for (std::size_t i = 0; i < x[k].size(); ++i) {
      const double orig = pt[k][i];
      pt[k][i] = orig + h;
      const double fp = eval(pt);
      pt[k][i] = orig - h;
      const double fm = eval(pt);
      pt[k][i] = orig;
      num[i] = (fp - fm) / (2.0 * h);
      if (!std::isfinite(num[i])) return std::numeric_limits<double>::quiet_NaN();
      scale = std::max(scale, std::abs(num[i]));
    }
    numeric.push_back(std::move(num));
  }
  double worst = 0.0;
  const double floor = 1e-4 * scale;
  for (std::size_t k = 0; k < x.size(); ++k)
    for (std::size_t i = 0; i < x[k].size(); ++i) {
      const double a = analytic[k][i], n = numeric[k][i];
      const double denom = std::max({std::abs(a), std::abs(n), floor});
      worst = std::max(worst, std::abs(a - n) / denom);
    }
  return worst;
}

}  // namespace gibayes
