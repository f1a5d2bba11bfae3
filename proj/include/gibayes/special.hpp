#pragma once

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "autodiff.hpp"

namespace gibayes {

inline Var lgamma(const Var& x) {
  for (double v : x.value().data())
    if (!(v > 0.0)) throw DomainError("lgamma needs a positive argument, got " + std::to_string(v));
  return detail::unary(
      x, [](double v) { return std::lgamma(v); }, [](double v, double) { return boost::math::digamma(v); });
}

inline Var digamma(const Var& x) {
  for (double v : x.value().data())
    if (!(v > 0.0)) throw DomainError("digamma needs a positive argument, got " + std::to_string(v));
  return detail::unary(
      x, [](double v) { return boost::math::digamma(v); }, [](double v, double) { return boost::math::trigamma(v); });
}

/// log Γ_m(a) = m(m−1)/4 log π + Σ_{j=1..m} log Γ(a + (1−j)/2).
inline Var lmvgamma(const Var& a, std::size_t m) {
  Var out(Tensor::scalar(static_cast<double>(m * (m - 1)) / 4.0 * std::log(std::numbers::pi)));
  for (std::size_t j = 1; j <= m; ++j) out = out + lgamma(a + (1.0 - static_cast<double>(j)) / 2.0);
  return out;
}

}  // namespace gibayes
