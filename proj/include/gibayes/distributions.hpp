#pragma once

// Log-densities and reparameterised samplers for Gaussian, Gamma, Wishart
// and inverse-Wishart distributions. Wishart degrees of freedom may be real.

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <numbers>

#include "linalg.hpp"
#include "random.hpp"
#include "special.hpp"

namespace gibayes {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

namespace detail {

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw DomainError(std::string(what) + " contains non-finite values");
}

inline void require_positive(const Tensor& t, const char* what) {
  for (double v : t.data())
    if (!(v > 0.0) || !std::isfinite(v)) throw DomainError(std::string(what) + " must be finite and positive");
}

}  // namespace detail

/// Gaussian with covariance L Lᵀ. A matrix-valued x holds one draw per column,
/// all sharing the covariance.
struct MvnChol {
  Var mean;
  Var cov_chol;
};

inline Var mvn_logpdf(const Var& x, const MvnChol& d) {
  detail::require_finite(x.value(), "mvn_logpdf input");
  const std::size_t n = d.cov_chol.rows();
  Var xm = x.value().rank() == 1 ? reshape(x, {x.size(), 1}) : x;
  Var mu = d.mean.value().rank() == 1 ? reshape(d.mean, {d.mean.size(), 1}) : d.mean;
  if (xm.rows() != n) throw ShapeError("mvn_logpdf: x has " + shape_str(x.shape()) + ", covariance is " + std::to_string(n));
  const double k = static_cast<double>(xm.cols());
  Var z = triangular_solve(d.cov_chol, xm - mu);
  return scale(sum_squares(z) + k * logdet_from_chol(d.cov_chol), -0.5) - 0.5 * k * static_cast<double>(n) * kLog2Pi;
}

inline Var mvn_rsample(const MvnChol& d, const Tensor& eps) {
  const Var e = Var::constant(eps.rank() == 1 ? eps.reshaped({eps.size(), 1}) : eps);
  Var s = matmul(d.cov_chol, e);
  if (d.mean.value().rank() == 1) {
    s = s + reshape(d.mean, {d.mean.size(), 1});
    return eps.rank() == 1 ? reshape(s, {eps.size()}) : s;
  }
  return s + d.mean;
}

/// Elementwise log N(x | mu, var), summed.
inline Var normal_logpdf_sum(const Var& x, const Var& mu, const Var& var) {
  const Var terms = square(x - mu) / var + log(var);
  return scale(sum(terms), -0.5) - 0.5 * static_cast<double>(terms.size()) * kLog2Pi;
}

/// Σ KL(N(mu, σ²) ‖ N(0, prior_var)) over all entries.
inline Var kl_normal(const Var& mu, const Var& log_sigma, const Var& prior_var) {
  const Var var = exp(scale(log_sigma, 2.0));
  const Var t = (var + square(mu)) / prior_var + log(prior_var) - scale(log_sigma, 2.0) - 1.0;
  return scale(sum(t), 0.5);
}

/// Gamma(shape α, rate β).
struct GammaDist {
  Var shape;
  Var rate;
};

inline Var gamma_logpdf(const Var& s, const GammaDist& d) {
  detail::require_positive(d.shape.value(), "gamma shape");
  detail::require_positive(d.rate.value(), "gamma rate");
  detail::require_positive(s.value(), "gamma argument");
  const Var& a = d.shape;
  const Var& b = d.rate;
  return sum(a * log(b) - lgamma(a) + (a - 1.0) * log(s) - b * s);
}

/// Draw from Gamma(α, 1) with gradient wrt α by implicit reparameterisation,
/// ∂g/∂α = −(∂P(α, g)/∂α) / p(g; α), where P is the regularised lower
/// incomplete gamma function and ∂P/∂α is a central difference.
inline Var standard_gamma_rsample(const Var& alpha, NoiseSource& noise) {
  detail::require_positive(alpha.value(), "gamma shape");
  Tensor g(alpha.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = noise.standard_gamma(alpha.value()[i]);
  return Var::from_op(std::move(g), {alpha}, [](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor grad(p.value.shape());
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double a = p.value[i];
      const double x = n.value[i];
      const double h = 1e-5 * a;
      const double dP = (boost::math::gamma_p(a + h, x) - boost::math::gamma_p(a - h, x)) / (2.0 * h);
      const double log_pdf = (a - 1.0) * std::log(x) - x - std::lgamma(a);
      const double dg = -dP / std::exp(log_pdf);
      grad[i] = std::isfinite(dg) ? n.grad[i] * dg : 0.0;
    }
    p.accumulate(std::move(grad));
  });
}

inline Var gamma_rsample(const GammaDist& d, NoiseSource& noise) {
  detail::require_positive(d.rate.value(), "gamma rate");
  return standard_gamma_rsample(d.shape, noise) / d.rate;
}

/// KL(q ‖ p) between Gamma distributions in shape/rate form.
inline Var kl_gamma(const GammaDist& q, const GammaDist& p) {
  detail::require_positive(q.shape.value(), "gamma shape");
  detail::require_positive(q.rate.value(), "gamma rate");
  detail::require_positive(p.shape.value(), "gamma shape");
  detail::require_positive(p.rate.value(), "gamma rate");
  const Var &aq = q.shape, &bq = q.rate, &ap = p.shape, &bp = p.rate;
  return sum((aq - ap) * digamma(aq) - lgamma(aq) + lgamma(ap) + ap * (log(bq) - log(bp)) + aq * (bp - bq) / bq);
}

/// Wishart(Ψ, ν) with Ψ = A Aᵀ, A = scale_chol lower-triangular; ν real.
struct BartlettWishart {
  Var scale_chol;
  Var dof;
};

namespace detail {

inline void require_dof(const Var& dof, std::size_t m) {
  const double nu = dof.item();
  if (!(nu > static_cast<double>(m) - 1.0) || !std::isfinite(nu))
    throw DomainError("Wishart degrees of freedom " + std::to_string(nu) + " must exceed m-1 = " +
                      std::to_string(static_cast<double>(m) - 1.0));
}

// Lower Bartlett factor: T_jj² ~ Gamma((ν−j+1)/2, rate 1/2) (1-based j),
// T_ij ~ N(0,1) below the diagonal.
inline Var bartlett_factor_t(const Var& dof, std::size_t m, NoiseSource& noise) {
  Tensor off = noise.normal({m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) off(i, j) = 0.0;
  std::vector<Var> diag_entries;
  diag_entries.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    const Var a = scale(dof - static_cast<double>(j), 0.5);
    diag_entries.push_back(reshape(sqrt(scale(standard_gamma_rsample(a, noise), 2.0)), {1}));
  }
  return Var::constant(off) + diag_embed(concat(diag_entries, 0));
}

// log Wishart density from its pieces: log|S|, tr(Ψ⁻¹S), log|Ψ|.
inline Var wishart_log_density(const Var& logdet_s, const Var& trace_term, const Var& logdet_scale, const Var& dof,
                               std::size_t m) {
  const double md = static_cast<double>(m);
  return scale(dof - (md + 1.0), 0.5) * logdet_s - scale(trace_term, 0.5) - scale(dof, 0.5 * md * std::log(2.0)) -
         scale(dof, 0.5) * logdet_scale - lmvgamma(scale(dof, 0.5), m);
}

}  // namespace detail

/// Cholesky factor (A·T) of a Bartlett draw; the draw itself is (AT)(AT)ᵀ.
inline Var bartlett_chol_sample(const BartlettWishart& w, NoiseSource& noise) {
  const std::size_t m = w.scale_chol.rows();
  detail::require_dof(w.dof, m);
  return matmul(w.scale_chol, detail::bartlett_factor_t(w.dof, m, noise));
}

inline Var bartlett_sample(const BartlettWishart& w, NoiseSource& noise) {
  const Var c = bartlett_chol_sample(w, noise);
  return matmul(c, transpose(c));
}

/// ((ν−m−1)/2)log|S| − ½tr(Ψ⁻¹S) − (mν/2)log 2 − (ν/2)log|Ψ| − log Γ_m(ν/2).
inline Var wishart_logpdf(const Var& s, const BartlettWishart& w) {
  const std::size_t m = w.scale_chol.rows();
  detail::require_dof(w.dof, m);
  detail::require_square(s.value(), "wishart_logpdf");
  Var ls;
  try {
    ls = cholesky(s);
  } catch (const NotPositiveDefinite&) {
    throw DomainError("wishart_logpdf argument is not positive definite");
  }
  const Var tr = sum_squares(triangular_solve(w.scale_chol, ls));
  return detail::wishart_log_density(logdet_from_chol(ls), tr, logdet_from_chol(w.scale_chol), w.dof, m);
}

/// Inverse-Wishart(Ψ, ν) density of X, Ψ = scale_chol·scale_cholᵀ:
/// (ν/2)log|Ψ| − (νm/2)log 2 − log Γ_m(ν/2) − ((ν+m+1)/2)log|X| − ½tr(ΨX⁻¹).
inline Var inverse_wishart_logpdf(const Var& x, const Var& scale_chol, const Var& dof) {
  const std::size_t m = scale_chol.rows();
  detail::require_dof(dof, m);
  detail::require_square(x.value(), "inverse_wishart_logpdf");
  Var lx;
  try {
    lx = cholesky(x);
  } catch (const NotPositiveDefinite&) {
    throw DomainError("inverse_wishart_logpdf argument is not positive definite");
  }
  const double md = static_cast<double>(m);
  const Var tr = sum_squares(triangular_solve(lx, scale_chol));
  return scale(dof, 0.5) * logdet_from_chol(scale_chol) - scale(dof, 0.5 * md * std::log(2.0)) -
         lmvgamma(scale(dof, 0.5), m) - scale(dof + (md + 1.0), 0.5) * logdet_from_chol(lx) - scale(tr, 0.5);
}

/// Inverse-Wishart draw: invert a Wishart(Ψ⁻¹, ν) draw. Ψ⁻¹ is never formed;
/// C⁻ᵀ (C = chol Ψ) serves as its square root in the Bartlett product.
inline Var inverse_wishart_sample(const Var& scale_chol, const Var& dof, NoiseSource& noise) {
  const std::size_t m = scale_chol.rows();
  detail::require_dof(dof, m);
  const Var t = detail::bartlett_factor_t(dof, m, noise);
  // X = (C⁻ᵀ T T ᵀ C⁻¹)⁻¹ = C T⁻ᵀ T⁻¹ Cᵀ = (C T⁻ᵀ)(C T⁻ᵀ)ᵀ
  const Var ct = transpose(triangular_solve(t, transpose(scale_chol)));
  return matmul(ct, transpose(ct));
}

}  // namespace gibayes
