#pragma once

// Weight priors with optional learned hyper-posteriors. Each prior yields a
// scale S for a layer's weights, w_λ ~ N(0, S / fan_in), together with the
// hyperparameter term log P(hyper) − log Q(hyper) for the ELBO.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "distributions.hpp"

namespace gibayes {

enum class PriorKind { Standard, Neal, Scale, SpatialIW };

inline const char* prior_name(PriorKind k) {
  switch (k) {
    case PriorKind::Standard: return "standard";
    case PriorKind::Neal: return "neal";
    case PriorKind::Scale: return "scale";
    case PriorKind::SpatialIW: return "spatial_iw";
  }
  return "?";
}

inline PriorKind parse_prior(const std::string& s) {
  if (s == "standard") return PriorKind::Standard;
  if (s == "neal") return PriorKind::Neal;
  if (s == "scale") return PriorKind::Scale;
  if (s == "spatial_iw") return PriorKind::SpatialIW;
  throw ConfigError("unknown prior '" + s + "'");
}

struct NamedParam {
  std::string name;
  Var var;
};

/// Prior over one layer's weights.
///
/// Scale: s ~ Gamma(2, 2), Q(s) = Gamma(2+α, 2+β), stored as log(2+α), log(2+β).
/// SpatialIW: spatial precision L (m×m) with P(L) = IW((N+1)I, N+1),
/// Q(L) = IW((N+1)I + Ψ, N+1+ν); Ψ = B Bᵀ with B a free lower-triangular
/// matrix and ν = exp(log_nu).
struct PriorSpec {
  PriorKind kind = PriorKind::Neal;
  Var log_shape;  // Scale
  Var log_rate;
  Var psi_factor;  // SpatialIW
  Var log_nu;
  std::size_t spatial = 0;

  static PriorSpec standard() { return {PriorKind::Standard, {}, {}, {}, {}, 0}; }
  static PriorSpec neal() { return {PriorKind::Neal, {}, {}, {}, {}, 0}; }
  static PriorSpec scale_prior(double alpha = 0.0, double beta = 0.0) {
    if (!(2.0 + alpha > 0.0) || !(2.0 + beta > 0.0)) throw DomainError("scale prior needs 2+alpha > 0 and 2+beta > 0");
    return {PriorKind::Scale, Var::param(Tensor::scalar(std::log(2.0 + alpha))),
            Var::param(Tensor::scalar(std::log(2.0 + beta))), {}, {}, 0};
  }
  /// psi_init sets B = psi_init·I; nu_init ≥ 0 (0 gives ν exactly 0).
  static PriorSpec spatial_iw(std::size_t m, double psi_init = 1e-2, double nu_init = 1e-2) {
    if (m == 0) throw DomainError("spatial extent must be positive");
    if (nu_init < 0.0) throw DomainError("nu must be non-negative");
    Tensor b({m, m});
    for (std::size_t i = 0; i < m; ++i) b(i, i) = psi_init;
    return {PriorKind::SpatialIW, {}, {}, Var::param(std::move(b)),
            Var::param(Tensor::scalar(nu_init > 0.0 ? std::log(nu_init) : -std::numeric_limits<double>::infinity())), m};
  }

  std::vector<NamedParam> parameters(const std::string& prefix) const {
    switch (kind) {
      case PriorKind::Scale: return {{prefix + "log_shape", log_shape}, {prefix + "log_rate", log_rate}};
      case PriorKind::SpatialIW: return {{prefix + "psi_factor", psi_factor}, {prefix + "log_nu", log_nu}};
      default: return {};
    }
  }

  double alpha() const { return std::exp(log_shape.item()) - 2.0; }
  double beta() const { return std::exp(log_rate.item()) - 2.0; }
};

/// One draw of a layer's prior scale. For isotropic priors S = variance·I;
/// for SpatialIW S = I_channels ⊗ L⁻¹ with L = spatial_precision.
struct PriorScale {
  bool isotropic = true;
  Var variance;
  Var spatial_precision;
  std::size_t channels = 0;
  Var log_ratio{0.0};

  /// fan_in · S⁻¹ as a scalar (isotropic) multiple of the identity.
  Var precision_scalar(std::size_t fan_in) const { return static_cast<double>(fan_in) / variance; }

  /// fan_in · S⁻¹ as a dense matrix.
  Var precision_matrix(std::size_t fan_in) const {
    if (isotropic) return precision_scalar(fan_in) * Var::constant(Tensor::eye(fan_in));
    return scale(kron_identity(channels, spatial_precision), static_cast<double>(fan_in));
  }
};

namespace detail {

inline Var lower_part(const Var& b) {
  const std::size_t m = b.rows();
  Tensor mask({m, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask(i, j) = 1.0;
  return b * Var::constant(mask);
}

}  // namespace detail

/// Draws the scale of a layer with the given fan-in. SpatialIW needs fan_in to
/// be a multiple of the spatial extent (channel-major, space-minor weights).
inline PriorScale sample_scale(const PriorSpec& p, std::size_t fan_in, NoiseSource& noise, bool spatial_layer = false) {
  if (fan_in == 0) throw ShapeError("fan-in must be positive");
  PriorScale out;
  switch (p.kind) {
    case PriorKind::Standard:
      out.variance = Var(static_cast<double>(fan_in));
      return out;
    case PriorKind::Neal:
      out.variance = Var(1.0);
      return out;
    case PriorKind::Scale: {
      const GammaDist q{exp(p.log_shape), exp(p.log_rate)};
      const Var s = gamma_rsample(q, noise);
      out.variance = 1.0 / s;
      out.log_ratio = gamma_logpdf(s, {Var(2.0), Var(2.0)}) - gamma_logpdf(s, q);
      return out;
    }
    case PriorKind::SpatialIW: {
      if (!spatial_layer) throw ConfigError("SpatialIW prior applies only to convolutional layers");
      const std::size_t m = p.spatial;
      if (fan_in % m != 0)
        throw ShapeError("fan-in " + std::to_string(fan_in) + " is not a multiple of spatial extent " + std::to_string(m));
      const double n1 = static_cast<double>(fan_in) + 1.0;
      const Var nu = exp(p.log_nu);
      const Var b = detail::lower_part(p.psi_factor);
      const Var psi_q = add_identity(matmul(b, transpose(b)), n1);
      const Var cq = cholesky(psi_q);
      const Var dof_q = nu + n1;
      // L⁻¹ ~ Wishart(Ψ_Q⁻¹, ν_Q), so L = (C T⁻ᵀ)(C T⁻ᵀ)ᵀ
      const Var lp = inverse_wishart_sample(cq, dof_q, noise);
      const Var cp = Var::constant(Tensor::eye(m)) * std::sqrt(n1);
      out.isotropic = false;
      out.spatial_precision = lp;
      out.channels = fan_in / m;
      out.log_ratio = inverse_wishart_logpdf(lp, cp, Var(n1)) - inverse_wishart_logpdf(lp, cq, dof_q);
      return out;
    }
  }
  throw ConfigError("unknown prior kind");
}

/// log N(W | 0, S / fan_in) summed over the columns of W (fan_in × outputs).
inline Var weight_log_prior(const Var& w, const PriorScale& s) {
  detail::require_matrix(w.value(), "weight_log_prior");
  const std::size_t n = w.rows();
  const double nd = static_cast<double>(n);
  if (s.isotropic) return normal_logpdf_sum(w, Var(0.0), s.variance / nd);
  if (s.channels * s.spatial_precision.rows() != n)
    throw ShapeError("weight rows " + std::to_string(n) + " disagree with spatial prior");
  const double k = static_cast<double>(w.cols());
  const Var prec = kron_identity(s.channels, s.spatial_precision);
  const Var quad = sum(w * matmul(prec, w));
  const Var logdet = scale(logdet_from_chol(cholesky(s.spatial_precision)), static_cast<double>(s.channels));
  return scale(scale(quad, nd) - k * logdet, -0.5) + 0.5 * k * nd * (std::log(nd) - kLog2Pi);
}

}  // namespace gibayes
