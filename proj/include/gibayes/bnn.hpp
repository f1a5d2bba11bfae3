#pragma once

// Fully-connected Bayesian layers under factorised, local-inducing and
// global-inducing approximate posteriors, sequential sampling through the
// network, and the ELBO.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "optim.hpp"

namespace gibayes {

/// Posterior family of one layer. `Prior` samples the weights from the prior
/// (no variational parameters, zero weight KL).
enum class Family { Factorised, LocalInducing, GlobalInducing, Prior };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::Factorised: return "fac";
    case Family::LocalInducing: return "li";
    case Family::GlobalInducing: return "gi";
    case Family::Prior: return "rand";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "fac" || s == "factorised") return Family::Factorised;
  if (s == "li" || s == "local") return Family::LocalInducing;
  if (s == "gi" || s == "global") return Family::GlobalInducing;
  if (s == "rand" || s == "prior") return Family::Prior;
  throw ConfigError("unknown posterior family '" + s + "'");
}

struct PropagationState {
  Var f;
  std::optional<Var> u;
  Var logpq{0.0};
};

/// Variational state of one fully-connected layer. Weights have shape
/// fan_in × out, where fan_in = in (+1 for the bias column).
struct BayesLayer {
  Family family = Family::GlobalInducing;
  std::size_t in = 0, out = 0;
  bool phi_input = true;  // false for the first layer, which sees raw inputs
  bool bias = false;
  PriorSpec prior = PriorSpec::neal();

  // factorised: effective mean = mean / √fan_in
  Var mean, log_std;
  bool local_reparam = false;

  // inducing: effective log-precision = prec_factor · log_prec
  Var v, log_prec, z;
  double prec_factor = 3.0;
  bool per_output = false;

  std::size_t fan_in() const { return in + (bias ? 1 : 0); }

  std::vector<NamedParam> parameters(const std::string& prefix) const {
    std::vector<NamedParam> out_params = prior.parameters(prefix + "prior.");
    switch (family) {
      case Family::Factorised:
        out_params.push_back({prefix + "mean", mean});
        out_params.push_back({prefix + "log_std", log_std});
        break;
      case Family::LocalInducing:
        out_params.push_back({prefix + "z", z});
        [[fallthrough]];
      case Family::GlobalInducing:
        out_params.push_back({prefix + "v", v});
        out_params.push_back({prefix + "log_prec", log_prec});
        break;
      case Family::Prior: break;
    }
    return out_params;
  }
};

namespace detail {

inline Var layer_input(const Var& x, bool phi, bool bias) {
  Var a = phi ? relu(x) : x;
  if (bias) a = concat({a, Var::constant(Tensor({a.rows(), 1}, 1.0))}, 1);
  return a;
}

inline Var chol_or_ladder(const Var& p) {
  try {
    return cholesky(p);
  } catch (const NotPositiveDefinite&) {
    return jittered_cholesky(p);
  }
}

}  // namespace detail

/// Conditional Gaussian over the weights given inducing inputs A (M × fan_in),
/// pseudo-outputs V (M × out) and diagonal precision λ:
/// precision P = fan_in·S⁻¹ + Aᵀ diag(λ) A, mean = P⁻¹ Aᵀ diag(λ) V.
struct WeightConditional {
  Var mean;
  Var prec_chol;
};

inline WeightConditional inducing_conditional(const Var& a, const Var& lam, const Var& v, const PriorScale& sc) {
  const std::size_t n = a.cols();
  const Var al = a * reshape(lam, {lam.size(), 1});
  Var prec = matmul(transpose(al), a);
  prec = prec + (sc.isotropic ? sc.precision_scalar(n) * Var::constant(Tensor::eye(n)) : sc.precision_matrix(n));
  const Var lp = detail::chol_or_ladder(prec);
  const Var rhs = matmul(transpose(al), v);
  return {triangular_solve(lp, triangular_solve(lp, rhs), true), lp};
}

namespace detail {

// Draws W = mean + L_P⁻ᵀ ε with k output columns and returns it with log Q(W).
inline std::pair<Var, Var> sample_weights(const WeightConditional& c, std::size_t k, NoiseSource& noise) {
  const std::size_t n = c.prec_chol.rows();
  const Tensor eps = noise.normal({n, k});
  const Var w = c.mean + triangular_solve(c.prec_chol, Var::constant(eps), true);
  double ee = 0.0;
  for (double e : eps.data()) ee += e * e;
  const double kd = static_cast<double>(k);
  const Var logq = scale(logdet_from_chol(c.prec_chol), 0.5 * kd) + (-0.5 * ee - 0.5 * static_cast<double>(n) * kd * kLog2Pi);
  return {w, logq};
}

// Samples W from the inducing conditional(s) and returns it with log Q(W).
inline std::pair<Var, Var> sample_inducing_weights(const Var& a, const Var& lam, const Var& v, const PriorScale& sc,
                                                   bool per_output, NoiseSource& noise) {
  if (!per_output) return sample_weights(inducing_conditional(a, lam, v, sc), v.cols(), noise);
  std::vector<Var> cols;
  Var logq(0.0);
  for (std::size_t j = 0; j < v.cols(); ++j) {
    auto [w, lq] =
        sample_weights(inducing_conditional(a, slice(lam, 1, j, j + 1), slice(v, 1, j, j + 1), sc), 1, noise);
    cols.push_back(w);
    logq = logq + lq;
  }
  return {concat(cols, 1), logq};
}

inline Var effective_lambda(const BayesLayer& l) { return exp(multiplied(l.log_prec, l.prec_factor)); }

inline void check_width(const Var& x, std::size_t in, const char* what) {
  if (x.cols() != in)
    throw ShapeError(std::string(what) + " width " + std::to_string(x.cols()) + " does not match layer input " +
                     std::to_string(in));
}

template <class Fn>
auto with_layer_context(std::size_t index, Fn fn) {
  try {
    return fn();
  } catch (const NotPositiveDefinite& e) {
    throw NumericalError("layer " + std::to_string(index) + ": covariance Cholesky failed after jitter (pivot " +
                         std::to_string(e.pivot()) + ")");
  }
}

}  // namespace detail

/// Global inducing layer: weights conditioned on the propagated inducing
/// inputs U; both U and F are pushed through the sampled weights.
inline PropagationState gi_linear_forward(const PropagationState& s, const BayesLayer& l, NoiseSource& noise) {
  if (!s.u) throw ConfigError("global inducing layer needs propagated inducing inputs");
  detail::check_width(*s.u, l.in, "inducing input");
  detail::check_width(s.f, l.in, "feature");
  const PriorScale sc = sample_scale(l.prior, l.fan_in(), noise);
  const Var a = detail::layer_input(*s.u, l.phi_input, l.bias);
  const auto [w, logq] =
      detail::sample_inducing_weights(a, detail::effective_lambda(l), l.v, sc, l.per_output, noise);
  PropagationState out;
  out.u = matmul(a, w);
  out.f = matmul(detail::layer_input(s.f, l.phi_input, l.bias), w);
  out.logpq = s.logpq + sc.log_ratio + weight_log_prior(w, sc) - logq;
  return out;
}

/// Local inducing layer: as the global version with learned inputs Z in place
/// of U. U is not propagated.
inline PropagationState local_inducing_forward(const PropagationState& s, const BayesLayer& l, NoiseSource& noise) {
  detail::check_width(s.f, l.in, "feature");
  const PriorScale sc = sample_scale(l.prior, l.fan_in(), noise);
  const Var a = detail::layer_input(l.z, l.phi_input, l.bias);
  const auto [w, logq] =
      detail::sample_inducing_weights(a, detail::effective_lambda(l), l.v, sc, l.per_output, noise);
  PropagationState out;
  out.f = matmul(detail::layer_input(s.f, l.phi_input, l.bias), w);
  out.logpq = s.logpq + sc.log_ratio + weight_log_prior(w, sc) - logq;
  return out;
}

/// Factorised Gaussian layer. Weight-sample mode propagates U when present;
/// local-reparameterisation mode samples pre-activations and is only valid
/// when no U is carried. The weight term is the analytic −KL(q‖p).
inline PropagationState factorised_forward(const PropagationState& s, const BayesLayer& l, NoiseSource& noise) {
  detail::check_width(s.f, l.in, "feature");
  if (l.local_reparam && s.u) throw ConfigError("local reparameterisation cannot propagate inducing inputs");
  const PriorScale sc = sample_scale(l.prior, l.fan_in(), noise);
  if (!sc.isotropic) throw ConfigError("factorised layers need an isotropic prior");
  const Var mu = scaled_param(l.mean, l.fan_in());
  const Var prior_var = sc.variance / static_cast<double>(l.fan_in());
  PropagationState out;
  out.logpq = s.logpq + sc.log_ratio - kl_normal(mu, l.log_std, prior_var);
  const Var a = detail::layer_input(s.f, l.phi_input, l.bias);
  if (l.local_reparam) {
    const Var mean = matmul(a, mu);
    const Var var = matmul(square(a), exp(scale(l.log_std, 2.0)));
    const Tensor eps = noise.normal(mean.shape());
    out.f = mean + sqrt(var + 1e-16) * Var::constant(eps);
    return out;
  }
  const Var w = mu + exp(l.log_std) * Var::constant(noise.normal(mu.shape()));
  out.f = matmul(a, w);
  if (s.u) out.u = matmul(detail::layer_input(*s.u, l.phi_input, l.bias), w);
  return out;
}

/// Weights drawn from the prior; only the hyperparameter term contributes.
inline PropagationState prior_forward(const PropagationState& s, const BayesLayer& l, NoiseSource& noise) {
  detail::check_width(s.f, l.in, "feature");
  const PriorScale sc = sample_scale(l.prior, l.fan_in(), noise);
  if (!sc.isotropic) throw ConfigError("prior-sampled layers need an isotropic prior");
  const Var sd = sqrt(sc.variance / static_cast<double>(l.fan_in()));
  const Var w = sd * Var::constant(noise.normal({l.fan_in(), l.out}));
  PropagationState out;
  out.f = matmul(detail::layer_input(s.f, l.phi_input, l.bias), w);
  if (s.u) out.u = matmul(detail::layer_input(*s.u, l.phi_input, l.bias), w);
  out.logpq = s.logpq + sc.log_ratio;
  return out;
}

inline PropagationState layer_forward(const PropagationState& s, const BayesLayer& l, NoiseSource& noise) {
  switch (l.family) {
    case Family::Factorised: return factorised_forward(s, l, noise);
    case Family::LocalInducing: return local_inducing_forward(s, l, noise);
    case Family::GlobalInducing: return gi_linear_forward(s, l, noise);
    case Family::Prior: return prior_forward(s, l, noise);
  }
  throw ConfigError("unknown family");
}

enum class LikelihoodKind { Gaussian, Categorical };

/// Observation model. Gaussian noise variance = exp(noise_factor · log_noise)
/// per output (diagonal) unless a full covariance factor is given.
struct Likelihood {
  LikelihoodKind kind = LikelihoodKind::Gaussian;
  Var log_noise;  // [1] or [out]
  double noise_factor = 10.0;
  bool learn_noise = true;
  std::optional<Var> noise_chol;  // full-covariance option

  Var noise_var() const { return exp(multiplied(log_noise, noise_factor)); }

  static Likelihood gaussian(double log_var = -3.0, bool learn = true, std::size_t outputs = 1) {
    Likelihood l;
    l.log_noise = Var(Tensor({outputs}, log_var / 10.0), learn);
    l.learn_noise = learn;
    return l;
  }
  static Likelihood fixed_gaussian(double var, std::size_t outputs = 1) { return gaussian(std::log(var), false, outputs); }
  static Likelihood categorical() {
    Likelihood l;
    l.kind = LikelihoodKind::Categorical;
    l.learn_noise = false;
    return l;
  }

  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> p;
    if (kind == LikelihoodKind::Gaussian && learn_noise) {
      if (noise_chol)
        p.push_back({"lik.noise_chol", *noise_chol});
      else
        p.push_back({"lik.log_noise", log_noise});
    }
    return p;
  }
};

/// Per-row log-likelihoods (P) of targets Y given network outputs F.
inline Var log_likelihood_rows(const Var& f, const Tensor& y, const Likelihood& lik) {
  if (lik.kind == LikelihoodKind::Categorical) {
    const std::size_t p = f.rows(), k = f.cols();
    if (y.size() != p) throw ShapeError("categorical labels must have one entry per row");
    Tensor mask({p, k});
    for (std::size_t i = 0; i < p; ++i) {
      const double lab = y[i];
      if (!(lab >= 0.0) || lab >= static_cast<double>(k) || lab != std::floor(lab))
        throw DomainError("label " + std::to_string(lab) + " out of range for " + std::to_string(k) + " classes");
      mask(i, static_cast<std::size_t>(lab)) = 1.0;
    }
    return reshape(sum(f * Var::constant(mask), 1) - logsumexp(f, 1), {p});
  }
  if (y.rank() != 2 || y.rows() != f.rows() || y.cols() != f.cols())
    throw ShapeError("targets " + shape_str(y.shape()) + " do not match outputs " + shape_str(f.shape()));
  const Var r = Var::constant(y) - f;
  if (lik.noise_chol) {
    const Var z = triangular_solve(*lik.noise_chol, transpose(r));
    const double k = static_cast<double>(f.cols());
    return reshape(scale(sum(square(z), 0), -0.5), {f.rows()}) - 0.5 * logdet_from_chol(*lik.noise_chol) -
           0.5 * k * kLog2Pi;
  }
  const Var var = reshape(lik.noise_var(), {1, lik.log_noise.size()});
  const Var t = square(r) / var + log(var) + kLog2Pi;
  return reshape(scale(sum(t, 1), -0.5), {f.rows()});
}

inline Var log_likelihood(const Var& f, const Tensor& y, const Likelihood& lik) {
  return sum(log_likelihood_rows(f, y, lik));
}

struct Bnn {
  std::vector<BayesLayer> layers;
  std::optional<Var> u0;  // global inducing inputs
  Likelihood lik;

  bool needs_u() const {
    for (const auto& l : layers)
      if (l.family == Family::GlobalInducing) return true;
    return false;
  }

  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> p;
    if (u0) p.push_back({"u0", *u0});
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto lp = layers[i].parameters("layer" + std::to_string(i) + ".");
      p.insert(p.end(), lp.begin(), lp.end());
    }
    auto kp = lik.parameters();
    p.insert(p.end(), kp.begin(), kp.end());
    return p;
  }

  /// One posterior sample pushed through the network. If `outputs` is given
  /// it receives every layer's output features.
  PropagationState propagate(const Tensor& x, NoiseSource& noise, std::vector<Var>* outputs = nullptr) const {
    PropagationState s;
    s.f = Var::constant(x);
    if (needs_u()) {
      if (!u0) throw ConfigError("global inducing layers need inducing inputs u0");
      bool gi_seen = false;
      for (const auto& l : layers) {
        if (l.family == Family::GlobalInducing) gi_seen = true;
        if (!gi_seen && l.family == Family::LocalInducing)
          throw ConfigError("a local inducing layer cannot precede a global inducing layer");
      }
      s.u = *u0;
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      s = detail::with_layer_context(i, [&] { return layer_forward(s, layers[i], noise); });
      if (outputs) outputs->push_back(s.f);
    }
    return s;
  }
};

struct BnnConfig {
  std::vector<std::size_t> widths;  // input, hidden..., output
  std::vector<Family> families;     // one per layer, or one entry for all
  PriorKind prior = PriorKind::Neal;
  std::size_t inducing = 100;
  bool bias = false;
  bool local_reparam = false;
  bool per_output_precision = false;
  bool relu = true;  // false gives a deep linear network
  LikelihoodKind likelihood = LikelihoodKind::Gaussian;
  double noise_log_var = -3.0;
  bool learn_noise = true;
  double log_prec_hidden = -4.0;
  double log_prec_output = 0.0;
  double prec_factor = 3.0;
};

namespace detail {

inline Tensor leading_rows_or_normal(const Tensor& src, std::size_t rows, std::size_t cols, Rng& rng) {
  if (src.rank() == 2 && src.rows() >= rows && src.cols() == cols) {
    Tensor t({rows, cols});
    std::copy(src.data().begin(), src.data().begin() + static_cast<std::ptrdiff_t>(rows * cols), t.data().begin());
    return t;
  }
  return rng.normal({rows, cols});
}

}  // namespace detail

/// Builds a network with the standard initialisation: factorised means from
/// NealPrior (stored scaled), weight variance 1e-3/√fan_in; inducing inputs
/// and output-layer pseudo-outputs from the first rows of the data when there
/// are enough rows (standard normal otherwise), hidden pseudo-outputs and
/// local inducing inputs standard normal.
inline Bnn make_bnn(const BnnConfig& cfg, const Tensor& x_init, const Tensor& y_init, Rng& rng) {
  if (cfg.widths.size() < 2) throw ConfigError("network needs at least input and output widths");
  const std::size_t nl = cfg.widths.size() - 1;
  if (cfg.families.size() != 1 && cfg.families.size() != nl)
    throw ConfigError("families must have one entry or one per layer");
  if (cfg.inducing == 0) throw ConfigError("inducing point count must be positive");
  for (std::size_t w : cfg.widths)
    if (w == 0) throw ConfigError("layer widths must be positive");
  Bnn net;
  const std::size_t m = cfg.inducing;
  for (std::size_t i = 0; i < nl; ++i) {
    BayesLayer l;
    l.family = cfg.families.size() == 1 ? cfg.families[0] : cfg.families[i];
    l.in = cfg.widths[i];
    l.out = cfg.widths[i + 1];
    l.phi_input = cfg.relu && i > 0;
    l.bias = cfg.bias;
    l.local_reparam = cfg.local_reparam;
    l.per_output = cfg.per_output_precision;
    l.prec_factor = cfg.prec_factor;
    switch (cfg.prior) {
      case PriorKind::Standard: l.prior = PriorSpec::standard(); break;
      case PriorKind::Neal: l.prior = PriorSpec::neal(); break;
      case PriorKind::Scale: l.prior = PriorSpec::scale_prior(); break;
      case PriorKind::SpatialIW: throw ConfigError("SpatialIW prior applies only to convolutional layers");
    }
    const std::size_t fan = l.fan_in();
    const bool last = i + 1 == nl;
    if (l.family == Family::Factorised) {
      l.mean = Var::param(rng.normal({fan, l.out}));
      l.log_std = Var::param(Tensor({fan, l.out}, 0.5 * std::log(1e-3 / std::sqrt(static_cast<double>(fan)))));
    } else if (l.family == Family::GlobalInducing || l.family == Family::LocalInducing) {
      const bool data_v = last && l.family == Family::GlobalInducing && cfg.likelihood == LikelihoodKind::Gaussian;
      l.v = Var::param(data_v ? detail::leading_rows_or_normal(y_init, m, l.out, rng) : rng.normal({m, l.out}));
      const double lp = (last ? cfg.log_prec_output : cfg.log_prec_hidden) / cfg.prec_factor;
      l.log_prec = Var::param(l.per_output ? Tensor({m, l.out}, lp) : Tensor({m}, lp));
      if (l.family == Family::LocalInducing) l.z = Var::param(rng.normal({m, l.in}));
    }
    net.layers.push_back(std::move(l));
  }
  if (net.needs_u()) net.u0 = Var::param(detail::leading_rows_or_normal(x_init, m, cfg.widths[0], rng));
  if (cfg.likelihood == LikelihoodKind::Categorical)
    net.lik = Likelihood::categorical();
  else
    net.lik = Likelihood::gaussian(cfg.noise_log_var, cfg.learn_noise, 1);
  return net;
}

/// Monte Carlo ELBO: mean over samples of scale·log-likelihood + kl_scale·logpq,
/// with the likelihood rescaled by dataset_size / batch rows when minibatching.
inline Var elbo(const Bnn& model, const Tensor& x, const Tensor& y, std::size_t n_samples, NoiseSource& noise,
                double kl_scale = 1.0, std::size_t dataset_size = 0) {
  if (n_samples == 0) throw ConfigError("elbo needs at least one sample");
  const double lscale = dataset_size ? static_cast<double>(dataset_size) / static_cast<double>(x.rows()) : 1.0;
  Var total(0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const PropagationState st = model.propagate(x, noise);
    total = total + scale(log_likelihood(st.f, y, model.lik), lscale) + scale(st.logpq, kl_scale);
  }
  return scale(total, 1.0 / static_cast<double>(n_samples));
}

struct Prediction {
  Tensor log_density;  // per point: log mean_s p(y | sample s)
  Tensor mean;         // predictive mean (regression) or mean probabilities
  Tensor var;          // predictive variance including observation noise (regression)
  std::vector<Tensor> samples;  // per-sample outputs
};

/// Predictive mixture over posterior samples. Y may be empty (rank 0) when
/// only moments are needed.
inline Prediction predict(const Bnn& model, const Tensor& x, const Tensor& y, std::size_t n_samples,
                          NoiseSource& noise) {
  if (n_samples == 0) throw ConfigError("predict needs at least one sample");
  const bool have_y = y.rank() > 0;
  const std::size_t p = x.rows();
  Prediction out;
  const bool categorical = model.lik.kind == LikelihoodKind::Categorical;
  std::vector<Tensor> ll;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Var f = Var::constant(model.propagate(x, noise).f.value());
    if (have_y) ll.push_back(log_likelihood_rows(f, y, model.lik).value());
    out.samples.push_back(categorical ? exp(f - logsumexp(f, 1)).value() : f.value());
  }
  const double ns = static_cast<double>(n_samples);
  const Shape os = out.samples.front().shape();
  out.mean = Tensor(os);
  out.var = Tensor(os);
  for (const auto& t : out.samples)
    for (std::size_t i = 0; i < t.size(); ++i) out.mean[i] += t[i] / ns;
  if (!categorical) {
    const Tensor noise_var = model.lik.noise_chol ? Tensor() : model.lik.noise_var().value();
    const std::size_t k = os[1];
    for (const auto& t : out.samples)
      for (std::size_t i = 0; i < t.size(); ++i) out.var[i] += (t[i] - out.mean[i]) * (t[i] - out.mean[i]) / ns;
    for (std::size_t i = 0; i < out.var.size(); ++i) {
      const std::size_t col = i % k;
      if (model.lik.noise_chol) {
        double nv = 0.0;
        for (std::size_t c = 0; c <= col; ++c) nv += std::pow(model.lik.noise_chol->value()(col, c), 2);
        out.var[i] += nv;
      } else {
        out.var[i] += noise_var[noise_var.size() == 1 ? 0 : col];
      }
    }
  }
  if (have_y) {
    out.log_density = Tensor({p});
    for (std::size_t i = 0; i < p; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (const auto& l : ll) m = std::max(m, l[i]);
      double acc = 0.0;
      for (const auto& l : ll) acc += std::exp(l[i] - m);
      out.log_density[i] = m + std::log(acc / ns);
    }
  }
  return out;
}

}  // namespace gibayes
