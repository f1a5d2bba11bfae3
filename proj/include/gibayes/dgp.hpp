#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bnn.hpp"

namespace gibayes {

enum class KernelKind { SqExp, BnnRelu };

inline std::string kernel_name(KernelKind k) { return k == KernelKind::SqExp ? "sqexp" : "bnn-relu"; }

inline KernelKind parse_kernel(const std::string& s) {
  if (s == "sqexp") return KernelKind::SqExp;
  if (s == "bnn-relu") return KernelKind::BnnRelu;
  throw ConfigError("unknown kernel '" + s + "'");
}

/// SqExp: σ² exp(−‖a−b‖² / 2ℓ²). BnnRelu: (s/N) φ(a) φ(b)ᵀ with the scale s
/// drawn from the prior spec, i.e. the covariance a relu BNN layer induces.
struct KernelSpec {
  KernelKind kind = KernelKind::SqExp;
  Var log_lengthscale;
  Var log_variance;
  PriorSpec prior = PriorSpec::neal();
  bool relu_input = true;

  static KernelSpec sq_exp(double lengthscale = 1.0, double variance = 1.0) {
    if (!(lengthscale > 0.0) || !(variance > 0.0)) throw DomainError("sqexp hyperparameters must be positive");
    KernelSpec k;
    k.log_lengthscale = Var::param(Tensor::scalar(std::log(lengthscale)));
    k.log_variance = Var::param(Tensor::scalar(std::log(variance)));
    return k;
  }
  static KernelSpec bnn_relu(PriorSpec prior = PriorSpec::neal(), bool relu_input = true) {
    KernelSpec k;
    k.kind = KernelKind::BnnRelu;
    k.prior = std::move(prior);
    k.relu_input = relu_input;
    return k;
  }

  std::vector<NamedParam> parameters(const std::string& prefix) const {
    if (kind == KernelKind::BnnRelu) return prior.parameters(prefix + "prior.");
    return {{prefix + "log_lengthscale", log_lengthscale}, {prefix + "log_variance", log_variance}};
  }
};

/// Squared Euclidean distances between rows of a and rows of b, exact zero
/// for identical rows.
inline Var pairwise_sqdist(const Var& a, const Var& b) {
  if (a.cols() != b.cols())
    throw ShapeError("pairwise_sqdist: widths " + std::to_string(a.cols()) + " and " + std::to_string(b.cols()));
  const std::size_t p = a.rows(), q = b.rows(), d = a.cols();
  Tensor out({p, q});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double t = a.value()(i, k) - b.value()(j, k);
        s += t * t;
      }
      out(i, j) = s;
    }
  return Var::from_op(std::move(out), {a, b}, [p, q, d](detail::Node& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    Tensor ga(pa.value.shape()), gb(pb.value.shape());
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) {
        const double g = 2.0 * n.grad(i, j);
        for (std::size_t k = 0; k < d; ++k) {
          const double t = g * (pa.value(i, k) - pb.value(j, k));
          ga(i, k) += t;
          gb(j, k) -= t;
        }
      }
    pa.accumulate(std::move(ga));
    pb.accumulate(std::move(gb));
  });
}

/// K(a, b). `scale` is the sampled prior scale for BnnRelu and ignored for SqExp.
inline Var kernel_matrix(const KernelSpec& k, const Var& a, const Var& b, const Var& scale_draw = Var(1.0)) {
  if (a.cols() != b.cols()) throw ShapeError("kernel inputs differ in width");
  if (k.kind == KernelKind::SqExp) {
    const Var d2 = pairwise_sqdist(a, b);
    return exp(k.log_variance + scale(d2 * exp(scale(k.log_lengthscale, -2.0)), -0.5));
  }
  const Var fa = k.relu_input ? relu(a) : a;
  const Var fb = k.relu_input ? relu(b) : b;
  return (scale_draw / static_cast<double>(a.cols())) * matmul(fa, transpose(fb));
}

/// diag K(a, a) as a vector.
inline Var kernel_diag(const KernelSpec& k, const Var& a, const Var& scale_draw = Var(1.0)) {
  if (k.kind == KernelKind::SqExp) return exp(k.log_variance) * Var::constant(Tensor::ones({a.rows()}));
  const Var fa = k.relu_input ? relu(a) : a;
  return (scale_draw / static_cast<double>(a.cols())) * reshape(sum(square(fa), 1), {a.rows()});
}

/// One deep-GP layer. V and Λ define the inducing-output posterior
/// Q(U_ℓ) = N(S Λ V, S) with S = (K⁻¹ + Λ)⁻¹ per output column.
struct GpLayer {
  Family family = Family::GlobalInducing;  // or LocalInducing
  std::size_t in = 1;
  std::size_t out = 1;
  KernelSpec kernel = KernelSpec::sq_exp();
  Var v;         // [M × out]
  Var log_prec;  // [M], effective log λ = prec_factor · log_prec
  Var z;         // [M × in], local layers only
  double prec_factor = 3.0;

  std::vector<NamedParam> parameters(const std::string& prefix) const {
    std::vector<NamedParam> p = kernel.parameters(prefix + "kernel.");
    if (family == Family::LocalInducing) p.push_back({prefix + "z", z});
    p.push_back({prefix + "v", v});
    p.push_back({prefix + "log_prec", log_prec});
    return p;
  }
};

struct InducingDraw {
  Var u;          // sampled inducing outputs [M × out]
  Var log_ratio;  // log P(U|A) − log Q(U), plus any kernel hyper-prior term
  Var k_chol;     // Cholesky of the (jittered) K(A)
  Var scale;      // kernel prior scale draw
  Var mean;       // posterior mean of U
  Var cov_factor; // C with C Cᵀ = S
};

/// Samples U from Q at inducing inputs A. With K = L Lᵀ and
/// B = I + Lᵀ Λ L = R Rᵀ, S = (L R⁻ᵀ)(L R⁻ᵀ)ᵀ and the mean is L B⁻¹ Lᵀ Λ V.
inline InducingDraw sample_inducing_outputs(const GpLayer& l, const Var& a, NoiseSource& noise) {
  if (a.cols() != l.in) throw ShapeError("gp layer input width " + std::to_string(a.cols()) + " != " + std::to_string(l.in));
  const std::size_t m = a.rows(), n = l.out;
  if (l.v.rows() != m || l.v.cols() != n)
    throw ShapeError("gp pseudo-outputs " + shape_str(l.v.shape()) + " do not match " + std::to_string(m) +
                     " inducing points and width " + std::to_string(n));
  InducingDraw d;
  d.scale = Var(1.0);
  Var hyper(0.0);
  if (l.kernel.kind == KernelKind::BnnRelu) {
    const PriorScale sc = sample_scale(l.kernel.prior, l.in, noise);
    if (!sc.isotropic) throw ConfigError("bnn-relu kernels need an isotropic prior");
    d.scale = sc.variance;
    hyper = sc.log_ratio;
  }
  d.k_chol = jittered_cholesky(kernel_matrix(l.kernel, a, a, d.scale));
  const Var lam = reshape(exp(multiplied(l.log_prec, l.prec_factor)), {m, 1});
  const Var sl = d.k_chol * sqrt(lam);
  const Var r = cholesky(add_identity(matmul(transpose(sl), sl), 1.0));
  const Var rhs = matmul(transpose(d.k_chol), lam * l.v);
  d.mean = matmul(d.k_chol, triangular_solve(r, triangular_solve(r, rhs), true));
  const Tensor eps = noise.normal({m, n});
  d.cov_factor = transpose(triangular_solve(r, transpose(d.k_chol)));
  d.u = d.mean + matmul(d.k_chol, triangular_solve(r, Var::constant(eps), true));
  double ee = 0.0;
  for (double e : eps.data()) ee += e * e;
  const Var white = triangular_solve(d.k_chol, d.u);
  d.log_ratio = hyper + scale(sum(square(white)), -0.5) + 0.5 * ee -
                scale(logdet_from_chol(r), 0.5 * static_cast<double>(n));
  return d;
}

/// Marginal GP conditional of F at inputs G given U at inducing inputs A.
struct GpConditional {
  Var mean;  // [B × out]
  Var var;   // [B]
};

inline GpConditional gp_conditional(const GpLayer& l, const InducingDraw& d, const Var& a, const Var& g) {
  if (g.cols() != l.in) throw ShapeError("gp layer feature width " + std::to_string(g.cols()) + " != " + std::to_string(l.in));
  const Var proj = triangular_solve(d.k_chol, kernel_matrix(l.kernel, a, g, d.scale));
  GpConditional c;
  c.mean = matmul(transpose(proj), triangular_solve(d.k_chol, d.u));
  c.var = kernel_diag(l.kernel, g, d.scale) - reshape(sum(square(proj), 0), {g.rows()});
  return c;
}

inline Var sample_conditional(const GpConditional& c, NoiseSource& noise) {
  const Var sd = sqrt(relu(c.var) + 1e-12);
  return c.mean + reshape(sd, {sd.size(), 1}) * Var::constant(noise.normal(c.mean.shape()));
}

namespace detail {

inline PropagationState gp_step(const PropagationState& s, const GpLayer& l, const Var& a, bool propagate_u,
                                NoiseSource& noise, GpConditional* marginal) {
  const InducingDraw d = sample_inducing_outputs(l, a, noise);
  const GpConditional c = gp_conditional(l, d, a, s.f);
  PropagationState out;
  if (propagate_u) out.u = d.u;
  out.logpq = s.logpq + d.log_ratio;
  if (marginal)
    *marginal = c;
  else
    out.f = sample_conditional(c, noise);
  return out;
}

}  // namespace detail

/// Global inducing GP layer: inducing inputs are the propagated U. When
/// `marginal` is given, F is not sampled and its marginal is returned instead.
inline PropagationState gi_gp_forward(const PropagationState& s, const GpLayer& l, NoiseSource& noise,
                                      GpConditional* marginal = nullptr) {
  if (!s.u) throw ConfigError("global inducing gp layer needs propagated inducing inputs");
  return detail::gp_step(s, l, *s.u, true, noise, marginal);
}

/// Local inducing GP layer: inducing inputs are the layer's own Z.
inline PropagationState local_gp_forward(const PropagationState& s, const GpLayer& l, NoiseSource& noise,
                                         GpConditional* marginal = nullptr) {
  return detail::gp_step(s, l, l.z, false, noise, marginal);
}

struct Dgp {
  std::vector<GpLayer> layers;
  std::optional<Var> u0;
  Likelihood lik;
  bool analytic_final = true;  // Gaussian expectation over the last layer's marginal when possible

  bool needs_u() const {
    for (const auto& l : layers)
      if (l.family == Family::GlobalInducing) return true;
    return false;
  }

  bool uses_analytic_final() const {
    return analytic_final && lik.kind == LikelihoodKind::Gaussian && !lik.noise_chol;
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

  /// One posterior sample. With `final_marginal` set, the last layer returns
  /// its marginal instead of a sample of F.
  PropagationState propagate(const Tensor& x, NoiseSource& noise, GpConditional* final_marginal = nullptr,
                             std::vector<Var>* outputs = nullptr) const {
    if (layers.empty()) throw ConfigError("dgp needs at least one layer");
    PropagationState s;
    s.f = Var::constant(x);
    if (needs_u()) {
      if (!u0) throw ConfigError("global inducing gp layers need inducing inputs u0");
      bool gi_seen = false;
      for (const auto& l : layers) {
        if (l.family == Family::GlobalInducing) gi_seen = true;
        if (l.family != Family::GlobalInducing && l.family != Family::LocalInducing)
          throw ConfigError("gp layers must be global or local inducing");
        if (!gi_seen && l.family == Family::LocalInducing)
          throw ConfigError("a local inducing layer cannot precede a global inducing layer");
      }
      s.u = *u0;
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      GpConditional* m = i + 1 == layers.size() ? final_marginal : nullptr;
      s = detail::with_layer_context(i, [&] {
        return layers[i].family == Family::GlobalInducing ? gi_gp_forward(s, layers[i], noise, m)
                                                          : local_gp_forward(s, layers[i], noise, m);
      });
      if (outputs && !m) outputs->push_back(s.f);
    }
    return s;
  }
};

namespace detail {

// Per-row E[log N(y | F, σ²)] for F with independent Gaussian marginals.
inline Var expected_gaussian_rows(const GpConditional& c, const Tensor& y, const Likelihood& lik) {
  const std::size_t out = c.mean.cols();
  const Var inv = broadcast_to(1.0 / reshape(lik.noise_var(), {1, lik.log_noise.size()}), {1, out});
  return log_likelihood_rows(c.mean, y, lik) - scale(c.var * sum(inv), 0.5);
}

}  // namespace detail

inline Var dgp_elbo(const Dgp& model, const Tensor& x, const Tensor& y, std::size_t n_samples, NoiseSource& noise,
                    double kl_scale = 1.0, std::size_t dataset_size = 0) {
  if (n_samples == 0) throw ConfigError("elbo needs at least one sample");
  const double lscale = dataset_size ? static_cast<double>(dataset_size) / static_cast<double>(x.rows()) : 1.0;
  const bool analytic = model.uses_analytic_final();
  Var total(0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    GpConditional marg;
    const PropagationState st = model.propagate(x, noise, analytic ? &marg : nullptr);
    const Var ll = analytic ? sum(detail::expected_gaussian_rows(marg, y, model.lik)) : log_likelihood(st.f, y, model.lik);
    total = total + scale(ll, lscale) + scale(st.logpq, kl_scale);
  }
  return scale(total, 1.0 / static_cast<double>(n_samples));
}

/// Predictive mixture over posterior samples. For Gaussian likelihoods each
/// component is the last layer's Gaussian marginal plus observation noise.
inline Prediction dgp_predict(const Dgp& model, const Tensor& x, const Tensor& y, std::size_t n_samples,
                              NoiseSource& noise) {
  if (n_samples == 0) throw ConfigError("predict needs at least one sample");
  const bool have_y = y.rank() > 0;
  const bool analytic = model.uses_analytic_final();
  const bool categorical = model.lik.kind == LikelihoodKind::Categorical;
  const std::size_t p = x.rows();
  const double ns = static_cast<double>(n_samples);
  Prediction out;
  std::vector<Tensor> ll, comp_var;
  for (std::size_t s = 0; s < n_samples; ++s) {
    GpConditional marg;
    const PropagationState st = model.propagate(x, noise, analytic ? &marg : nullptr);
    if (analytic) {
      const Tensor m = marg.mean.value();
      const Tensor v = marg.var.value();
      const Tensor nv = model.lik.noise_var().value();
      Tensor cv(m.shape());
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) cv(i, j) = std::max(v[i], 0.0) + nv[nv.size() == 1 ? 0 : j];
      if (have_y) {
        Tensor rows({p});
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < m.cols(); ++j)
            rows[i] += -0.5 * (std::pow(y(i, j) - m(i, j), 2) / cv(i, j) + std::log(cv(i, j)) + kLog2Pi);
        ll.push_back(rows);
      }
      out.samples.push_back(m);
      comp_var.push_back(cv);
    } else {
      const Var f = Var::constant(st.f.value());
      if (have_y) ll.push_back(log_likelihood_rows(f, y, model.lik).value());
      out.samples.push_back(categorical ? exp(f - logsumexp(f, 1)).value() : f.value());
    }
  }
  const Shape os = out.samples.front().shape();
  out.mean = Tensor(os);
  out.var = Tensor(os);
  for (const auto& t : out.samples)
    for (std::size_t i = 0; i < t.size(); ++i) out.mean[i] += t[i] / ns;
  if (!categorical) {
    for (std::size_t s = 0; s < out.samples.size(); ++s) {
      const Tensor& t = out.samples[s];
      for (std::size_t i = 0; i < t.size(); ++i) {
        out.var[i] += (t[i] - out.mean[i]) * (t[i] - out.mean[i]) / ns;
        if (analytic) out.var[i] += comp_var[s][i] / ns;
      }
    }
    if (!analytic) {
      const std::size_t k = os[1];
      for (std::size_t i = 0; i < out.var.size(); ++i) {
        const std::size_t col = i % k;
        if (model.lik.noise_chol) {
          double nv = 0.0;
          for (std::size_t c = 0; c <= col; ++c) nv += std::pow(model.lik.noise_chol->value()(col, c), 2);
          out.var[i] += nv;
        } else {
          const Tensor nv = model.lik.noise_var().value();
          out.var[i] += nv[nv.size() == 1 ? 0 : col];
        }
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

struct DgpConfig {
  std::vector<std::size_t> widths;  // input, hidden..., output
  std::vector<Family> families{Family::GlobalInducing};
  KernelKind kernel = KernelKind::SqExp;
  PriorKind prior = PriorKind::Neal;  // bnn-relu kernels only
  std::size_t inducing = 100;
  Likelihood likelihood = Likelihood::gaussian();
  double noise_log_var = -3.0;
  bool learn_noise = true;
  double log_prec_hidden = -4.0;
  double log_prec_output = 0.0;
  double prec_factor = 3.0;
};

inline Dgp make_dgp(const DgpConfig& cfg, const Tensor& x_init, const Tensor& y_init, Rng& rng) {
  if (cfg.widths.size() < 2) throw ConfigError("dgp needs at least input and output widths");
  const std::size_t nl = cfg.widths.size() - 1;
  if (cfg.families.size() != 1 && cfg.families.size() != nl)
    throw ConfigError("families must have one entry or one per layer");
  if (cfg.inducing == 0) throw ConfigError("inducing point count must be positive");
  const std::size_t m = cfg.inducing;
  Dgp d;
  d.lik = cfg.likelihood;
  if (d.lik.kind == LikelihoodKind::Gaussian)
    d.lik = Likelihood::gaussian(cfg.noise_log_var, cfg.learn_noise, cfg.widths.back());
  for (std::size_t i = 0; i < nl; ++i) {
    GpLayer l;
    l.family = cfg.families.size() == 1 ? cfg.families[0] : cfg.families[i];
    if (l.family != Family::GlobalInducing && l.family != Family::LocalInducing)
      throw ConfigError("gp layers must be global or local inducing");
    l.in = cfg.widths[i];
    l.out = cfg.widths[i + 1];
    l.prec_factor = cfg.prec_factor;
    if (cfg.kernel == KernelKind::SqExp) {
      l.kernel = KernelSpec::sq_exp();
    } else {
      PriorSpec p = cfg.prior == PriorKind::Standard ? PriorSpec::standard()
                    : cfg.prior == PriorKind::Scale  ? PriorSpec::scale_prior()
                                                     : PriorSpec::neal();
      if (cfg.prior == PriorKind::SpatialIW) throw ConfigError("SpatialIW prior applies only to convolutional layers");
      l.kernel = KernelSpec::bnn_relu(std::move(p), i > 0);
    }
    const bool last = i + 1 == nl;
    const bool from_y = last && d.lik.kind == LikelihoodKind::Gaussian && l.family == Family::GlobalInducing;
    l.v = Var::param(detail::leading_rows_or_normal(from_y ? y_init : Tensor(), m, l.out, rng));
    l.log_prec = Var::param(Tensor({m}, (last ? cfg.log_prec_output : cfg.log_prec_hidden) / l.prec_factor));
    if (l.family == Family::LocalInducing) l.z = Var::param(rng.normal({m, l.in}));
    d.layers.push_back(std::move(l));
  }
  if (d.needs_u()) d.u0 = Var::param(detail::leading_rows_or_normal(x_init, m, cfg.widths[0], rng));
  return d;
}

}  // namespace gibayes
