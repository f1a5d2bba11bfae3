#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "random.hpp"

namespace gibayes {

/// Log density and its gradient at x (gradient written into the second argument).
using LogJoint = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

struct HmcConfig {
  std::size_t leapfrog = 20;
  double burn_step = 0.0007;
  double step = 0.003;
  std::size_t burn_in = 10000;
  std::size_t samples = 10000;  // kept after thinning
  std::size_t thin = 10;
};

struct HmcResult {
  std::vector<Eigen::VectorXd> samples;
  double burn_accept = 0.0;
  double accept = 0.0;
  bool low_acceptance = false;  // burn-in acceptance below 0.1
};

/// Leapfrog integration of (x, p) for n steps of size eps. Returns the final
/// log density; `grad` holds its gradient on exit.
inline double leapfrog(const LogJoint& f, Eigen::VectorXd& x, Eigen::VectorXd& p, double eps, std::size_t n,
                       Eigen::VectorXd& grad, double logp) {
  p += 0.5 * eps * grad;
  for (std::size_t i = 0; i < n; ++i) {
    x += eps * p;
    logp = f(x, grad);
    if (!std::isfinite(logp)) return logp;
    if (i + 1 < n) p += eps * grad;
  }
  p += 0.5 * eps * grad;
  return logp;
}

namespace detail {

struct HmcChain {
  const LogJoint& f;
  Rng& rng;
  Eigen::VectorXd x, grad;
  double logp;

  bool transition(double eps, std::size_t n) {
    Eigen::VectorXd p(x.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = rng.normal();
    const double h0 = -logp + 0.5 * p.squaredNorm();
    Eigen::VectorXd xn = x, gn = grad;
    const double lp = leapfrog(f, xn, p, eps, n, gn, logp);
    const double h1 = -lp + 0.5 * p.squaredNorm();
    const double u = rng.uniform();
    if (std::isfinite(h1) && std::log(u) < h0 - h1) {
      x = std::move(xn);
      grad = std::move(gn);
      logp = lp;
      return true;
    }
    return false;
  }
};

}  // namespace detail

/// Plain HMC with an identity mass matrix and fixed step sizes. The initial
/// state is drawn from N(0, I).
inline HmcResult hmc_sample(const LogJoint& f, std::size_t dim, const HmcConfig& cfg, std::uint64_t seed) {
  if (cfg.leapfrog == 0) throw ConfigError("hmc needs at least one leapfrog step");
  if (!(cfg.step > 0.0) || !(cfg.burn_step > 0.0)) throw ConfigError("hmc step sizes must be positive");
  if (cfg.thin == 0) throw ConfigError("thinning must be at least 1");
  Rng rng(seed);
  detail::HmcChain chain{f, rng, Eigen::VectorXd(dim), Eigen::VectorXd(dim), 0.0};
  for (std::size_t i = 0; i < dim; ++i) chain.x[static_cast<Eigen::Index>(i)] = rng.normal();
  chain.logp = f(chain.x, chain.grad);
  if (!std::isfinite(chain.logp)) throw NumericalError("hmc: log joint is not finite at the initial state");
  HmcResult r;
  std::size_t acc = 0;
  for (std::size_t i = 0; i < cfg.burn_in; ++i) acc += chain.transition(cfg.burn_step, cfg.leapfrog);
  r.burn_accept = cfg.burn_in ? static_cast<double>(acc) / static_cast<double>(cfg.burn_in) : 1.0;
  r.low_acceptance = r.burn_accept < 0.1;
  acc = 0;
  const std::size_t total = cfg.samples * cfg.thin;
  r.samples.reserve(cfg.samples);
  for (std::size_t i = 0; i < total; ++i) {
    acc += chain.transition(cfg.step, cfg.leapfrog);
    if ((i + 1) % cfg.thin == 0) r.samples.push_back(chain.x);
  }
  r.accept = total ? static_cast<double>(acc) / static_cast<double>(total) : 0.0;
  return r;
}

struct PredictiveMoments {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // includes observation noise
};

/// Predictive mean and standard deviation over a chain. `forward` maps a
/// sample to the network outputs at the query points.
inline PredictiveMoments hmc_predictive(const std::vector<Eigen::VectorXd>& samples,
                                        const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& forward,
                                        double noise_var) {
  if (samples.empty()) throw ConfigError("hmc_predictive needs a non-empty chain");
  PredictiveMoments m;
  Eigen::VectorXd m2;
  std::size_t n = 0;
  for (const auto& s : samples) {
    const Eigen::VectorXd f = forward(s);
    if (n == 0) {
      m.mean = Eigen::VectorXd::Zero(f.size());
      m2 = Eigen::VectorXd::Zero(f.size());
    }
    ++n;
    const Eigen::VectorXd d = f - m.mean;
    m.mean += d / static_cast<double>(n);
    m2 += d.cwiseProduct(f - m.mean);
  }
  m.std = (m2 / static_cast<double>(n)).array() + noise_var;
  m.std = m.std.cwiseSqrt();
  return m;
}

/// Fully-connected relu network over a flat parameter vector. Each layer's
/// raw weights [(in + bias) × out] are stored row-major and divided by
/// √(in + bias) in the forward pass, so a N(0, I) prior on the raw vector is
/// NealPrior on the effective weights.
struct Mlp {
  std::vector<std::size_t> widths;
  bool bias = true;

  std::size_t fan_in(std::size_t layer) const { return widths[layer] + (bias ? 1 : 0); }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += fan_in(l) * widths[l + 1];
    return n;
  }

  Eigen::MatrixXd forward(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x) const {
    std::vector<Eigen::MatrixXd> acts;
    return forward_cached(theta, x, acts);
  }

  // acts[l] is the (post-relu, bias-augmented) input to layer l.
  Eigen::MatrixXd forward_cached(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x,
                                 std::vector<Eigen::MatrixXd>& acts) const {
    if (static_cast<std::size_t>(theta.size()) != num_params()) throw ShapeError("mlp parameter count mismatch");
    if (static_cast<std::size_t>(x.cols()) != widths.front()) throw ShapeError("mlp input width mismatch");
    acts.clear();
    Eigen::MatrixXd h = x;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      if (l > 0) h = h.cwiseMax(0.0);
      Eigen::MatrixXd a(h.rows(), fan_in(l));
      a.leftCols(h.cols()) = h;
      if (bias) a.col(a.cols() - 1).setOnes();
      acts.push_back(a);
      const std::size_t fi = fan_in(l), fo = widths[l + 1];
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(
          theta.data() + off, static_cast<Eigen::Index>(fi), static_cast<Eigen::Index>(fo));
      h = (a * w) / std::sqrt(static_cast<double>(fi));
      off += fi * fo;
    }
    return h;
  }
};

/// log N(Y | mlp(X), σ² I) + log N(θ | 0, I) with its gradient.
inline LogJoint mlp_log_joint(const Mlp& net, Eigen::MatrixXd x, Eigen::MatrixXd y, double noise_var) {
  return [net, x = std::move(x), y = std::move(y), noise_var](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) {
    std::vector<Eigen::MatrixXd> acts;
    const Eigen::MatrixXd f = net.forward_cached(theta, x, acts);
    const Eigen::MatrixXd r = y - f;
    const double n = static_cast<double>(r.size());
    double lp = -0.5 * r.squaredNorm() / noise_var - 0.5 * n * std::log(2.0 * std::numbers::pi * noise_var);
    lp += -0.5 * theta.squaredNorm() - 0.5 * static_cast<double>(theta.size()) * std::log(2.0 * std::numbers::pi);
    grad = -theta;
    Eigen::MatrixXd g = r / noise_var;  // d lp / d output of current layer
    std::size_t off = net.num_params();
    for (std::size_t l = net.widths.size() - 1; l-- > 0;) {
      const std::size_t fi = net.fan_in(l), fo = net.widths[l + 1];
      off -= fi * fo;
      const double s = 1.0 / std::sqrt(static_cast<double>(fi));
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(
          theta.data() + off, static_cast<Eigen::Index>(fi), static_cast<Eigen::Index>(fo));
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gw = s * acts[l].transpose() * g;
      grad.segment(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(fi * fo)) +=
          Eigen::Map<const Eigen::VectorXd>(gw.data(), gw.size());
      if (l == 0) break;
      Eigen::MatrixXd ga = s * g * w.transpose();
      const Eigen::Index prev = static_cast<Eigen::Index>(net.widths[l]);
      // back through relu of the previous layer's pre-activation
      g = ga.leftCols(prev).cwiseProduct((acts[l].leftCols(prev).array() > 0.0).cast<double>().matrix());
    }
    return lp;
  };
}

}  // namespace gibayes
