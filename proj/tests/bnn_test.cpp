#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <numbers>

#include "gibayes/bnn.hpp"
#include "gibayes/grad_check.hpp"

using namespace gibayes;

namespace {

const double kPi = std::numbers::pi;

ScalarFunction frozen(std::function<Var(const std::vector<Var>&, NoiseSource&)> f, std::uint64_t seed) {
  auto noise = std::make_shared<FrozenNoise>(seed);
  auto first = std::make_shared<bool>(true);
  return [f, noise, first](const std::vector<Var>& v) {
    if (!*first) noise->replay();
    *first = false;
    return f(v, *noise);
  };
}

BayesLayer inducing_layer(Family fam, std::size_t in, std::size_t out, std::size_t m, double log_prec, Rng& rng,
                          bool phi = false) {
  BayesLayer l;
  l.family = fam;
  l.in = in;
  l.out = out;
  l.phi_input = phi;
  l.v = Var::param(rng.normal({m, out}));
  l.log_prec = Var::param(Tensor({m}, log_prec / l.prec_factor));
  if (fam == Family::LocalInducing) l.z = Var::param(rng.normal({m, in}));
  return l;
}

// Single linear layer whose inducing points are the data: the exact
// conjugate configuration.
struct Conjugate {
  Tensor x, y;
  double noise_var;
  Bnn net;
};

Conjugate conjugate_setup(std::uint64_t seed, std::size_t p = 12, std::size_t in = 3) {
  Rng rng(seed);
  Conjugate c;
  c.x = rng.normal({p, in});
  c.y = rng.normal({p, 1});
  c.noise_var = 0.3;
  BayesLayer l = inducing_layer(Family::GlobalInducing, in, 1, p, 0.0, rng);
  l.v.set_value(c.y);
  l.log_prec.set_value(Tensor({p}, -std::log(c.noise_var) / l.prec_factor));
  c.net.layers.push_back(l);
  c.net.u0 = Var::constant(c.x);
  c.net.lik = Likelihood::fixed_gaussian(c.noise_var);
  return c;
}

// log N(y | 0, X Xᵀ/in + σ² I) by dense inverse and determinant.
double linear_evidence(const Tensor& x, const Tensor& y, double noise_var) {
  const Eigen::MatrixXd xm = x.mat();
  const std::size_t p = x.rows();
  const Eigen::MatrixXd k =
      xm * xm.transpose() / static_cast<double>(x.cols()) + noise_var * Eigen::MatrixXd::Identity(p, p);
  const Eigen::VectorXd yv = y.mat();
  return -0.5 * (yv.dot(k.inverse() * yv) + std::log(k.determinant()) + p * std::log(2 * kPi));
}

}  // namespace

TEST(GiLinear, ZeroPrecisionCollapsesToPrior) {
  Rng rng(1);
  const std::size_t m = 6, in = 4, out = 3;
  const BayesLayer l = inducing_layer(Family::GlobalInducing, in, out, m, -40.0, rng);
  const PriorScale sc{true, Var(1.0), {}, 0, Var(0.0)};
  const Tensor u = rng.normal({m, in});
  const WeightConditional c = inducing_conditional(Var::constant(u), exp(scale(l.log_prec, 3.0)), l.v, sc);
  for (double v : c.mean.value().data()) EXPECT_NEAR(v, 0.0, 1e-15);
  for (std::size_t i = 0; i < in; ++i) EXPECT_NEAR(c.prec_chol.value()(i, i), std::sqrt(4.0), 1e-12);
  RandomNoise noise(2);
  PropagationState s{Var::constant(rng.normal({5, in})), Var::constant(u), Var(0.0)};
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(gi_linear_forward(s, l, noise).logpq.item(), 0.0, 1e-12);
}

TEST(GiLinear, ConjugatePosteriorEqualsBayesianLinearRegression) {
  const Conjugate c = conjugate_setup(3);
  const BayesLayer& l = c.net.layers[0];
  const PriorScale sc{true, Var(1.0), {}, 0, Var(0.0)};
  const WeightConditional wc = inducing_conditional(Var::constant(c.x), exp(scale(l.log_prec, 3.0)), l.v, sc);
  const Eigen::MatrixXd x = c.x.mat();
  const Eigen::MatrixXd post_cov =
      (3.0 * Eigen::MatrixXd::Identity(3, 3) + x.transpose() * x / c.noise_var).inverse();
  const Eigen::MatrixXd post_mean = post_cov * x.transpose() * Eigen::MatrixXd(c.y.mat()) / c.noise_var;
  const Eigen::MatrixXd lp = wc.prec_chol.value().mat();
  const Eigen::MatrixXd cov = (lp * lp.transpose()).inverse();
  EXPECT_LT((Eigen::MatrixXd(wc.mean.value().mat()) - post_mean).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((cov - post_cov).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GiLinear, MatchesDenseInverseOnRandomInstance) {
  Rng rng(4);
  const std::size_t m = 3, n = 2, out = 2;
  const Tensor a = rng.normal({m, n});
  const Tensor lam = Tensor::vector({0.5, 2.0, 1.3});
  const Tensor v = rng.normal({m, out});
  const PriorScale sc{true, Var(0.7), {}, 0, Var(0.0)};
  const WeightConditional wc = inducing_conditional(Var::constant(a), Var::constant(lam), Var::constant(v), sc);
  const Eigen::MatrixXd am = a.mat();
  const Eigen::MatrixXd lm = Eigen::VectorXd(lam.mat()).asDiagonal();
  const Eigen::MatrixXd sw = (n / 0.7 * Eigen::MatrixXd::Identity(n, n) + am.transpose() * lm * am).inverse();
  const Eigen::MatrixXd mw = sw * am.transpose() * lm * Eigen::MatrixXd(v.mat());
  const Eigen::MatrixXd lp = wc.prec_chol.value().mat();
  EXPECT_LT(((lp * lp.transpose()).inverse() - sw).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((Eigen::MatrixXd(wc.mean.value().mat()) - mw).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(GiLinear, SampledWeightsHavePosteriorMoments) {
  const Conjugate c = conjugate_setup(5, 8, 2);
  const BayesLayer& l = c.net.layers[0];
  RandomNoise noise(6);
  const int n = 20000;
  // the weights are recovered from the propagated U = X W
  Eigen::MatrixXd xm = c.x.mat();
  const Eigen::MatrixXd pinv = (xm.transpose() * xm).inverse() * xm.transpose();
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  Eigen::Matrix2d second = Eigen::Matrix2d::Zero();
  for (int i = 0; i < n; ++i) {
    PropagationState s{Var::constant(c.x), Var::constant(c.x), Var(0.0)};
    const Eigen::Vector2d w = pinv * Eigen::VectorXd(gi_linear_forward(s, l, noise).u->value().mat());
    mean += w / n;
    second += w * w.transpose() / n;
  }
  const Eigen::MatrixXd post_cov = (2.0 * Eigen::MatrixXd::Identity(2, 2) + xm.transpose() * xm / c.noise_var).inverse();
  const Eigen::VectorXd post_mean = post_cov * xm.transpose() * Eigen::VectorXd(c.y.mat()) / c.noise_var;
  const Eigen::Matrix2d cov = second - mean * mean.transpose();
  for (int i = 0; i < 2; ++i) EXPECT_LT(std::abs(mean[i] - post_mean[i]), 4.0 * std::sqrt(post_cov(i, i) / n));
  EXPECT_LT((cov - post_cov).cwiseAbs().maxCoeff(), 0.05 * post_cov.cwiseAbs().maxCoeff());
}

TEST(GiLinear, RequiresInducingInputs) {
  Rng rng(7);
  const BayesLayer l = inducing_layer(Family::GlobalInducing, 2, 1, 3, 0.0, rng);
  RandomNoise noise(1);
  PropagationState s;
  s.f = Var::constant(Tensor({4, 2}));
  EXPECT_THROW(gi_linear_forward(s, l, noise), ConfigError);
}

TEST(GiLinear, PerOutputPrecisionEqualsSharedWhenColumnsAgree) {
  Rng rng(8);
  BayesLayer shared = inducing_layer(Family::GlobalInducing, 3, 2, 5, 0.5, rng, true);
  BayesLayer per = shared;
  per.per_output = true;
  Tensor lp({5, 2});
  for (std::size_t i = 0; i < 5; ++i) lp(i, 0) = lp(i, 1) = shared.log_prec.value()[i];
  per.log_prec = Var::param(lp);
  const Tensor u = rng.normal({5, 3});
  const Tensor f = rng.normal({4, 3});
  // same weights either way: per-column sampling consumes noise column by column,
  // so compare the conditional moments instead of draws
  const PriorScale sc{true, Var(1.0), {}, 0, Var(0.0)};
  const Var a = relu(Var::constant(u));
  const WeightConditional all = inducing_conditional(a, exp(scale(shared.log_prec, 3.0)), shared.v, sc);
  for (std::size_t j = 0; j < 2; ++j) {
    const WeightConditional col =
        inducing_conditional(a, exp(scale(slice(per.log_prec, 1, j, j + 1), 3.0)), slice(per.v, 1, j, j + 1), sc);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(col.mean.value()(i, 0), all.mean.value()(i, j), 1e-12);
    EXPECT_LT(max_abs_diff(col.prec_chol.value(), all.prec_chol.value()), 1e-12);
  }
  RandomNoise noise(9);
  PropagationState s{Var::constant(f), Var::constant(u), Var(0.0)};
  EXPECT_TRUE(std::isfinite(gi_linear_forward(s, per, noise).logpq.item()));
}

TEST(LocalInducing, EqualsGlobalWhenInputsPinnedToPropagatedU) {
  Rng rng(10);
  const BayesLayer g = inducing_layer(Family::GlobalInducing, 3, 2, 4, 0.3, rng, true);
  BayesLayer l = g;
  l.family = Family::LocalInducing;
  const Tensor u = rng.normal({4, 3});
  l.z = Var::constant(u);
  const Tensor f = rng.normal({5, 3});
  FrozenNoise n1(11), n2(11);
  PropagationState sg{Var::constant(f), Var::constant(u), Var(0.0)};
  PropagationState sl{Var::constant(f), std::nullopt, Var(0.0)};
  const PropagationState og = gi_linear_forward(sg, g, n1);
  const PropagationState ol = local_inducing_forward(sl, l, n2);
  EXPECT_EQ(og.f.value(), ol.f.value());
  EXPECT_EQ(og.logpq.item(), ol.logpq.item());
  EXPECT_FALSE(ol.u.has_value());
}

TEST(LocalInducing, ZeroPrecisionCollapsesToPrior) {
  Rng rng(12);
  const BayesLayer l = inducing_layer(Family::LocalInducing, 3, 2, 4, -40.0, rng, true);
  RandomNoise noise(13);
  PropagationState s{Var::constant(rng.normal({5, 3})), std::nullopt, Var(0.0)};
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(local_inducing_forward(s, l, noise).logpq.item(), 0.0, 1e-12);
}

TEST(LocalInducing, MatchesDenseOracle) {
  Rng rng(14);
  const BayesLayer l = inducing_layer(Family::LocalInducing, 3, 2, 4, 0.3, rng, true);
  const PriorScale sc{true, Var(1.0), {}, 0, Var(0.0)};
  const Var a = relu(l.z);
  const WeightConditional wc = inducing_conditional(a, exp(scale(l.log_prec, 3.0)), l.v, sc);
  const Eigen::MatrixXd am = a.value().mat();
  const double lam = std::exp(0.3);
  const Eigen::MatrixXd sw = (3.0 * Eigen::MatrixXd::Identity(3, 3) + lam * am.transpose() * am).inverse();
  const Eigen::MatrixXd mw = sw * am.transpose() * lam * Eigen::MatrixXd(l.v.value().mat());
  const Eigen::MatrixXd lp = wc.prec_chol.value().mat();
  EXPECT_LT(((lp * lp.transpose()).inverse() - sw).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((Eigen::MatrixXd(wc.mean.value().mat()) - mw).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Factorised, DegenerateZeroMeanZeroSpread) {
  BayesLayer l;
  l.family = Family::Factorised;
  l.in = 3;
  l.out = 2;
  l.phi_input = false;
  l.mean = Var::param(Tensor({3, 2}));
  const double ls = -30.0;
  l.log_std = Var::param(Tensor({3, 2}, ls));
  RandomNoise noise(15);
  Rng rng(16);
  PropagationState s{Var::constant(rng.normal({4, 3})), std::nullopt, Var(0.0)};
  const PropagationState o = factorised_forward(s, l, noise);
  for (double v : o.f.value().data()) EXPECT_NEAR(v, 0.0, 1e-12);
  // KL per weight = ½(σ²/v + 0 + log v − 2 log σ − 1) with v = 1/3
  const double pv = 1.0 / 3.0;
  const double kl = 6 * 0.5 * (std::exp(2 * ls) / pv + std::log(pv) - 2 * ls - 1);
  EXPECT_NEAR(o.logpq.item(), -kl, 1e-10 * kl);
}

TEST(Factorised, ZeroKlWhenPosteriorIsPriorMarginal) {
  BayesLayer l;
  l.family = Family::Factorised;
  l.in = 4;
  l.out = 2;
  l.mean = Var::param(Tensor({4, 2}));
  l.log_std = Var::param(Tensor({4, 2}, 0.5 * std::log(1.0 / 4.0)));
  RandomNoise noise(17);
  PropagationState s{Var::constant(Tensor({3, 4}, 1.0)), std::nullopt, Var(0.0)};
  EXPECT_NEAR(factorised_forward(s, l, noise).logpq.item(), 0.0, 1e-14);
}

TEST(Factorised, LocalReparamRejectedWhenUIsCarried) {
  BayesLayer l;
  l.family = Family::Factorised;
  l.in = 2;
  l.out = 1;
  l.local_reparam = true;
  l.mean = Var::param(Tensor({2, 1}));
  l.log_std = Var::param(Tensor({2, 1}));
  RandomNoise noise(1);
  PropagationState s{Var::constant(Tensor({3, 2})), Var::constant(Tensor({4, 2})), Var(0.0)};
  EXPECT_THROW(factorised_forward(s, l, noise), ConfigError);
}

TEST(Factorised, LocalReparamHasSameExpectedElbo) {
  Rng rng(18);
  BnnConfig cfg;
  cfg.widths = {2, 3, 1};
  cfg.families = {Family::Factorised};
  cfg.learn_noise = false;
  cfg.noise_log_var = std::log(0.5);
  const Tensor x = rng.normal({5, 2});
  const Tensor y = rng.normal({5, 1});
  Bnn a = make_bnn(cfg, x, y, rng);
  for (auto& l : a.layers) l.log_std.set_value(Tensor(l.log_std.shape(), std::log(0.4)));
  Bnn b = a;
  for (auto& l : b.layers) l.local_reparam = true;
  auto moments = [&](const Bnn& net, std::uint64_t seed) {
    RandomNoise noise(seed);
    const int n = 100000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e = elbo(net, x, y, 1, noise).item();
      s += e;
      s2 += e * e;
    }
    const double mean = s / n;
    return std::pair{mean, std::sqrt((s2 / n - mean * mean) / n)};
  };
  const auto [ma, sa] = moments(a, 19);
  const auto [mb, sb] = moments(b, 20);
  EXPECT_LT(std::abs(ma - mb), 3.0 * std::sqrt(sa * sa + sb * sb)) << ma << " vs " << mb;
}

TEST(LogLikelihood, PerfectPredictionUnitNoise) {
  const Likelihood lik = Likelihood::fixed_gaussian(1.0);
  EXPECT_NEAR(log_likelihood(Var::constant(Tensor::matrix({{0.7}})), Tensor::matrix({{0.7}}), lik).item(),
              -0.5 * std::log(2 * kPi), 1e-14);
}

TEST(LogLikelihood, UniformLogitsOverTenClasses) {
  const Tensor labels = Tensor::vector({0, 3, 9});
  const double ll = log_likelihood(Var::constant(Tensor({3, 10})), labels, Likelihood::categorical()).item();
  EXPECT_NEAR(ll / 3.0, std::log(0.1), 1e-14);
  EXPECT_NEAR(ll / 3.0, -2.30, 0.01);
}

TEST(LogLikelihood, MatchesScalarLoopOracle) {
  Rng rng(21);
  const Tensor f = rng.normal({6, 2});
  const Tensor y = rng.normal({6, 2});
  Likelihood lik = Likelihood::gaussian(std::log(0.4), false, 2);
  lik.log_noise.set_value(Tensor::vector({std::log(0.4) / 10.0, std::log(1.7) / 10.0}));
  double want = 0.0;
  const double vars[2] = {0.4, 1.7};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      want += -0.5 * (std::pow(y(i, j) - f(i, j), 2) / vars[j] + std::log(2 * kPi * vars[j]));
  EXPECT_NEAR(log_likelihood(Var::constant(f), y, lik).item(), want, 1e-10);

  const Tensor logits = rng.normal({5, 4});
  const Tensor labels = Tensor::vector({0, 1, 3, 2, 3});
  double cwant = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < 4; ++k) z += std::exp(logits(i, k));
    cwant += logits(i, static_cast<std::size_t>(labels[i])) - std::log(z);
  }
  EXPECT_NEAR(log_likelihood(Var::constant(logits), labels, Likelihood::categorical()).item(), cwant, 1e-10);
}

TEST(LogLikelihood, FullCovarianceNoiseMatchesDenseGaussian) {
  Rng rng(22);
  const Tensor f = rng.normal({3, 2});
  const Tensor y = rng.normal({3, 2});
  Likelihood lik = Likelihood::gaussian();
  const Tensor l = Tensor::matrix({{0.8, 0.0}, {0.3, 0.5}});
  lik.noise_chol = Var::constant(l);
  const Eigen::MatrixXd cov = l.mat() * l.mat().transpose();
  double want = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const Eigen::Vector2d r(y(i, 0) - f(i, 0), y(i, 1) - f(i, 1));
    want += -0.5 * (r.dot(cov.inverse() * r) + std::log(cov.determinant()) + 2 * std::log(2 * kPi));
  }
  EXPECT_NEAR(log_likelihood(Var::constant(f), y, lik).item(), want, 1e-10);
}

TEST(LogLikelihood, LabelOutOfRange) {
  EXPECT_THROW(log_likelihood(Var::constant(Tensor({2, 3})), Tensor::vector({0, 3}), Likelihood::categorical()),
               DomainError);
}

TEST(Elbo, ExactConjugateEqualsLogEvidenceEverySample) {
  const Conjugate c = conjugate_setup(23);
  const double evidence = linear_evidence(c.x, c.y, c.noise_var);
  RandomNoise noise(24);
  std::vector<double> draws;
  for (int i = 0; i < 100; ++i) {
    draws.push_back(elbo(c.net, c.x, c.y, 1, noise).item());
    EXPECT_NEAR(draws.back(), evidence, 1e-6 * std::abs(evidence));
  }
  double mean = 0.0, ss = 0.0;
  for (double e : draws) mean += e / draws.size();
  for (double e : draws) ss += (e - mean) * (e - mean);
  EXPECT_LT(std::sqrt(ss / draws.size()), 1e-10 * std::max(1.0, std::abs(mean)));
}

TEST(Elbo, ZeroKlScaleGivesExpectedLogLikelihood) {
  Rng rng(25);
  BnnConfig cfg;
  cfg.widths = {2, 4, 1};
  cfg.families = {Family::GlobalInducing};
  cfg.inducing = 5;
  const Tensor x = rng.normal({6, 2});
  const Tensor y = rng.normal({6, 1});
  const Bnn net = make_bnn(cfg, x, y, rng);
  FrozenNoise a(26), b(26);
  const double e = elbo(net, x, y, 3, a, 0.0).item();
  double ll = 0.0;
  for (int i = 0; i < 3; ++i) ll += log_likelihood(net.propagate(x, b).f, y, net.lik).item() / 3.0;
  EXPECT_NEAR(e, ll, 1e-12);
}

TEST(Elbo, MinibatchRescalesLikelihoodOnly) {
  Rng rng(27);
  BnnConfig cfg;
  cfg.widths = {2, 3, 1};
  cfg.families = {Family::GlobalInducing};
  cfg.inducing = 4;
  const Tensor x = rng.normal({5, 2});
  const Tensor y = rng.normal({5, 1});
  const Bnn net = make_bnn(cfg, x, y, rng);
  FrozenNoise a(28), b(28);
  const double e = elbo(net, x, y, 1, a, 1.0, 20).item();
  const PropagationState st = net.propagate(x, b);
  EXPECT_NEAR(e, 4.0 * log_likelihood(st.f, y, net.lik).item() + st.logpq.item(), 1e-10);
}

TEST(Elbo, LayerLogRatioIsNonPositiveInExpectation) {
  Rng rng(29);
  const BayesLayer l = inducing_layer(Family::GlobalInducing, 3, 4, 6, 1.0, rng, true);
  RandomNoise noise(30);
  const Tensor u = rng.normal({6, 3});
  const int n = 1000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    PropagationState st{Var::constant(Tensor({1, 3})), Var::constant(u), Var(0.0)};
    const double v = gi_linear_forward(st, l, noise).logpq.item();
    s += v;
    s2 += v * v;
  }
  const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_LT(mean, 2.0 * se);
}

TEST(Elbo, RejectsZeroSamples) {
  const Conjugate c = conjugate_setup(31);
  RandomNoise noise(1);
  EXPECT_THROW(elbo(c.net, c.x, c.y, 0, noise), ConfigError);
}

class FullModelGradient : public ::testing::TestWithParam<std::vector<Family>> {};

TEST_P(FullModelGradient, ElboPassesGradCheckWithFrozenNoise) {
  Rng rng(32);
  BnnConfig cfg;
  cfg.widths = {1, 5, 5, 1};
  cfg.families = GetParam();
  cfg.inducing = 6;
  cfg.bias = true;
  const Tensor x = rng.normal({7, 1});
  const Tensor y = rng.normal({7, 1});
  const Bnn net = make_bnn(cfg, x, y, rng);
  const auto params = net.parameters();
  std::vector<Tensor> init;
  for (const auto& p : params) init.push_back(p.var.value());
  const double err = grad_check(frozen(
                                    [&](const std::vector<Var>& v, NoiseSource& noise) {
                                      Bnn copy = net;
                                      // rebind the copy's parameters to the supplied variables
                                      std::size_t k = 0;
                                      if (copy.u0) copy.u0 = v[k++];
                                      for (auto& l : copy.layers) {
                                        if (l.family == Family::Factorised) {
                                          l.mean = v[k++];
                                          l.log_std = v[k++];
                                        } else if (l.family != Family::Prior) {
                                          if (l.family == Family::LocalInducing) l.z = v[k++];
                                          l.v = v[k++];
                                          l.log_prec = v[k++];
                                        }
                                      }
                                      copy.lik.log_noise = v[k++];
                                      return elbo(copy, x, y, 2, noise);
                                    },
                                    33),
                                init);
  EXPECT_LT(err, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(
    Families, FullModelGradient,
    ::testing::Values(std::vector<Family>{Family::GlobalInducing}, std::vector<Family>{Family::Factorised},
                      std::vector<Family>{Family::LocalInducing},
                      std::vector<Family>{Family::Factorised, Family::Factorised, Family::GlobalInducing},
                      std::vector<Family>{Family::Prior, Family::Prior, Family::GlobalInducing}));

TEST(Predict, SingleSampleIsThatSamplesDensity) {
  const Conjugate c = conjugate_setup(34);
  FrozenNoise a(35), b(35);
  const Prediction p = predict(c.net, c.x, c.y, 1, a);
  const Tensor rows = log_likelihood_rows(c.net.propagate(c.x, b).f, c.y, c.net.lik).value();
  EXPECT_LT(max_abs_diff(p.log_density, rows), 1e-12);
}

TEST(Predict, DeterministicModelIsIdenticalAcrossSamples) {
  Rng rng(36);
  BnnConfig cfg;
  cfg.widths = {2, 3, 1};
  cfg.families = {Family::Factorised};
  const Tensor x = rng.normal({4, 2});
  Bnn net = make_bnn(cfg, x, Tensor(), rng);
  for (auto& l : net.layers) l.log_std.set_value(Tensor(l.log_std.shape(), -40.0));
  RandomNoise noise(37);
  const Prediction p = predict(net, x, Tensor(), 5, noise);
  for (const auto& s : p.samples) EXPECT_LT(max_abs_diff(s, p.samples.front()), 1e-12);
  for (std::size_t i = 0; i < p.var.size(); ++i) EXPECT_NEAR(p.var[i], net.lik.noise_var().value()[0], 1e-12);
}

TEST(Predict, MatchesHandRolledMixture) {
  Rng rng(38);
  BnnConfig cfg;
  cfg.widths = {2, 3, 1};
  cfg.families = {Family::GlobalInducing};
  cfg.inducing = 4;
  const Tensor x = rng.normal({2, 2});
  const Tensor y = rng.normal({2, 1});
  const Bnn net = make_bnn(cfg, rng.normal({4, 2}), Tensor(), rng);
  FrozenNoise a(39), b(39);
  const Prediction p = predict(net, x, y, 3, a);
  const double var = net.lik.noise_var().value()[0];
  double dens[2] = {0, 0};
  for (int s = 0; s < 3; ++s) {
    const Tensor f = net.propagate(x, b).f.value();
    for (std::size_t i = 0; i < 2; ++i)
      dens[i] += std::exp(-0.5 * std::pow(y[i] - f[i], 2) / var) / std::sqrt(2 * kPi * var) / 3.0;
  }
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(p.log_density[i], std::log(dens[i]), 1e-12);
}

TEST(MakeBnn, InitialisationFollowsRecipe) {
  Rng rng(40);
  BnnConfig cfg;
  cfg.widths = {3, 8, 8, 1};
  cfg.families = {Family::GlobalInducing};
  cfg.inducing = 5;
  const Tensor x = rng.normal({10, 3});
  const Tensor y = rng.normal({10, 1});
  const Bnn net = make_bnn(cfg, x, y, rng);
  ASSERT_TRUE(net.u0.has_value());
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(net.u0->value()(i, j), x(i, j));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(net.layers[2].v.value()[i], y[i]);
  EXPECT_NEAR(3.0 * net.layers[0].log_prec.value()[0], -4.0, 1e-12);
  EXPECT_NEAR(3.0 * net.layers[2].log_prec.value()[0], 0.0, 1e-12);
  EXPECT_NEAR(net.lik.noise_var().value()[0], std::exp(-3.0), 1e-12);
  EXPECT_FALSE(net.layers[0].phi_input);
  EXPECT_TRUE(net.layers[1].phi_input);
}

TEST(MakeBnn, RejectsBadConfigurations) {
  Rng rng(41);
  BnnConfig cfg;
  cfg.widths = {2};
  EXPECT_THROW(make_bnn(cfg, Tensor(), Tensor(), rng), ConfigError);
  cfg.widths = {2, 3, 1};
  cfg.families = {Family::GlobalInducing, Family::GlobalInducing, Family::GlobalInducing};
  EXPECT_THROW(make_bnn(cfg, Tensor(), Tensor(), rng), ConfigError);
  cfg.families = {Family::LocalInducing, Family::GlobalInducing};
  const Bnn net = make_bnn(cfg, Tensor(), Tensor(), rng);
  RandomNoise noise(1);
  EXPECT_THROW(net.propagate(Tensor({2, 2}), noise), ConfigError);
}

TEST(CostScaling, DoublingWidthStaysWithinCubicBudget) {
  Rng rng(42);
  auto time_width = [&](std::size_t w) {
    BnnConfig cfg;
    cfg.widths = {4, w, w, 1};
    cfg.families = {Family::GlobalInducing};
    cfg.inducing = 32;
    const Tensor x = rng.normal({64, 4});
    const Bnn net = make_bnn(cfg, x, rng.normal({64, 1}), rng);
    RandomNoise noise(43);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 5; ++i) backward(elbo(net, x, rng.normal({64, 1}), 1, noise));
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  time_width(32);  // warm-up
  const double t1 = time_width(64);
  const double t2 = time_width(128);
  EXPECT_LE(t2 / t1, 10.0);
}
