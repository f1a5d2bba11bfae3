#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>

#include "gibayes/conv.hpp"
#include "gibayes/grad_check.hpp"

using namespace gibayes;

namespace {

ScalarFunction frozen(std::function<Var(const std::vector<Var>&, NoiseSource&)> f, std::uint64_t seed) {
  auto noise = std::make_shared<FrozenNoise>(seed);
  auto first = std::make_shared<bool>(true);
  return [f, noise, first](const std::vector<Var>& v) {
    if (!*first) noise->replay();
    *first = false;
    return f(v, *noise);
  };
}

Tensor uniform_map(Rng& rng, Shape s) {
  Tensor t(s);
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Patch matrix built by direct enumeration, independent of the library's
// index tables.
Eigen::MatrixXd naive_patches(const Tensor& x, Kernel k, bool circular) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n * h * w, c * k.h * k.w);
  const int rh = static_cast<int>(k.h / 2), rw = static_cast<int>(k.w / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (int y = 0; y < static_cast<int>(h); ++y)
      for (int xx = 0; xx < static_cast<int>(w); ++xx) {
        const std::size_t row = (i * h + y) * w + xx;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (int a = 0; a < static_cast<int>(k.h); ++a)
            for (int b = 0; b < static_cast<int>(k.w); ++b) {
              int sy = y + a - rh, sx = xx + b - rw;
              if (circular) {
                sy = (sy + static_cast<int>(h) * 4) % static_cast<int>(h);
                sx = (sx + static_cast<int>(w) * 4) % static_cast<int>(w);
              } else if (sy < 0 || sx < 0 || sy >= static_cast<int>(h) || sx >= static_cast<int>(w)) {
                continue;
              }
              p(row, ch * k.h * k.w + a * k.w + b) = x.at4(i, ch, sy, sx);
            }
      }
  return p;
}

// Pixel-rows view [(images·locations) × channels] of a feature map.
Eigen::MatrixXd pixel_rows(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Eigen::MatrixXd out(n * hw, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t u = 0; u < hw; ++u) out(i * hw + u, ch) = x[(i * c + ch) * hw + u];
  return out;
}

}  // namespace

TEST(ExtractPatches, UnitKernelIsReshape) {
  Rng rng(1);
  const Tensor x = rng.normal({2, 3, 2, 2});
  const Tensor p = extract_patches(Var::constant(x), {1, 1}, Padding::Circular).value();
  EXPECT_LT((Eigen::MatrixXd(p.mat()) - pixel_rows(x)).cwiseAbs().maxCoeff(), 0.0 + 1e-300);
}

TEST(ExtractPatches, CircularHandEnumeration) {
  const Tensor x({1, 1, 1, 3}, std::vector<double>{1.0, 2.0, 3.0});
  const Tensor p = extract_patches(Var::constant(x), {1, 3}, Padding::Circular).value();
  EXPECT_EQ(p, Tensor::matrix({{3, 1, 2}, {1, 2, 3}, {2, 3, 1}}));
}

TEST(ExtractPatches, ShapeArithmetic) {
  Rng rng(2);
  const Tensor p = extract_patches(Var::constant(rng.normal({2, 3, 5, 5})), {3, 3}, Padding::Zero).value();
  EXPECT_EQ(p.shape(), (Shape{50, 27}));
}

TEST(ExtractPatches, MatchesNaiveEnumeration) {
  Rng rng(3);
  for (bool circular : {true, false}) {
    const Tensor x = rng.normal({2, 2, 4, 5});
    const Tensor p =
        extract_patches(Var::constant(x), {3, 3}, circular ? Padding::Circular : Padding::Zero).value();
    EXPECT_LT((Eigen::MatrixXd(p.mat()) - naive_patches(x, {3, 3}, circular)).cwiseAbs().maxCoeff(), 1e-300);
  }
}

TEST(ExtractPatches, EvenKernelRejected) {
  EXPECT_THROW(extract_patches(Var::constant(Tensor({1, 1, 3, 3})), {2, 2}, Padding::Zero), ConfigError);
  EXPECT_THROW(xtx_autocorr(Var::constant(Tensor({1, 1, 3, 3})), {3, 2}), ConfigError);
}

TEST(XtxAutocorr, UnitKernelIsChannelGram) {
  Rng rng(4);
  const Tensor x = rng.normal({3, 2, 3, 3});
  const Eigen::MatrixXd r = pixel_rows(x);
  const Tensor g = xtx_autocorr(Var::constant(x), {1, 1}).value();
  EXPECT_LT((Eigen::MatrixXd(g.mat()) - r.transpose() * r).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(XtxAutocorr, MatchesPatchOracle) {
  Rng rng(5);
  const Tensor x = uniform_map(rng, {2, 2, 6, 6});
  const Eigen::MatrixXd p = naive_patches(x, {3, 3}, true);
  const Tensor g = xtx_autocorr(Var::constant(x), {3, 3}).value();
  EXPECT_LT((Eigen::MatrixXd(g.mat()) - p.transpose() * p).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(XtxAutocorr, ConstantImageCountsOverlaps) {
  const Tensor x = Tensor::ones({2, 1, 4, 4});
  const Tensor g = xtx_autocorr(Var::constant(x), {3, 3}).value();
  for (double v : g.data()) EXPECT_EQ(v, 2.0 * 16.0);
}

TEST(XtxAutocorr, SymmetricPositiveSemidefinite) {
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    const Tensor g = xtx_autocorr(Var::constant(uniform_map(rng, {1, 2, 3, 4})), {3, 3}).value();
    const Eigen::MatrixXd m = g.mat();
    EXPECT_LT((m - m.transpose()).cwiseAbs().maxCoeff(), 1e-14);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(XtyAutocorr, MatchesPatchOracleWithPrecisions) {
  Rng rng(7);
  const Tensor x = uniform_map(rng, {3, 2, 5, 4});
  const Tensor y = uniform_map(rng, {3, 4, 5, 4});
  const Tensor lam = Tensor::vector({0.5, 2.0, 1.5});
  const Eigen::MatrixXd p = naive_patches(x, {3, 3}, true);
  Eigen::VectorXd lrow(p.rows());
  for (std::size_t i = 0; i < 3; ++i) lrow.segment(static_cast<Eigen::Index>(i * 20), 20).setConstant(lam[i]);
  const Eigen::MatrixXd want = p.transpose() * lrow.asDiagonal() * pixel_rows(y);
  const Tensor got = xty_autocorr(Var::constant(x), Var::constant(y), Var::constant(lam), {3, 3}).value();
  EXPECT_LT((Eigen::MatrixXd(got.mat()) - want).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(XtyAutocorr, UnitKernelAndZeroTarget) {
  Rng rng(8);
  const Tensor x = rng.normal({2, 3, 2, 3});
  const Tensor y = rng.normal({2, 2, 2, 3});
  const Tensor ones = Tensor::ones({2});
  const Tensor g = xty_autocorr(Var::constant(x), Var::constant(y), Var::constant(ones), {1, 1}).value();
  EXPECT_LT((Eigen::MatrixXd(g.mat()) - pixel_rows(x).transpose() * pixel_rows(y)).cwiseAbs().maxCoeff(), 1e-12);
  const Tensor z = xty_autocorr(Var::constant(x), Var::constant(Tensor({2, 2, 2, 3})), Var::constant(ones), {3, 3}).value();
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(XtyAutocorr, ShapeMismatch) {
  const Var ones = Var::constant(Tensor::ones({2}));
  EXPECT_THROW(xty_autocorr(Var::constant(Tensor({2, 1, 3, 3})), Var::constant(Tensor({2, 1, 3, 4})), ones, {3, 3}),
               ShapeError);
  EXPECT_THROW(xty_autocorr(Var::constant(Tensor({2, 1, 3, 3})), Var::constant(Tensor({1, 1, 3, 3})), ones, {3, 3}),
               ShapeError);
}

TEST(AutocorrEquivalence, TwentyRandomInstances) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng.uniform_index(3), c = 1 + rng.uniform_index(3);
    const std::size_t h = 3 + rng.uniform_index(6), w = 3 + rng.uniform_index(6), o = 1 + rng.uniform_index(3);
    const Tensor x = uniform_map(rng, {n, c, h, w});
    const Tensor y = uniform_map(rng, {n, o, h, w});
    const Eigen::MatrixXd p = naive_patches(x, {3, 3}, true);
    const Tensor g = xtx_autocorr(Var::constant(x), {3, 3}).value();
    const Tensor xy = xty_autocorr(Var::constant(x), Var::constant(y), Var::constant(Tensor::ones({n})), {3, 3}).value();
    EXPECT_LT((Eigen::MatrixXd(g.mat()) - p.transpose() * p).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((Eigen::MatrixXd(xy.mat()) - p.transpose() * pixel_rows(y)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Conv2d, MatchesZeroPaddedLoop) {
  Rng rng(10);
  const Tensor x = rng.normal({2, 2, 4, 3});
  const Tensor w = rng.normal({18, 3});
  const Tensor out = conv2d(Var::constant(x), Var::constant(w), {3, 3}).value();
  ASSERT_EQ(out.shape(), (Shape{2, 3, 4, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t o = 0; o < 3; ++o)
      for (int y = 0; y < 4; ++y)
        for (int xx = 0; xx < 3; ++xx) {
          double s = 0.0;
          for (std::size_t c = 0; c < 2; ++c)
            for (int a = -1; a <= 1; ++a)
              for (int b = -1; b <= 1; ++b) {
                if (y + a < 0 || y + a >= 4 || xx + b < 0 || xx + b >= 3) continue;
                s += x.at4(i, c, y + a, xx + b) * w(c * 9 + (a + 1) * 3 + b + 1, o);
              }
          EXPECT_NEAR(out.at4(i, o, y, xx), s, 1e-12);
        }
}

TEST(AvgPool, AveragesWindowsAndRejectsRagged) {
  Tensor x({1, 1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_EQ(avg_pool(Var::constant(x), 2).value(), Tensor({1, 1, 1, 2}, std::vector<double>{3.5, 5.5}));
  EXPECT_THROW(avg_pool(Var::constant(x), 3), ShapeError);
}

TEST(ConvOps, GradientsPassFiniteDifferences) {
  Rng rng(11);
  const Tensor x = uniform_map(rng, {2, 2, 3, 4});
  const Tensor y = uniform_map(rng, {2, 2, 3, 4});
  const Tensor w = rng.normal({18, 2});
  const Tensor lam = Tensor::vector({0.7, 1.3});
  const Tensor r = rng.normal({18, 18});
  const Tensor r2 = rng.normal({18, 2});
  EXPECT_LT(grad_check([&](const std::vector<Var>& v) { return sum(xtx_autocorr(v[0], {3, 3}) * Var::constant(r)); },
                       {x}),
            1e-6);
  EXPECT_LT(grad_check(
                [&](const std::vector<Var>& v) {
                  return sum(xty_autocorr(v[0], v[1], v[2], {3, 3}) * Var::constant(r2));
                },
                {x, y, lam}),
            1e-6);
  EXPECT_LT(grad_check([&](const std::vector<Var>& v) { return sum(square(conv2d(v[0], v[1], {3, 3}))); }, {x, w}),
            1e-6);
  EXPECT_LT(grad_check([&](const std::vector<Var>& v) { return sum(square(avg_pool(v[0], 1))) +
                                                               sum(square(extract_patches(v[0], {1, 3}, Padding::Circular))); },
                       {x}),
            1e-6);
  const Tensor x4 = uniform_map(rng, {1, 2, 4, 4});
  EXPECT_LT(grad_check([&](const std::vector<Var>& v) { return sum(square(avg_pool(v[0], 2))); }, {x4}), 1e-6);
}

namespace {

ConvLayer make_conv_layer(Rng& rng, std::size_t m, std::size_t cin, std::size_t cout, std::size_t h, std::size_t w,
                          Kernel k, double log_prec) {
  ConvLayer l;
  l.in_channels = cin;
  l.out_channels = cout;
  l.kernel = k;
  l.v = Var::param(rng.normal({m, cout, h, w}));
  Tensor lp({m});
  for (double& v : lp.data()) v = (log_prec + rng.uniform(-0.3, 0.3)) / l.prec_factor;
  l.log_prec = Var::param(lp);
  return l;
}

}  // namespace

TEST(GiConv, UnitKernelEqualsLinearLayerOnPixelRows) {
  Rng rng(12);
  const std::size_t m = 2, c = 3, o = 2, h = 2, w = 3, hw = h * w;
  const ConvLayer cl = make_conv_layer(rng, m, c, o, h, w, {1, 1}, 0.5);
  const Tensor u = rng.normal({m, c, h, w});
  const Tensor f = rng.normal({1, c, h, w});
  BayesLayer ll;
  ll.family = Family::GlobalInducing;
  ll.in = c;
  ll.out = o;
  ll.phi_input = true;
  ll.v = Var::constant(Tensor::from_eigen(pixel_rows(cl.v.value())));
  Tensor lp({m * hw});
  for (std::size_t i = 0; i < m * hw; ++i) lp[i] = cl.log_prec.value()[i / hw];
  ll.log_prec = Var::constant(lp);
  FrozenNoise n1(13), n2(13);
  const PropagationState sc = gi_conv_forward({Var::constant(f), Var::constant(u), Var(0.0)}, cl, n1);
  const PropagationState sl =
      gi_linear_forward({Var::constant(Tensor::from_eigen(pixel_rows(f))), Var::constant(Tensor::from_eigen(pixel_rows(u))),
                         Var(0.0)},
                        ll, n2);
  EXPECT_NEAR(sc.logpq.item(), sl.logpq.item(), 1e-10);
  EXPECT_LT((pixel_rows(sc.f.value()) - Eigen::MatrixXd(sl.f.value().mat())).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((pixel_rows(sc.u->value()) - Eigen::MatrixXd(sl.u->value().mat())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GiConv, ZeroPrecisionSamplesFromPrior) {
  Rng rng(14);
  const ConvLayer l = make_conv_layer(rng, 2, 2, 2, 4, 4, {3, 3}, -60.0);
  RandomNoise noise(15);
  for (int t = 0; t < 10; ++t) {
    const PropagationState s =
        gi_conv_forward({Var::constant(rng.normal({1, 2, 4, 4})), Var::constant(rng.normal({2, 2, 4, 4})), Var(0.0)}, l,
                        noise);
    EXPECT_NEAR(s.logpq.item(), 0.0, 1e-9);
  }
}

TEST(GiConv, PosteriorMatchesExplicitPatchDenseOracle) {
  Rng rng(16);
  const std::size_t m = 2, c = 2, o = 3;
  const ConvLayer l = make_conv_layer(rng, m, c, o, 4, 4, {3, 3}, 0.2);
  const Tensor u = rng.normal({m, c, 4, 4});
  const PriorScale sc{true, Var(1.0), {}, 0, Var(0.0)};
  const Var lam = exp(multiplied(l.log_prec, l.prec_factor));
  const WeightConditional wc = conv_conditional(relu(Var::constant(u)), lam, l.v, sc, l.kernel);
  Tensor a = u;
  for (double& v : a.data()) v = std::max(v, 0.0);
  const Eigen::MatrixXd p = naive_patches(a, {3, 3}, true);
  Eigen::VectorXd lrow(p.rows());
  for (std::size_t i = 0; i < m; ++i) lrow.segment(static_cast<Eigen::Index>(i * 16), 16).setConstant(lam.value()[i]);
  const double fan = static_cast<double>(c * 9);
  const Eigen::MatrixXd prec = fan * Eigen::MatrixXd::Identity(18, 18) + p.transpose() * lrow.asDiagonal() * p;
  const Eigen::MatrixXd cov = prec.inverse();
  const Eigen::MatrixXd mean = cov * p.transpose() * lrow.asDiagonal() * pixel_rows(l.v.value());
  const Eigen::MatrixXd lp = wc.prec_chol.value().mat();
  EXPECT_LT(((lp * lp.transpose()).inverse() - cov).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((Eigen::MatrixXd(wc.mean.value().mat()) - mean).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(GiConv, SpatialPriorIsAccepted) {
  Rng rng(17);
  ConvLayer l = make_conv_layer(rng, 2, 2, 2, 3, 3, {3, 3}, 0.0);
  l.prior = PriorSpec::spatial_iw(9);
  RandomNoise noise(18);
  const PropagationState s =
      gi_conv_forward({Var::constant(rng.normal({1, 2, 3, 3})), Var::constant(rng.normal({2, 2, 3, 3})), Var(0.0)}, l,
                      noise);
  EXPECT_TRUE(std::isfinite(s.logpq.item()));
}

TEST(GiConv, RejectsMissingInducingMapsAndBadChannels) {
  Rng rng(19);
  const ConvLayer l = make_conv_layer(rng, 2, 2, 2, 3, 3, {3, 3}, 0.0);
  RandomNoise noise(20);
  PropagationState s;
  s.f = Var::constant(Tensor({1, 2, 3, 3}));
  EXPECT_THROW(gi_conv_forward(s, l, noise), ConfigError);
  s.u = Var::constant(Tensor({2, 3, 3, 3}));
  EXPECT_THROW(gi_conv_forward(s, l, noise), ShapeError);
}

TEST(ConvNet, ElboGradientWithFrozenNoise) {
  Rng rng(21);
  ConvNet net;
  const std::size_t m = 3;
  net.u0 = Var::param(rng.normal({m, 1, 4, 4}));
  net.convs.push_back(make_conv_layer(rng, m, 1, 2, 4, 4, {3, 3}, 0.0));
  net.convs[0].phi_input = false;
  net.pool = 2;
  BayesLayer head;
  head.family = Family::GlobalInducing;
  head.in = 8;
  head.out = 1;
  head.v = Var::param(rng.normal({m, 1}));
  head.log_prec = Var::param(Tensor({m}, 0.0));
  net.head.push_back(head);
  net.lik = Likelihood::gaussian(-1.0, true, 1);
  const Tensor x = rng.normal({2, 1, 4, 4});
  const Tensor y = rng.normal({2, 1});
  std::vector<Tensor> init;
  for (const auto& p : net.parameters()) init.push_back(p.var.value());
  const double err = grad_check(frozen(
                                    [&](const std::vector<Var>& v, NoiseSource& noise) {
                                      ConvNet c = net;
                                      c.u0 = v[0];
                                      c.convs[0].v = v[1];
                                      c.convs[0].log_prec = v[2];
                                      c.head[0].v = v[3];
                                      c.head[0].log_prec = v[4];
                                      c.lik.log_noise = v[5];
                                      return conv_elbo(c, x, y, 1, noise);
                                    },
                                    22),
                                init);
  EXPECT_LT(err, 1e-4);
}
