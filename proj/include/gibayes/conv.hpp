#pragma once

#include <string>
#include <vector>

#include "bnn.hpp"

namespace gibayes {

// Feature maps are rank-4 tensors [images × channels × height × width].
// Patch rows are ordered (image, y, x); patch columns are channel-major,
// space-minor: column = c·kh·kw + (dy + kh/2)·kw + (dx + kw/2).

enum class Padding { Circular, Zero };

struct Kernel {
  std::size_t h = 3;
  std::size_t w = 3;
  std::size_t area() const { return h * w; }
};

namespace detail {

inline void check_feature_map(const Shape& s, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + " must be a rank-4 feature map, got " + shape_str(s));
  for (std::size_t d : s)
    if (d == 0) throw ShapeError(std::string(what) + " has an empty extent " + shape_str(s));
}

inline void check_kernel(Kernel k) {
  if (k.h % 2 == 0 || k.w % 2 == 0)
    throw ConfigError("kernel extents must be odd, got " + std::to_string(k.h) + "x" + std::to_string(k.w));
}

inline std::size_t wrap(long i, std::size_t n) {
  const long m = static_cast<long>(n);
  return static_cast<std::size_t>(((i % m) + m) % m);
}

struct MapDims {
  std::size_t n, c, h, w;
  explicit MapDims(const Shape& s) : n(s[0]), c(s[1]), h(s[2]), w(s[3]) {}
  std::size_t at(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const {
    return ((i * c + ch) * h + y) * w + x;
  }
};

// For every patch-matrix entry, the flat source index in x or -1 for padding.
inline std::vector<long> patch_index(const Shape& s, Kernel k, Padding pad) {
  const MapDims d(s);
  const long rh = static_cast<long>(k.h / 2), rw = static_cast<long>(k.w / 2);
  const std::size_t cols = d.c * k.area();
  std::vector<long> idx(d.n * d.h * d.w * cols);
  std::size_t r = 0;
  for (std::size_t i = 0; i < d.n; ++i)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x, ++r)
        for (std::size_t ch = 0; ch < d.c; ++ch)
          for (long dy = -rh; dy <= rh; ++dy)
            for (long dx = -rw; dx <= rw; ++dx) {
              const std::size_t col = ch * k.area() + static_cast<std::size_t>((dy + rh) * static_cast<long>(k.w) + dx + rw);
              const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
              long src = -1;
              if (pad == Padding::Circular)
                src = static_cast<long>(d.at(i, ch, wrap(yy, d.h), wrap(xx, d.w)));
              else if (yy >= 0 && xx >= 0 && yy < static_cast<long>(d.h) && xx < static_cast<long>(d.w))
                src = static_cast<long>(d.at(i, ch, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)));
              idx[r * cols + col] = src;
            }
  return idx;
}

}  // namespace detail

/// Explicit patch matrix [(images·locations) × (channels·kh·kw)].
inline Var extract_patches(const Var& x, Kernel k, Padding pad) {
  detail::check_kernel(k);
  detail::check_feature_map(x.shape(), "extract_patches input");
  const detail::MapDims d(x.shape());
  auto idx = detail::patch_index(x.shape(), k, pad);
  Tensor out({d.n * d.h * d.w, d.c * k.area()});
  for (std::size_t e = 0; e < idx.size(); ++e)
    if (idx[e] >= 0) out[e] = x.value()[static_cast<std::size_t>(idx[e])];
  return Var::from_op(std::move(out), {x}, [idx = std::move(idx)](detail::Node& n) {
    auto& p = *n.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t e = 0; e < idx.size(); ++e)
      if (idx[e] >= 0) g[static_cast<std::size_t>(idx[e])] += n.grad[e];
    p.accumulate(std::move(g));
  });
}

/// Patch Gram matrix under circular boundaries, computed from the spatial
/// autocorrelation of x over displacements in [−(k−1), k−1].
inline Var xtx_autocorr(const Var& x, Kernel k) {
  detail::check_kernel(k);
  detail::check_feature_map(x.shape(), "xtx_autocorr input");
  const detail::MapDims d(x.shape());
  const long rh = static_cast<long>(k.h) - 1, rw = static_cast<long>(k.w) - 1;
  const std::size_t sh = 2 * k.h - 1, sw = 2 * k.w - 1;
  const std::size_t area = k.area(), dim = d.c * area;
  const Tensor& xv = x.value();
  // acorr[c1][c2][δy][δx] = Σ_{i,u} x[i,c1,u] · x[i,c2,u+δ]
  auto acorr_index = [=](std::size_t c1, std::size_t c2, long dy, long dx) {
    return ((c1 * d.c + c2) * sh + static_cast<std::size_t>(dy + rh)) * sw + static_cast<std::size_t>(dx + rw);
  };
  std::vector<double> acorr(d.c * d.c * sh * sw, 0.0);
  for (std::size_t c1 = 0; c1 < d.c; ++c1)
    for (std::size_t c2 = 0; c2 < d.c; ++c2)
      for (long dy = -rh; dy <= rh; ++dy)
        for (long dx = -rw; dx <= rw; ++dx) {
          double s = 0.0;
          for (std::size_t i = 0; i < d.n; ++i)
            for (std::size_t y = 0; y < d.h; ++y) {
              const std::size_t y2 = detail::wrap(static_cast<long>(y) + dy, d.h);
              for (std::size_t xx = 0; xx < d.w; ++xx)
                s += xv[d.at(i, c1, y, xx)] * xv[d.at(i, c2, y2, detail::wrap(static_cast<long>(xx) + dx, d.w))];
            }
          acorr[acorr_index(c1, c2, dy, dx)] = s;
        }
  // entry ((c1,a1),(c2,a2)) reads the autocorrelation at displacement a2 − a1
  auto disp = [=](std::size_t a1, std::size_t a2) {
    const long dy = static_cast<long>(a2 / k.w) - static_cast<long>(a1 / k.w);
    const long dx = static_cast<long>(a2 % k.w) - static_cast<long>(a1 % k.w);
    return std::pair{dy, dx};
  };
  Tensor out({dim, dim});
  for (std::size_t c1 = 0; c1 < d.c; ++c1)
    for (std::size_t a1 = 0; a1 < area; ++a1)
      for (std::size_t c2 = 0; c2 < d.c; ++c2)
        for (std::size_t a2 = 0; a2 < area; ++a2) {
          const auto [dy, dx] = disp(a1, a2);
          out(c1 * area + a1, c2 * area + a2) = acorr[acorr_index(c1, c2, dy, dx)];
        }
  const std::size_t n_acorr = acorr.size();
  return Var::from_op(std::move(out), {x}, [=](detail::Node& n) {
    auto& p = *n.parents[0];
    std::vector<double> gbar(n_acorr, 0.0);
    for (std::size_t c1 = 0; c1 < d.c; ++c1)
      for (std::size_t a1 = 0; a1 < area; ++a1)
        for (std::size_t c2 = 0; c2 < d.c; ++c2)
          for (std::size_t a2 = 0; a2 < area; ++a2) {
            const auto [dy, dx] = disp(a1, a2);
            gbar[acorr_index(c1, c2, dy, dx)] += n.grad(c1 * area + a1, c2 * area + a2);
          }
    const Tensor& v = p.value;
    Tensor g(v.shape());
    for (std::size_t c1 = 0; c1 < d.c; ++c1)
      for (std::size_t c2 = 0; c2 < d.c; ++c2)
        for (long dy = -rh; dy <= rh; ++dy)
          for (long dx = -rw; dx <= rw; ++dx) {
            const double gb = gbar[acorr_index(c1, c2, dy, dx)];
            if (gb == 0.0) continue;
            for (std::size_t i = 0; i < d.n; ++i)
              for (std::size_t y = 0; y < d.h; ++y) {
                const std::size_t y2 = detail::wrap(static_cast<long>(y) + dy, d.h);
                for (std::size_t xx = 0; xx < d.w; ++xx) {
                  const std::size_t p1 = d.at(i, c1, y, xx);
                  const std::size_t p2 = d.at(i, c2, y2, detail::wrap(static_cast<long>(xx) + dx, d.w));
                  g[p1] += gb * v[p2];
                  g[p2] += gb * v[p1];
                }
              }
          }
    p.accumulate(std::move(g));
  });
}

/// Patch cross-product Pᵀ·diag(λ)·flatten(y) under circular boundaries without
/// building P. λ holds one precision per image.
inline Var xty_autocorr(const Var& x, const Var& y, const Var& lam, Kernel k) {
  detail::check_kernel(k);
  detail::check_feature_map(x.shape(), "xty_autocorr input");
  detail::check_feature_map(y.shape(), "xty_autocorr target");
  const detail::MapDims dx(x.shape()), dy(y.shape());
  if (dx.n != dy.n || dx.h != dy.h || dx.w != dy.w)
    throw ShapeError("xty_autocorr: input " + shape_str(x.shape()) + " and target " + shape_str(y.shape()) +
                     " differ in images or spatial extent");
  if (lam.size() != dx.n) throw ShapeError("xty_autocorr: need one precision per image");
  const Var xl = x * reshape(lam, {dx.n, 1, 1, 1});
  const long rh = static_cast<long>(k.h / 2), rw = static_cast<long>(k.w / 2);
  const std::size_t area = k.area();
  auto src = [=](std::size_t i, std::size_t c, std::size_t yy, std::size_t xx, long oy, long ox) {
    return dx.at(i, c, detail::wrap(static_cast<long>(yy) + oy, dx.h), detail::wrap(static_cast<long>(xx) + ox, dx.w));
  };
  const Tensor& xv = xl.value();
  const Tensor& yv = y.value();
  Tensor out({dx.c * area, dy.c});
  for (std::size_t c = 0; c < dx.c; ++c)
    for (long oy = -rh; oy <= rh; ++oy)
      for (long ox = -rw; ox <= rw; ++ox) {
        const std::size_t row = c * area + static_cast<std::size_t>((oy + rh) * static_cast<long>(k.w) + ox + rw);
        for (std::size_t o = 0; o < dy.c; ++o) {
          double s = 0.0;
          for (std::size_t i = 0; i < dx.n; ++i)
            for (std::size_t yy = 0; yy < dx.h; ++yy)
              for (std::size_t xx = 0; xx < dx.w; ++xx) s += xv[src(i, c, yy, xx, oy, ox)] * yv[dy.at(i, o, yy, xx)];
          out(row, o) = s;
        }
      }
  return Var::from_op(std::move(out), {xl, y}, [=](detail::Node& n) {
    auto& px = *n.parents[0];
    auto& py = *n.parents[1];
    Tensor gx(px.value.shape()), gy(py.value.shape());
    for (std::size_t c = 0; c < dx.c; ++c)
      for (long oy = -rh; oy <= rh; ++oy)
        for (long ox = -rw; ox <= rw; ++ox) {
          const std::size_t row = c * area + static_cast<std::size_t>((oy + rh) * static_cast<long>(k.w) + ox + rw);
          for (std::size_t o = 0; o < dy.c; ++o) {
            const double gr = n.grad(row, o);
            for (std::size_t i = 0; i < dx.n; ++i)
              for (std::size_t yy = 0; yy < dx.h; ++yy)
                for (std::size_t xx = 0; xx < dx.w; ++xx) {
                  const std::size_t s = src(i, c, yy, xx, oy, ox), t = dy.at(i, o, yy, xx);
                  gx[s] += gr * py.value[t];
                  gy[t] += gr * px.value[s];
                }
          }
        }
    px.accumulate(std::move(gx));
    py.accumulate(std::move(gy));
  });
}

/// Zero-padded stride-1 convolution (cross-correlation) with kernel matrix
/// w [(channels·kh·kw) × out_channels].
inline Var conv2d(const Var& x, const Var& w, Kernel k) {
  detail::check_feature_map(x.shape(), "conv2d input");
  const detail::MapDims d(x.shape());
  if (w.value().rank() != 2 || w.rows() != d.c * k.area())
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " does not match " + std::to_string(d.c) +
                     " channels with a " + std::to_string(k.h) + "x" + std::to_string(k.w) + " kernel");
  const std::size_t cout = w.cols();
  const Var rows = matmul(extract_patches(x, k, Padding::Zero), w);
  return reshape(permute(reshape(rows, {d.n, d.h * d.w, cout}), {0, 2, 1}), {d.n, cout, d.h, d.w});
}

/// Non-overlapping p×p average pooling.
inline Var avg_pool(const Var& x, std::size_t p) {
  detail::check_feature_map(x.shape(), "avg_pool input");
  const detail::MapDims d(x.shape());
  if (p == 0 || d.h % p != 0 || d.w % p != 0)
    throw ShapeError("avg_pool: window " + std::to_string(p) + " does not tile " + shape_str(x.shape()));
  if (p == 1) return x;
  const std::size_t oh = d.h / p, ow = d.w / p;
  const double inv = 1.0 / static_cast<double>(p * p);
  Tensor out({d.n, d.c, oh, ow});
  for (std::size_t i = 0; i < d.n; ++i)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t xx = 0; xx < d.w; ++xx) out.at4(i, c, y / p, xx / p) += inv * x.value()[d.at(i, c, y, xx)];
  return Var::from_op(std::move(out), {x}, [d, p, inv](detail::Node& n) {
    auto& par = *n.parents[0];
    Tensor g(par.value.shape());
    for (std::size_t i = 0; i < d.n; ++i)
      for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t y = 0; y < d.h; ++y)
          for (std::size_t xx = 0; xx < d.w; ++xx) g[d.at(i, c, y, xx)] = inv * n.grad.at4(i, c, y / p, xx / p);
    par.accumulate(std::move(g));
  });
}

/// Feature maps to rows [images × (channels·height·width)].
inline Var flatten_maps(const Var& x) {
  detail::check_feature_map(x.shape(), "flatten_maps input");
  return reshape(x, {x.shape()[0], x.size() / x.shape()[0]});
}

/// Global-inducing convolutional layer. V holds pseudo-outputs at every
/// location of every inducing image; Λ is one precision per inducing image,
/// shared across locations.
struct ConvLayer {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Kernel kernel;
  bool phi_input = true;
  PriorSpec prior = PriorSpec::neal();
  Var v;         // [M, out_channels, H, W]
  Var log_prec;  // [M], effective log λ = prec_factor · log_prec
  double prec_factor = 3.0;

  std::size_t fan_in() const { return in_channels * kernel.area(); }

  std::vector<NamedParam> parameters(const std::string& prefix) const {
    std::vector<NamedParam> p = prior.parameters(prefix + "prior.");
    p.push_back({prefix + "v", v});
    p.push_back({prefix + "log_prec", log_prec});
    return p;
  }
};

/// Posterior over the kernel matrix given the inducing feature maps A.
inline WeightConditional conv_conditional(const Var& a, const Var& lam, const Var& v, const PriorScale& sc, Kernel k) {
  const std::size_t fan = a.shape()[1] * k.area();
  const Var aw = a * reshape(sqrt(lam), {lam.size(), 1, 1, 1});
  Var prec = xtx_autocorr(aw, k);
  prec = prec + (sc.isotropic ? sc.precision_scalar(fan) * Var::constant(Tensor::eye(fan)) : sc.precision_matrix(fan));
  const Var lp = detail::chol_or_ladder(prec);
  const Var rhs = xty_autocorr(a, v, lam, k);
  return {triangular_solve(lp, triangular_solve(lp, rhs), true), lp};
}

inline PropagationState gi_conv_forward(const PropagationState& s, const ConvLayer& l, NoiseSource& noise) {
  detail::check_kernel(l.kernel);
  if (!s.u) throw ConfigError("convolutional inducing layer needs propagated inducing feature maps");
  detail::check_feature_map(s.u->shape(), "inducing feature map");
  detail::check_feature_map(s.f.shape(), "feature map");
  if (s.u->shape()[1] != l.in_channels || s.f.shape()[1] != l.in_channels)
    throw ShapeError("conv layer expects " + std::to_string(l.in_channels) + " input channels");
  const Shape& us = s.u->shape();
  if (l.v.shape() != Shape{us[0], l.out_channels, us[2], us[3]})
    throw ShapeError("conv pseudo-outputs " + shape_str(l.v.shape()) + " do not match inducing maps " + shape_str(us));
  const PriorScale sc = sample_scale(l.prior, l.fan_in(), noise, true);
  const Var a = l.phi_input ? relu(*s.u) : *s.u;
  const Var lam = exp(multiplied(l.log_prec, l.prec_factor));
  const auto [w, logq] = detail::sample_weights(conv_conditional(a, lam, l.v, sc, l.kernel), l.out_channels, noise);
  PropagationState out;
  out.u = conv2d(a, w, l.kernel);
  out.f = conv2d(l.phi_input ? relu(s.f) : s.f, w, l.kernel);
  out.logpq = s.logpq + sc.log_ratio + weight_log_prior(w, sc) - logq;
  return out;
}

/// Convolutional trunk followed by average pooling, flattening and a
/// fully-connected head. Inducing inputs are images.
struct ConvNet {
  std::vector<ConvLayer> convs;
  std::size_t pool = 1;
  Var u0;  // [M, channels, H, W]
  std::vector<BayesLayer> head;
  Likelihood lik;

  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> p{{"u0", u0}};
    for (std::size_t i = 0; i < convs.size(); ++i) {
      auto cp = convs[i].parameters("conv" + std::to_string(i) + ".");
      p.insert(p.end(), cp.begin(), cp.end());
    }
    for (std::size_t i = 0; i < head.size(); ++i) {
      auto hp = head[i].parameters("head" + std::to_string(i) + ".");
      p.insert(p.end(), hp.begin(), hp.end());
    }
    auto kp = lik.parameters();
    p.insert(p.end(), kp.begin(), kp.end());
    return p;
  }

  PropagationState propagate(const Tensor& x, NoiseSource& noise) const {
    PropagationState s{Var::constant(x), u0, Var(0.0)};
    for (std::size_t i = 0; i < convs.size(); ++i)
      s = detail::with_layer_context(i, [&] { return gi_conv_forward(s, convs[i], noise); });
    s.f = flatten_maps(avg_pool(s.f, pool));
    s.u = flatten_maps(avg_pool(*s.u, pool));
    for (std::size_t i = 0; i < head.size(); ++i) {
      if (head[i].family == Family::LocalInducing) throw ConfigError("conv head layers cannot be local inducing");
      s = detail::with_layer_context(convs.size() + i, [&] { return layer_forward(s, head[i], noise); });
    }
    return s;
  }
};

inline Var conv_elbo(const ConvNet& model, const Tensor& x, const Tensor& y, std::size_t n_samples, NoiseSource& noise,
                     double kl_scale = 1.0, std::size_t dataset_size = 0) {
  if (n_samples == 0) throw ConfigError("elbo needs at least one sample");
  detail::check_feature_map(x.shape(), "conv input");
  const double batch = static_cast<double>(x.shape()[0]);
  const double lscale = dataset_size ? static_cast<double>(dataset_size) / batch : 1.0;
  Var total(0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const PropagationState st = model.propagate(x, noise);
    total = total + scale(log_likelihood(st.f, y, model.lik), lscale) + scale(st.logpq, kl_scale);
  }
  return scale(total, 1.0 / static_cast<double>(n_samples));
}

}  // namespace gibayes
