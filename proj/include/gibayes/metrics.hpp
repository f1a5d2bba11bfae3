#pragma once

#include <cmath>
#include <vector>

#include "dgp.hpp"

namespace gibayes {

/// Expected calibration error over equal-width confidence bins; empty bins
/// contribute nothing and a confidence of exactly 1 falls in the top bin.
inline double metric_ece(const std::vector<double>& confidence, const std::vector<bool>& correct,
                         std::size_t bins = 20) {
  if (confidence.size() != correct.size()) throw ShapeError("ece: confidence and correctness sizes differ");
  if (bins == 0) throw ConfigError("ece needs at least one bin");
  if (confidence.empty()) return 0.0;
  std::vector<double> conf(bins, 0.0), acc(bins, 0.0), count(bins, 0.0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("ece: confidence outside [0, 1]");
    const auto b = std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)));
    conf[b] += c;
    acc[b] += correct[i] ? 1.0 : 0.0;
    count[b] += 1.0;
  }
  double e = 0.0;
  for (std::size_t b = 0; b < bins; ++b)
    if (count[b] > 0.0) e += std::abs(acc[b] - conf[b]);
  return e / static_cast<double>(confidence.size());
}

/// ECE of class-probability rows against integer labels, using the argmax
/// probability as the confidence.
inline double metric_ece(const Tensor& probs, const Tensor& labels, std::size_t bins = 20) {
  if (probs.rank() != 2 || labels.size() != probs.rows()) throw ShapeError("ece: one label per probability row");
  std::vector<double> conf;
  std::vector<bool> ok;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < probs.cols(); ++k)
      if (probs(i, k) > probs(i, best)) best = k;
    conf.push_back(probs(i, best));
    ok.push_back(static_cast<double>(best) == labels[i]);
  }
  return metric_ece(conf, ok, bins);
}

inline double mean_entropy(const Tensor& probs) {
  if (probs.rank() != 2 || probs.rows() == 0) throw ShapeError("entropy needs a non-empty probability matrix");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < probs.cols(); ++k) {
      const double p = probs(i, k);
      if (!(p >= 0.0 && p <= 1.0)) throw DomainError("entropy: probability outside [0, 1]");
      s += p;
      if (p > 0.0) total -= p * std::log(p);
    }
    if (std::abs(s - 1.0) > 1e-6) throw DomainError("entropy: probability row does not sum to 1");
  }
  return total / static_cast<double>(probs.rows());
}

/// Mean predictive entropy in distribution over mean predictive entropy out
/// of distribution.
inline double metric_entropy_ratio(const Tensor& in_dist, const Tensor& ood) {
  const double denom = mean_entropy(ood);
  if (denom == 0.0) throw DomainError("entropy ratio: out-of-distribution entropy is zero");
  return mean_entropy(in_dist) / denom;
}

namespace detail {

// Average over inputs and units of the across-sample variance of one layer's
// output.
template <class Propagate>
double function_variance(Propagate&& outputs_of, std::size_t samples) {
  if (samples < 2) throw ConfigError("function variance needs at least two posterior samples");
  Tensor mean, m2;
  for (std::size_t s = 0; s < samples; ++s) {
    const Tensor f = outputs_of();
    if (s == 0) {
      mean = Tensor(f.shape());
      m2 = Tensor(f.shape());
    }
    const double n = static_cast<double>(s + 1);
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double d = f[i] - mean[i];
      mean[i] += d / n;
      m2[i] += d * (f[i] - mean[i]);
    }
  }
  double v = 0.0;
  for (double x : m2.data()) v += x / static_cast<double>(samples);
  return v / static_cast<double>(m2.size());
}

}  // namespace detail

/// E_x[(1/N) Σ_units V[f(x)]] for the output of layer `layer` (0-based), with
/// x ~ N(0, I) and the variance taken over posterior samples.
inline double metric_function_variance(const Bnn& model, std::size_t n_inputs, std::size_t layer,
                                       std::size_t samples, std::uint64_t seed) {
  if (layer >= model.layers.size()) throw ConfigError("function variance: layer index out of range");
  Rng rng(seed);
  const Tensor x = rng.normal({n_inputs, model.layers.front().in});
  RandomNoise noise(split_seed(seed, 1));
  return detail::function_variance(
      [&] {
        std::vector<Var> outs;
        model.propagate(x, noise, &outs);
        return outs[layer].value();
      },
      samples);
}

inline double metric_function_variance(const Dgp& model, std::size_t n_inputs, std::size_t layer,
                                       std::size_t samples, std::uint64_t seed) {
  if (layer >= model.layers.size()) throw ConfigError("function variance: layer index out of range");
  Rng rng(seed);
  const Tensor x = rng.normal({n_inputs, model.layers.front().in});
  RandomNoise noise(split_seed(seed, 1));
  return detail::function_variance(
      [&] {
        std::vector<Var> outs;
        model.propagate(x, noise, nullptr, &outs);
        return outs[layer].value();
      },
      samples);
}

}  // namespace gibayes
