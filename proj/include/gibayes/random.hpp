#pragma once

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "tensor.hpp"

namespace gibayes {

/// SplitMix64 finaliser: derives statistically independent child seeds from
/// (seed, stream) so per-job seeds do not depend on execution order.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t next_u64() { return engine_(); }
  std::size_t uniform_index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  Tensor normal(const Shape& s) {
    Tensor t(s);
    for (double& v : t.data()) v = normal();
    return t;
  }

  /// Gamma(shape, 1) by Marsaglia–Tsang; shapes below 1 use the a+1 boost.
  double standard_gamma(double shape) {
    if (!(shape > 0.0)) throw DomainError("gamma shape must be positive");
    if (shape < 1.0) {
      const double u = uniform();
      return standard_gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  template <class It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, engine_);
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Source of the parameter-free randomness consumed by reparameterised
/// samplers. Implementations decide whether draws are fresh or replayed.
class NoiseSource {
 public:
  virtual ~NoiseSource() = default;
  virtual Tensor normal(const Shape& s) = 0;
  virtual double standard_gamma(double shape) = 0;
};

class RandomNoise final : public NoiseSource {
 public:
  explicit RandomNoise(std::uint64_t seed) : rng_(seed) {}
  Tensor normal(const Shape& s) override { return rng_.normal(s); }
  double standard_gamma(double shape) override { return rng_.standard_gamma(shape); }
  Rng& rng() { return rng_; }

 private:
  Rng rng_;
};

/// Records draws on the first pass; after replay() returns the same normals
/// and the same Gamma quantiles (re-inverted at the current shape), so a
/// function of the noise becomes deterministic for finite differencing.
class FrozenNoise final : public NoiseSource {
 public:
  explicit FrozenNoise(std::uint64_t seed) : rng_(seed) {}

  void replay() {
    replaying_ = true;
    normal_pos_ = 0;
    gamma_pos_ = 0;
  }

  Tensor normal(const Shape& s) override {
    if (!replaying_) {
      normals_.push_back(rng_.normal(s));
      return normals_.back();
    }
    if (normal_pos_ >= normals_.size() || normals_[normal_pos_].shape() != s)
      throw NumericalError("frozen noise replay diverged from the recorded draw sequence");
    return normals_[normal_pos_++];
  }

  double standard_gamma(double shape) override {
    if (!replaying_) {
      const double g = rng_.standard_gamma(shape);
      quantiles_.push_back(boost::math::gamma_p(shape, g));
      return g;
    }
    if (gamma_pos_ >= quantiles_.size()) throw NumericalError("frozen noise replay ran out of gamma draws");
    return boost::math::gamma_p_inv(shape, quantiles_[gamma_pos_++]);
  }

 private:
  Rng rng_;
  bool replaying_ = false;
  std::vector<Tensor> normals_;
  std::vector<double> quantiles_;
  std::size_t normal_pos_ = 0;
  std::size_t gamma_pos_ = 0;
};

}  // namespace gibayes
