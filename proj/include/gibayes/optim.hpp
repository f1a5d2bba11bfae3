#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "priors.hpp"

namespace gibayes {

/// Stored parameters are kept near unit scale; the forward pass divides by
/// √fan_in to get the effective weight.
inline Var scaled_param(const Var& raw, std::size_t fan_in) {
  if (fan_in == 0) throw DomainError("fan-in must be at least 1");
  if (fan_in == 1) return raw;
  return scale(raw, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

/// Effective value of a parameter stored with a constant multiplier.
inline Var multiplied(const Var& raw, double factor) { return factor == 1.0 ? raw : scale(raw, factor); }

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<NamedParam> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  /// Applies one update from the gradients currently held by the parameters.
  /// Returns false (and leaves everything unchanged) if any gradient is not finite.
  bool step() {
    std::vector<Tensor> grads;
    grads.reserve(params_.size());
    for (const auto& p : params_) grads.push_back(p.var.grad());
    return step(grads);
  }

  bool step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size()) throw ShapeError("adam: gradient count does not match parameter count");
    for (std::size_t k = 0; k < grads.size(); ++k) {
      if (grads[k].shape() != params_[k].var.shape())
        throw ShapeError("adam: gradient shape mismatch for " + params_[k].name);
      if (!grads[k].all_finite()) {
        ++skipped_;
        last_skipped_ = true;
        return false;
      }
    }
    last_skipped_ = false;
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < grads.size(); ++k) {
      Tensor& x = params_[k].var.mutable_value();
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      const Tensor& g = grads[k];
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        x[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
    return true;
  }

  std::size_t steps() const { return t_; }
  std::size_t skipped() const { return skipped_; }
  bool last_skipped() const { return last_skipped_; }
  const std::vector<NamedParam>& params() const { return params_; }
  double lr() const { return cfg_.lr; }

 private:
  std::vector<NamedParam> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
  bool last_skipped_ = false;
};

/// Step-wise KL warm-up: 0 for the first `step_epochs` epochs, then rising by
/// `increment` every `step_epochs` until it reaches 1.
struct TemperSchedule {
  bool enabled = true;
  std::size_t step_epochs = 10;
  double increment = 0.1;
};

inline double kl_scale(std::size_t epoch, const TemperSchedule& s = {}) {
  if (!s.enabled) return 1.0;
  const double steps = std::floor(static_cast<double>(epoch) / static_cast<double>(s.step_epochs));
  const double v = s.increment == 0.1 ? steps / 10.0 : steps * s.increment;
  return std::min(1.0, v);
}

}  // namespace gibayes
