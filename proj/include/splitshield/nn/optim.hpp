#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "splitshield/nn/model.hpp"

namespace splitshield::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One bias-corrected Adam update at step t (1-based).
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& st, std::uint64_t t,
                      double lr, const AdamConfig& cfg = {}) {
  require(params.size() == grads.size(), Errc::DimensionError, "adam: params/grads length mismatch");
  if (st.m.size() != params.size()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * grads[i];
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// Optimizer state for a whole model; frozen layers are skipped.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(SplitModel& model, const Gradients& grads, double lr) {
    if (moments_.size() != model.layers.size()) moments_.assign(model.layers.size(), {});
    ++t_;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      if (!is_trainable(model.layers[i])) continue;
      auto params = parameters(model.layers[i]);
      if (moments_[i].size() != params.size()) moments_[i].assign(params.size(), {});
      for (std::size_t p = 0; p < params.size(); ++p) adam_step(params[p], grads.layers[i][p], moments_[i][p], t_, lr, cfg_);
    }
  }

  std::uint64_t steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<AdamMoments>> moments_;
};

}  // namespace splitshield::nn
