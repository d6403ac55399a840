#pragma once

// Activation penalties pushing split-layer features toward uncorrelated Gaussians.

#include <cmath>
#include <cstddef>
#include <vector>

#include "splitshield/error.hpp"
#include "splitshield/nn/tensor.hpp"

namespace splitshield::nn {

struct Penalty {
  double value = 0.0;
  Batch grad;  // d value / d activations, same shape as the input batch
};

/// DeCov: 0.5 * (||C||_F^2 - ||diag(C)||^2) with C the batch covariance of the units
/// (mean-centred, normalised by the batch size).
inline Penalty decov_penalty(const Batch& acts) {
  require(acts.n >= 2, Errc::InsufficientBatch, "decov needs a batch of at least 2");
  const std::size_t n = acts.n, d = acts.example_size();
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> mean(d, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    const auto x = acts.example(e);
    for (std::size_t i = 0; i < d; ++i) mean[i] += x[i];
  }
  for (double& m : mean) m *= inv_n;
  std::vector<double> xc(acts.data.size());
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t i = 0; i < d; ++i) xc[e * d + i] = acts.data[e * d + i] - mean[i];

  // C = Xc^T Xc / n, symmetric
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    const double* r = xc.data() + e * d;
    for (std::size_t i = 0; i < d; ++i) {
      const double ri = r[i];
      if (ri == 0.0) continue;
      double* crow = cov.data() + i * d;
      for (std::size_t j = i + 1; j < d; ++j) crow[j] += ri * r[j];
    }
  }
  double value = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      double& c = cov[i * d + j];
      c *= inv_n;
      cov[j * d + i] = c;
      value += c * c;  // counted once; both triangles give the factor 2 that cancels 0.5
    }

  // dL/dX = (2/n) Xc G with G = C - diag(C)
  Penalty p{value, Batch(n, acts.shape)};
  for (std::size_t e = 0; e < n; ++e) {
    const double* r = xc.data() + e * d;
    double* g = p.grad.data.data() + e * d;
    for (std::size_t i = 0; i < d; ++i) {
      const double ri = r[i];
      if (ri == 0.0) continue;
      const double* crow = cov.data() + i * d;
      for (std::size_t j = 0; j < d; ++j)
        if (j != i) g[j] += 2.0 * inv_n * ri * crow[j];
    }
  }
  return p;
}

/// Sum over units of KL(N(mu_j, var_j) || N(0, sigma2)), where mu_j / var_j are the batch
/// moments (population variance). Zero exactly when every unit has mean 0, variance sigma2.
inline Penalty gauss_prior_penalty(const Batch& acts, double sigma2 = 1.0) {
  require(acts.n >= 2, Errc::InsufficientBatch, "gaussian prior penalty needs a batch of at least 2");
  require(sigma2 > 0.0, Errc::SpecError, "prior variance must be positive");
  constexpr double kVarFloor = 1e-12;
  const std::size_t n = acts.n, d = acts.example_size();
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t i = 0; i < d; ++i) mean[i] += acts.data[e * d + i];
  for (double& m : mean) m *= inv_n;
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t i = 0; i < d; ++i) {
      const double c = acts.data[e * d + i] - mean[i];
      var[i] += c * c;
    }
  for (double& v : var) v *= inv_n;

  Penalty p{0.0, Batch(n, acts.shape)};
  std::vector<double> dmu(d), dvar(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double v = std::max(var[i], kVarFloor);
    p.value += 0.5 * (v / sigma2 + mean[i] * mean[i] / sigma2 - 1.0 - std::log(v / sigma2));
    dmu[i] = mean[i] / sigma2;
    dvar[i] = var[i] > kVarFloor ? 0.5 * (1.0 / sigma2 - 1.0 / v) : 0.0;
  }
  for (std::size_t e = 0; e < n; ++e)
    for (std::size_t i = 0; i < d; ++i) {
      const double c = acts.data[e * d + i] - mean[i];
      p.grad.data[e * d + i] = inv_n * dmu[i] + 2.0 * inv_n * c * dvar[i];
    }
  return p;
}

}  // namespace splitshield::nn
