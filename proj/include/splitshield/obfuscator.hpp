#pragma once

// Coefficient-space obfuscation of a feature vector z with respect to the first linear
// layer W of the server model.
//
// With W = U S V^T, z is expanded in the right-singular basis, alpha_k = v_k^T z, sorted by
// non-increasing singular value. Only the first r = min(m, n) coefficients reach W's output
// (signal content); the rest are null content and can be dropped at zero distortion. Any
// coefficient change costs |delta_k| * s_k of output distortion, so under a budget the
// cheapest coefficients (smallest s_k) are zeroed first and the boundary coefficient is
// shrunk until the budget is exactly spent.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "splitshield/error.hpp"
#include "splitshield/linalg.hpp"

namespace splitshield::obf {

using linalg::Matrix;
using linalg::SvdBasis;
using linalg::Vector;

struct DistortionFree {
  friend bool operator==(const DistortionFree&, const DistortionFree&) = default;
};
struct Budget {
  double epsilon = 0.0;
  friend bool operator==(const Budget&, const Budget&) = default;
};
struct TopM {
  std::size_t m_prime = 0;
  friend bool operator==(const TopM&, const TopM&) = default;
};
using Mode = std::variant<DistortionFree, Budget, TopM>;

inline std::string mode_name(const Mode& mode) {
  if (std::holds_alternative<DistortionFree>(mode)) return "free";
  if (std::holds_alternative<Budget>(mode)) return "budget";
  return "topm";
}

struct Coefficients {
  Vector alpha;
};

struct ObfuscationResult {
  std::size_t m_prime = 0;
  Vector alpha_prime;  // length n, zero beyond m_prime
  double gamma = 0.0;
  double achieved_distortion = 0.0;
  Mode mode = DistortionFree{};
  bool degenerate_singular_value = false;
};

/// Per-coefficient empirical variance of alpha over a calibration set.
struct CalibrationStats {
  Vector sigma2;
  std::size_t count = 0;
};

namespace detail {
inline void check_len(std::span<const double> z, const SvdBasis& basis) {
  require(z.size() == basis.n, Errc::DimensionError,
          "feature length " + std::to_string(z.size()) + " != basis n " + std::to_string(basis.n));
}

inline bool has_zero_singular_value(const SvdBasis& basis) {
  const double s1 = basis.s.empty() ? 0.0 : basis.s[0];
  for (double s : basis.s)
    if (s <= 1e-12 * s1 || s == 0.0) return true;
  return false;
}
}  // namespace detail

inline Coefficients decompose(std::span<const double> z, const SvdBasis& basis) {
  detail::check_len(z, basis);
  const std::size_t n = basis.n;
  std::vector<double> alpha(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double zi = z[i];
    if (zi == 0.0) continue;
    const auto vrow = basis.v.row(i);
    for (std::size_t k = 0; k < n; ++k) alpha[k] += vrow[k] * zi;
  }
  return {Vector(std::move(alpha))};
}

inline Coefficients decompose(const Vector& z, const SvdBasis& basis) { return decompose(z.span(), basis); }

/// z' = sum_k alpha'_k v_k; alpha' may be a prefix (length <= n).
inline Vector reconstruct(std::span<const double> alpha_prime, const SvdBasis& basis) {
  require(alpha_prime.size() <= basis.n, Errc::DimensionError,
          "coefficient count " + std::to_string(alpha_prime.size()) + " exceeds n " + std::to_string(basis.n));
  Vector z(basis.n);
  for (std::size_t i = 0; i < basis.n; ++i) {
    const auto vrow = basis.v.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < alpha_prime.size(); ++k) s += vrow[k] * alpha_prime[k];
    z[i] = s;
  }
  return z;
}

inline Vector reconstruct(const Coefficients& c, const SvdBasis& basis) { return reconstruct(c.alpha.span(), basis); }
inline Vector reconstruct(const ObfuscationResult& r, const SvdBasis& basis) {
  return reconstruct(r.alpha_prime.span(), basis);
}

/// z_S: the component of z in the row space of W.
inline Vector signal_content(std::span<const double> z, const SvdBasis& basis) {
  detail::check_len(z, basis);
  const std::size_t r = basis.rank_bound();
  if (r == basis.n) return Vector(std::vector<double>(z.begin(), z.end()));
  std::vector<double> alpha = decompose(z, basis).alpha.values();
  alpha.resize(r);
  return reconstruct(alpha, basis);
}

/// z_N = z - z_S, annihilated by W.
inline Vector null_content(std::span<const double> z, const SvdBasis& basis) {
  const Vector zs = signal_content(z, basis);
  Vector zn(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) zn[i] = z[i] - zs[i];
  return zn;
}

/// ||W(z - z')|| evaluated in coefficient space: sqrt(sum_{k<=r} (alpha_k - alpha'_k)^2 s_k^2).
inline double coefficient_distortion(std::span<const double> alpha, std::span<const double> alpha_prime,
                                     const SvdBasis& basis) {
  const std::size_t r = basis.rank_bound();
  std::vector<double> terms(r);
  for (std::size_t k = 0; k < r; ++k) {
    const double a = k < alpha.size() ? alpha[k] : 0.0;
    const double ap = k < alpha_prime.size() ? alpha_prime[k] : 0.0;
    terms[k] = (a - ap) * basis.s[k];
  }
  return linalg::l2_norm(terms);
}

/// ||W(z - z')|| by direct multiplication.
inline double direct_distortion(const Matrix& w, std::span<const double> z, std::span<const double> z_prime) {
  require(z.size() == z_prime.size(), Errc::DimensionError, "direct_distortion: length mismatch");
  std::vector<double> d(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) d[i] = z[i] - z_prime[i];
  return linalg::l2_norm(linalg::matvec(w, d));
}

/// Keeps the m' leading signal coefficients and zeroes the rest.
inline ObfuscationResult obfuscate_topm(std::span<const double> z, const SvdBasis& basis, std::size_t m_prime) {
  detail::check_len(z, basis);
  const std::size_t r = basis.rank_bound();
  require(m_prime <= r, Errc::InvalidM,
          "m' = " + std::to_string(m_prime) + " exceeds signal dimension " + std::to_string(r));
  const Coefficients c = decompose(z, basis);
  std::vector<double> ap(basis.n, 0.0);
  std::copy_n(c.alpha.begin(), m_prime, ap.begin());
  ObfuscationResult res;
  res.m_prime = m_prime;
  res.alpha_prime = Vector(std::move(ap));
  res.gamma = 0.0;
  res.achieved_distortion = coefficient_distortion(c.alpha.span(), res.alpha_prime.span(), basis);
  res.mode = TopM{m_prime};
  res.degenerate_singular_value = detail::has_zero_singular_value(basis);
  return res;
}

/// Minimum-entropy z' with ||W(z - z')|| <= epsilon.
///
/// With eps_k = sqrt(sum_{i=k+1}^{r} alpha_i^2 s_i^2), m' is the smallest k in {0..r} with
/// eps_k <= epsilon; coefficients past m' are zeroed and alpha_{m'} is pulled toward zero
/// by gamma = sqrt(epsilon^2 - eps_{m'}^2) / s_{m'}. m' = 0 zeroes everything.
inline ObfuscationResult obfuscate_budget(std::span<const double> z, const SvdBasis& basis, double epsilon) {
  detail::check_len(z, basis);
  require(std::isfinite(epsilon) && epsilon >= 0.0, Errc::InvalidBudget,
          "epsilon must be finite and non-negative, got " + std::to_string(epsilon));
  const std::size_t r = basis.rank_bound();
  const Coefficients c = decompose(z, basis);
  const auto& alpha = c.alpha;

  // suffix[k] = eps_k^2, accumulated from the tail for accuracy.
  std::vector<double> suffix(r + 1, 0.0);
  for (std::size_t k = r; k-- > 0;) {
    const double t = alpha[k] * basis.s[k];
    suffix[k] = suffix[k + 1] + t * t;
  }
  const double eps2 = epsilon * epsilon;
  std::size_t m_prime = 0;
  while (m_prime < r && std::sqrt(suffix[m_prime]) > epsilon) ++m_prime;

  std::vector<double> ap(basis.n, 0.0);
  double gamma = 0.0;
  if (m_prime > 0) {
    std::copy_n(alpha.begin(), m_prime, ap.begin());
    const std::size_t b = m_prime - 1;  // 0-based boundary index
    const double sb = basis.s[b];
    // suffix[b] > eps2 >= suffix[m'] forces alpha_b * s_b != 0, so s_b > 0 here.
    gamma = std::sqrt(std::max(0.0, eps2 - suffix[m_prime])) / sb;
    gamma = std::min(gamma, std::abs(alpha[b]));
    ap[b] = alpha[b] - gamma * (alpha[b] > 0.0 ? 1.0 : (alpha[b] < 0.0 ? -1.0 : 0.0));
  }

  ObfuscationResult res;
  res.m_prime = m_prime;
  res.alpha_prime = Vector(std::move(ap));
  res.gamma = gamma;
  res.achieved_distortion = coefficient_distortion(alpha.span(), res.alpha_prime.span(), basis);
  res.mode = Budget{epsilon};
  res.degenerate_singular_value = detail::has_zero_singular_value(basis);
  return res;
}

inline ObfuscationResult obfuscate(std::span<const double> z, const SvdBasis& basis, const Mode& mode) {
  if (const auto* b = std::get_if<Budget>(&mode)) return obfuscate_budget(z, basis, b->epsilon);
  if (const auto* t = std::get_if<TopM>(&mode)) return obfuscate_topm(z, basis, t->m_prime);
  ObfuscationResult res = obfuscate_topm(z, basis, basis.rank_bound());
  res.mode = DistortionFree{};
  return res;
}

/// Per-coefficient variance of alpha over `zs` (population normalisation).
inline CalibrationStats calibrate(std::span<const Vector> zs, const SvdBasis& basis) {
  require(zs.size() >= 2, Errc::InsufficientBatch, "calibration needs at least 2 examples");
  const std::size_t n = basis.n;
  std::vector<double> mean(n, 0.0), m2(n, 0.0);
  std::size_t count = 0;
  for (const Vector& z : zs) {
    const Coefficients c = decompose(z, basis);
    ++count;
    for (std::size_t k = 0; k < n; ++k) {
      const double d = c.alpha[k] - mean[k];
      mean[k] += d / static_cast<double>(count);
      m2[k] += d * (c.alpha[k] - mean[k]);
    }
  }
  for (double& v : m2) v /= static_cast<double>(count);
  return {Vector(std::move(m2)), count};
}

/// Gaussian entropy proxy of the m' retained coefficients: sum_k 0.5 ln(2 pi e sigma_k^2).
inline double entropy_proxy(const CalibrationStats& stats, std::size_t m_prime) {
  require(m_prime <= stats.sigma2.size(), Errc::InvalidM,
          "m' = " + std::to_string(m_prime) + " exceeds calibrated coefficients");
  constexpr double kTwoPiE = 2.0 * std::numbers::pi * std::numbers::e;
  double h = 0.0;
  for (std::size_t k = 0; k < m_prime; ++k) h += 0.5 * std::log(kTwoPiE * std::max(stats.sigma2[k], 1e-12));
  return h;
}

/// C_S(z) = ln(||z_S||^2 / ||z||^2), floored at -50; NaN when ||z|| = 0.
inline double signal_log_ratio(std::span<const double> z, const SvdBasis& basis) {
  constexpr double kFloor = -50.0;
  const double zn = linalg::l2_norm(z);
  if (zn == 0.0) return std::numeric_limits<double>::quiet_NaN();
  const double sn = linalg::l2_norm(signal_content(z, basis));
  if (sn == 0.0) return kFloor;
  return std::clamp(2.0 * std::log(sn / zn), kFloor, 0.0);
}

}  // namespace splitshield::obf
