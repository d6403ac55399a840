#pragma once

// Dense row-major matrices, vectors and a deterministic one-sided Jacobi SVD.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitshield/error.hpp"

namespace splitshield::linalg {

namespace detail {
inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}
}  // namespace detail

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t len) : data_(len, 0.0) {}
  explicit Vector(std::vector<double> data) : data_(std::move(data)) {
    require(detail::all_finite(data_), Errc::InvalidMatrix, "vector has non-finite entries");
  }
  Vector(std::initializer_list<double> init) : Vector(std::vector<double>(init)) {}

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, Errc::InvalidMatrix,
            "data length " + std::to_string(data_.size()) + " != rows*cols");
    require(detail::all_finite(data_), Errc::InvalidMatrix, "matrix has non-finite entries");
  }
  /// Row-list literal, e.g. `Matrix{{3, 0, 0}, {0, 1, 0}}`.
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      require(r.size() == cols_, Errc::InvalidMatrix, "ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    require(detail::all_finite(data_), Errc::InvalidMatrix, "matrix has non-finite entries");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  Vector column(std::size_t c) const {
    Vector v(rows_);
    for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
    return v;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), Errc::DimensionError,
          "dot of lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double dot(const Vector& a, const Vector& b) { return dot(a.span(), b.span()); }

inline double l2_norm(std::span<const double> x) {
  // Scaled accumulation avoids overflow for large entries.
  double scale = 0.0;
  for (double v : x) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return 0.0;
  double s = 0.0;
  for (double v : x) {
    const double t = v / scale;
    s += t * t;
  }
  return scale * std::sqrt(s);
}

inline double l2_norm(const Vector& x) { return l2_norm(x.span()); }

inline double frobenius_norm(const Matrix& w) { return l2_norm(w.span()); }

inline Vector matvec(const Matrix& w, std::span<const double> x) {
  require(w.cols() == x.size(), Errc::DimensionError,
          "matvec: matrix has " + std::to_string(w.cols()) + " cols, vector has " +
              std::to_string(x.size()));
  Vector y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

inline Vector matvec(const Matrix& w, const Vector& x) { return matvec(w, x.span()); }

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), Errc::DimensionError, "matmul inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

inline Vector subtract(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), Errc::DimensionError, "subtract: length mismatch");
  Vector d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

/// W = U diag(s) V^T with U (m x m) and V (n x n) orthogonal, s of length min(m, n),
/// sorted non-increasing. The columns of `v` are the right-singular vectors v_k.
struct SvdBasis {
  Matrix u;
  Vector s;
  Matrix v;
  std::size_t m = 0;
  std::size_t n = 0;

  /// Number of signal coefficients, min(m, n).
  std::size_t rank_bound() const noexcept { return s.size(); }

  /// Reassembles U diag(s) V^T.
  Matrix reconstruct() const {
    Matrix w(m, n);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double sk = s[k];
      if (sk == 0.0) continue;
      for (std::size_t i = 0; i < m; ++i) {
        const double a = u(i, k) * sk;
        auto wrow = w.row(i);
        for (std::size_t j = 0; j < n; ++j) wrow[j] += a * v(j, k);
      }
    }
    return w;
  }
};

namespace detail {

// Column-major scratch: cols[j] is a contiguous column of length `len`.
struct Columns {
  std::size_t len = 0;
  std::size_t count = 0;
  std::vector<double> data;

  Columns(std::size_t len_, std::size_t count_) : len(len_), count(count_), data(len_ * count_, 0.0) {}
  double* col(std::size_t j) { return data.data() + j * len; }
  const double* col(std::size_t j) const { return data.data() + j * len; }
};

inline double col_dot(const double* a, const double* b, std::size_t len) {
  double s = 0.0;
  for (std::size_t i = 0; i < len; ++i) s += a[i] * b[i];
  return s;
}

// Extends `basis` (k orthonormal columns of length len) to a full orthonormal basis of
// R^len. Candidates are the standard basis vectors, taken greedily by largest remaining
// residual norm so the accepted vectors stay well conditioned.
inline void complete_basis(Columns& basis, std::size_t k) {
  const std::size_t len = basis.len;
  std::vector<double> resid(len, 1.0);  // squared residual norm of e_j
  for (std::size_t c = 0; c < k; ++c) {
    const double* q = basis.col(c);
    for (std::size_t j = 0; j < len; ++j) resid[j] -= q[j] * q[j];
  }
  std::vector<char> used(len, 0);
  std::vector<double> cand(len);
  for (std::size_t c = k; c < basis.count; ++c) {
    std::size_t best = len;
    for (std::size_t j = 0; j < len; ++j)
      if (!used[j] && (best == len || resid[j] > resid[best])) best = j;
    used[best] = 1;
    std::fill(cand.begin(), cand.end(), 0.0);
    cand[best] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t p = 0; p < c; ++p) {
        const double* q = basis.col(p);
        const double proj = col_dot(q, cand.data(), len);
        for (std::size_t i = 0; i < len; ++i) cand[i] -= proj * q[i];
      }
    }
    const double nrm = std::sqrt(col_dot(cand.data(), cand.data(), len));
    if (!(nrm > 1e-8)) fail(Errc::NumericalFailure, "basis completion lost orthogonality");
    double* out = basis.col(c);
    for (std::size_t i = 0; i < len; ++i) {
      out[i] = cand[i] / nrm;
      resid[i] -= out[i] * out[i];
    }
  }
}

// One-sided Jacobi on the columns of `a` (len x count, count <= len). On return the
// columns of `a` are mutually orthogonal and `rot` (count x count, columns) holds the
// accumulated rotation.
inline void jacobi_columns(Columns& a, Columns& rot, double frob2) {
  constexpr int kMaxSweeps = 100;
  constexpr double kRelFloor = 1e-15;
  const double abs_tol = 1e-12 * frob2;
  const std::size_t len = a.len;
  const std::size_t cnt = a.count;
  for (std::size_t j = 0; j < cnt; ++j) rot.col(j)[j] = 1.0;

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double max_off = 0.0;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cnt; ++p) {
      for (std::size_t q = p + 1; q < cnt; ++q) {
        double* ap = a.col(p);
        double* aq = a.col(q);
        const double app = col_dot(ap, ap, len);
        const double aqq = col_dot(aq, aq, len);
        const double apq = col_dot(ap, aq, len);
        max_off = std::max(max_off, std::abs(apq));
        if (apq == 0.0 || std::abs(apq) <= kRelFloor * std::sqrt(app * aqq)) continue;
        rotated = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t i = 0; i < len; ++i) {
          const double x = ap[i], y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        double* vp = rot.col(p);
        double* vq = rot.col(q);
        for (std::size_t i = 0; i < cnt; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated || max_off <= abs_tol) return;
  }
  fail(Errc::NumericalFailure, "Jacobi SVD did not converge within 100 sweeps");
}

}  // namespace detail

/// Deterministic SVD by one-sided Jacobi applied to whichever of W, W^T has fewer
/// columns. Singular vectors are sign-normalised so that the largest-magnitude entry of
/// every v_k is positive (u_k flipped with it).
inline SvdBasis svd(const Matrix& w) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  require(m >= 1 && n >= 1, Errc::InvalidMatrix, "svd of an empty matrix");
  require(detail::all_finite(w.span()), Errc::InvalidMatrix, "svd input has non-finite entries");

  const bool tall = n <= m;  // rotate the columns of W (tall) or of W^T (wide)
  const std::size_t len = tall ? m : n;
  const std::size_t cnt = tall ? n : m;
  const std::size_t r = cnt;

  detail::Columns a(len, cnt);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (tall) a.col(j)[i] = w(i, j);
      else a.col(i)[j] = w(i, j);
    }
  const double fro = frobenius_norm(w);
  detail::Columns rot(cnt, cnt);
  detail::jacobi_columns(a, rot, fro * fro);

  std::vector<double> norms(cnt);
  for (std::size_t j = 0; j < cnt; ++j) norms[j] = std::sqrt(detail::col_dot(a.col(j), a.col(j), len));
  std::vector<std::size_t> order(cnt);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  // `rot` columns are singular vectors of the rotated side; `a` columns / norm are the
  // singular vectors of the other side.
  detail::Columns side_rot(cnt, cnt);
  detail::Columns side_a(len, len);
  std::vector<double> s(r);
  std::size_t filled = 0;
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t j = order[k];
    s[k] = norms[j];
    std::copy_n(rot.col(j), cnt, side_rot.col(k));
  }
  for (std::size_t k = 0; k < r; ++k) {
    if (!(s[k] > 0.0)) break;
    double* out = side_a.col(filled);
    std::copy_n(a.col(order[k]), len, out);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t p = 0; p < filled; ++p) {
        const double proj = detail::col_dot(side_a.col(p), out, len);
        for (std::size_t i = 0; i < len; ++i) out[i] -= proj * side_a.col(p)[i];
      }
    const double nrm = std::sqrt(detail::col_dot(out, out, len));
    if (!(nrm > 0.0)) break;
    for (std::size_t i = 0; i < len; ++i) out[i] /= nrm;
    ++filled;
  }
  detail::complete_basis(side_a, filled);

  SvdBasis out;
  out.m = m;
  out.n = n;
  out.s = Vector(std::move(s));
  out.u = Matrix(m, m);
  out.v = Matrix(n, n);
  const detail::Columns& ucols = tall ? side_a : side_rot;
  const detail::Columns& vcols = tall ? side_rot : side_a;
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = ucols.col(k)[i];
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = vcols.col(k)[i];

  for (std::size_t k = 0; k < n; ++k) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(out.v(i, k)) > std::abs(out.v(arg, k))) arg = i;
    if (out.v(arg, k) >= 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = -out.v(i, k);
    if (k < r)
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = -out.u(i, k);
  }
  return out;
}

}  // namespace splitshield::linalg
