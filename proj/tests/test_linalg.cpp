#include <gtest/gtest.h>

#include <cmath>

#include "splitshield/linalg.hpp"
#include "splitshield/random.hpp"
#include "test_util.hpp"

namespace splitshield::linalg {
namespace {

using test::random_matrix;

double max_abs_orthogonality_error(const Matrix& q) {
  double worst = 0.0;
  for (std::size_t a = 0; a < q.cols(); ++a)
    for (std::size_t b = 0; b < q.cols(); ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < q.rows(); ++i) s += q(i, a) * q(i, b);
      worst = std::max(worst, std::abs(s - (a == b ? 1.0 : 0.0)));
    }
  return worst;
}

void expect_svd_invariants(const Matrix& w, const SvdBasis& b) {
  ASSERT_EQ(b.u.rows(), w.rows());
  ASSERT_EQ(b.v.rows(), w.cols());
  ASSERT_EQ(b.s.size(), std::min(w.rows(), w.cols()));
  EXPECT_LE(max_abs_orthogonality_error(b.u), 1e-9);
  EXPECT_LE(max_abs_orthogonality_error(b.v), 1e-9);
  for (std::size_t k = 0; k < b.s.size(); ++k) {
    EXPECT_GE(b.s[k], 0.0);
    if (k > 0) EXPECT_LE(b.s[k], b.s[k - 1]);
  }
  // Reconstruction oracle: multiply the factors back out directly.
  Matrix us(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t k = 0; k < b.s.size(); ++k) us(i, k) = b.u(i, k) * b.s[k];
  const Matrix rec = matmul(us, b.v.transpose());
  double err2 = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) err2 += std::pow(rec(i, j) - w(i, j), 2);
  EXPECT_LE(std::sqrt(err2), 1e-8 * std::max(1.0, frobenius_norm(w)));
}

TEST(Matrix, RejectsNonFiniteAndBadLength) {
  EXPECT_THROW(Matrix(2, 2, {1, 2, 3}), Error);
  EXPECT_THROW(Matrix(1, 2, {1, NAN}), Error);
  EXPECT_THROW(Vector({1.0, INFINITY}), Error);
}

TEST(Matvec, HandArithmetic) {
  EXPECT_EQ(matvec(Matrix::identity(3), Vector{1, 2, 3}), (Vector{1, 2, 3}));
  EXPECT_EQ(matvec(Matrix{{3, 0, 0}, {0, 1, 0}}, Vector{1, 2, 4}), (Vector{3, 2}));
  EXPECT_EQ(matvec(Matrix(2, 3), Vector{5, -1, 7}), (Vector{0, 0}));
}

TEST(Matvec, DimensionMismatch) {
  try {
    matvec(Matrix(2, 3), Vector{1, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionError);
  }
}

TEST(Norms, Basics) {
  EXPECT_DOUBLE_EQ(l2_norm(Vector{3, 4}), 5.0);
  EXPECT_DOUBLE_EQ(dot(Vector{1, 0}, Vector{0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(frobenius_norm(Matrix::identity(2)), std::sqrt(2.0));
  EXPECT_THROW(dot(Vector{1, 2}, Vector{1}), Error);
}

TEST(Svd, DiagonalIsItsOwnSvd) {
  const Matrix w{{2, 0}, {0, 1}};
  const SvdBasis b = svd(w);
  EXPECT_EQ(b.s, (Vector{2, 1}));
  EXPECT_EQ(b.u, Matrix::identity(2));
  EXPECT_EQ(b.v, Matrix::identity(2));
}

TEST(Svd, ZeroMatrix) {
  const SvdBasis b = svd(Matrix(3, 2));
  EXPECT_EQ(b.s, (Vector{0, 0}));
  EXPECT_EQ(b.u, Matrix::identity(3));
  EXPECT_EQ(b.v, Matrix::identity(2));
}

TEST(Svd, RandomReconstructsWithFixedSeed) {
  Rng rng(5);
  const Matrix w = random_matrix(5, 7, rng);
  expect_svd_invariants(w, svd(w));
}

TEST(Svd, InvariantsOverSeededShapes) {
  Rng rng(11);
  for (auto [m, n] : {std::pair{1, 1}, {1, 6}, {6, 1}, {4, 9}, {9, 4}, {8, 8}, {30, 17}, {12, 40}}) {
    const Matrix w = random_matrix(m, n, rng);
    SCOPED_TRACE(std::to_string(m) + "x" + std::to_string(n));
    expect_svd_invariants(w, svd(w));
  }
}

TEST(Svd, RankDeficientInputs) {
  Rng rng(3);
  // rank-2 product of 6x2 and 2x5 factors
  const Matrix w = matmul(random_matrix(6, 2, rng), random_matrix(2, 5, rng));
  const SvdBasis b = svd(w);
  expect_svd_invariants(w, b);
  EXPECT_LE(b.s[2], 1e-10 * b.s[0]);
  const Matrix wt = w.transpose();
  expect_svd_invariants(wt, svd(wt));
}

TEST(Svd, DeterministicForIdenticalInput) {
  Rng rng(8);
  const Matrix w = random_matrix(7, 5, rng);
  const SvdBasis a = svd(w), b = svd(w);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.s, b.s);
  EXPECT_EQ(a.v, b.v);
}

TEST(Svd, SignConventionLargestEntryPositive) {
  Rng rng(21);
  const SvdBasis b = svd(random_matrix(4, 6, rng));
  for (std::size_t k = 0; k < b.n; ++k) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < b.n; ++i)
      if (std::abs(b.v(i, k)) > std::abs(b.v(arg, k))) arg = i;
    EXPECT_GT(b.v(arg, k), 0.0);
  }
}

TEST(Svd, ParsevalOverRightBasis) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.index(8), n = 1 + rng.index(8);
    const SvdBasis b = svd(random_matrix(m, n, rng));
    std::vector<double> z(n);
    for (double& x : z) x = rng.normal();
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      double a = 0.0;
      for (std::size_t i = 0; i < n; ++i) a += b.v(i, k) * z[i];
      sum += a * a;
    }
    const double zz = dot(z, z);
    EXPECT_NEAR(sum, zz, 1e-9 * zz);
  }
}

TEST(Svd, ScaleEquivariant) {
  Rng rng(29);
  const Matrix w = random_matrix(5, 3, rng);
  const SvdBasis base = svd(w);
  for (double c : {-2.0, 0.5, 10.0}) {
    Matrix cw = w;
    for (double& x : cw.span()) x *= c;
    const SvdBasis scaled = svd(cw);
    for (std::size_t k = 0; k < base.s.size(); ++k)
      EXPECT_NEAR(scaled.s[k], std::abs(c) * base.s[k], 1e-9 * std::abs(c) * base.s[k]);
  }
}

TEST(Svd, RejectsEmpty) { EXPECT_THROW(svd(Matrix(0, 3)), Error); }

}  // namespace
}  // namespace splitshield::linalg
