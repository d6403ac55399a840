#pragma once

#include "splitshield/linalg.hpp"
#include "splitshield/random.hpp"

namespace splitshield::test {

inline linalg::Matrix random_matrix(std::size_t m, std::size_t n, Rng& rng) {
  std::vector<double> d(m * n);
  for (double& x : d) x = rng.normal();
  return linalg::Matrix(m, n, std::move(d));
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace splitshield::test
