#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "splitshield/error.hpp"

namespace splitshield::nn {

/// Per-example activation shape (channels, height, width). Flat features use (d, 1, 1).
struct Shape3 {
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t size() const noexcept { return c * h * w; }
  friend constexpr bool operator==(const Shape3&, const Shape3&) = default;

  std::string str() const {
    return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// A batch of examples stored contiguously, example-major.
struct Batch {
  std::size_t n = 0;
  Shape3 shape;
  std::vector<double> data;

  Batch() = default;
  Batch(std::size_t n_, Shape3 shape_) : n(n_), shape(shape_), data(n_ * shape_.size(), 0.0) {}
  Batch(std::size_t n_, Shape3 shape_, std::vector<double> data_) : n(n_), shape(shape_), data(std::move(data_)) {
    require(data.size() == n * shape.size(), Errc::ShapeError, "batch data length does not match n * shape");
  }

  std::size_t example_size() const noexcept { return shape.size(); }
  std::span<double> example(std::size_t i) { return {data.data() + i * shape.size(), shape.size()}; }
  std::span<const double> example(std::size_t i) const { return {data.data() + i * shape.size(), shape.size()}; }

  friend bool operator==(const Batch&, const Batch&) = default;
};

/// Copies the selected examples of `src` into a new batch.
inline Batch gather(const Batch& src, std::span<const std::size_t> indices) {
  Batch out(indices.size(), src.shape);
  const std::size_t d = src.example_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < src.n, Errc::ShapeError, "gather index out of range");
    const auto e = src.example(indices[i]);
    std::copy(e.begin(), e.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

}  // namespace splitshield::nn
