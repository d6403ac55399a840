#pragma once

// Layer kinds of the split network and their forward/backward kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "splitshield/error.hpp"
#include "splitshield/linalg.hpp"
#include "splitshield/nn/tensor.hpp"
#include "splitshield/random.hpp"

namespace splitshield::nn {

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
struct Conv {
  Shape3 in;
  std::size_t out_channels = 0;
  std::vector<double> weight;  // [out][in_c][3][3]
  std::vector<double> bias;    // [out]
  bool trainable = true;

  static constexpr std::size_t kTaps = 9;
  std::size_t patch() const noexcept { return in.c * kTaps; }
};

struct Relu {
  Shape3 in;
};

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
struct MaxPool {
  Shape3 in;
};

/// Per-channel batch normalisation; statistics pool over batch and spatial positions.
struct BatchNorm {
  Shape3 in;
  std::vector<double> scale;
  std::vector<double> offset;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  bool trainable = true;
};

struct FullyConnected {
  Shape3 in;
  std::size_t out_features = 0;
  std::vector<double> weight;  // [out][in]
  std::vector<double> bias;
  bool trainable = true;

  std::size_t in_features() const noexcept { return in.size(); }

  linalg::Matrix weight_matrix() const { return linalg::Matrix(out_features, in_features(), weight); }
};

struct Softmax {
  Shape3 in;
};

using Layer = std::variant<Conv, Relu, MaxPool, BatchNorm, FullyConnected, Softmax>;

inline std::string kind_name(const Layer& l) {
  static constexpr const char* kNames[] = {"conv", "relu", "maxpool", "batchnorm", "fc", "softmax"};
  return kNames[l.index()];
}

inline Shape3 input_shape(const Layer& l) {
  return std::visit([](const auto& x) { return x.in; }, l);
}

inline Shape3 output_shape(const Layer& l) {
  return std::visit(
      [](const auto& x) -> Shape3 {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, Conv>) return {x.out_channels, x.in.h, x.in.w};
        else if constexpr (std::is_same_v<T, MaxPool>) return {x.in.c, x.in.h / 2, x.in.w / 2};
        else if constexpr (std::is_same_v<T, FullyConnected>) return {x.out_features, 1, 1};
        else return x.in;
      },
      l);
}

inline bool is_linear(const Layer& l) {
  return std::holds_alternative<Conv>(l) || std::holds_alternative<FullyConnected>(l);
}

/// Mutable views of a layer's learnable tensors, in declaration order.
inline std::vector<std::span<double>> parameters(Layer& l) {
  if (auto* c = std::get_if<Conv>(&l)) return {c->weight, c->bias};
  if (auto* f = std::get_if<FullyConnected>(&l)) return {f->weight, f->bias};
  if (auto* b = std::get_if<BatchNorm>(&l)) return {b->scale, b->offset};
  return {};
}

inline std::vector<std::span<const double>> parameters(const Layer& l) {
  if (const auto* c = std::get_if<Conv>(&l)) return {c->weight, c->bias};
  if (const auto* f = std::get_if<FullyConnected>(&l)) return {f->weight, f->bias};
  if (const auto* b = std::get_if<BatchNorm>(&l)) return {b->scale, b->offset};
  return {};
}

inline bool is_trainable(const Layer& l) {
  if (const auto* c = std::get_if<Conv>(&l)) return c->trainable;
  if (const auto* f = std::get_if<FullyConnected>(&l)) return f->trainable;
  if (const auto* b = std::get_if<BatchNorm>(&l)) return b->trainable;
  return false;
}

// ---------------------------------------------------------------------------
// Construction

inline Conv make_conv(Shape3 in, std::size_t out_channels, Rng& rng) {
  Conv c{in, out_channels, std::vector<double>(out_channels * in.c * Conv::kTaps), std::vector<double>(out_channels, 0.0)};
  const double bound = std::sqrt(6.0 / static_cast<double>(c.patch()));
  for (double& w : c.weight) w = rng.uniform(-bound, bound);
  return c;
}

inline FullyConnected make_fc(Shape3 in, std::size_t out_features, Rng& rng) {
  FullyConnected f{in, out_features, std::vector<double>(out_features * in.size()), std::vector<double>(out_features, 0.0)};
  const double bound = std::sqrt(6.0 / static_cast<double>(in.size()));
  for (double& w : f.weight) w = rng.uniform(-bound, bound);
  return f;
}

inline BatchNorm make_batchnorm(Shape3 in) {
  return BatchNorm{in, std::vector<double>(in.c, 1.0), std::vector<double>(in.c, 0.0),
                   std::vector<double>(in.c, 0.0), std::vector<double>(in.c, 1.0)};
}

// ---------------------------------------------------------------------------
// Kernels

struct BnBatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

namespace kernel {

inline void im2col(const Shape3& s, const double* img, double* col) {
  const std::size_t hw = s.h * s.w;
  for (std::size_t ic = 0; ic < s.c; ++ic)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = col + ((ic * 3 + ky) * 3 + kx) * hw;
        for (std::size_t y = 0; y < s.h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          for (std::size_t x = 0; x < s.w; ++x) {
            const long sx = static_cast<long>(x + kx) - 1;
            const bool inside = sy >= 0 && sy < static_cast<long>(s.h) && sx >= 0 && sx < static_cast<long>(s.w);
            row[y * s.w + x] = inside ? img[(ic * s.h + static_cast<std::size_t>(sy)) * s.w + static_cast<std::size_t>(sx)] : 0.0;
          }
        }
      }
}

inline void col2im_add(const Shape3& s, const double* col, double* img) {
  const std::size_t hw = s.h * s.w;
  for (std::size_t ic = 0; ic < s.c; ++ic)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = col + ((ic * 3 + ky) * 3 + kx) * hw;
        for (std::size_t y = 0; y < s.h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(s.h)) continue;
          for (std::size_t x = 0; x < s.w; ++x) {
            const long sx = static_cast<long>(x + kx) - 1;
            if (sx < 0 || sx >= static_cast<long>(s.w)) continue;
            img[(ic * s.h + static_cast<std::size_t>(sy)) * s.w + static_cast<std::size_t>(sx)] += row[y * s.w + x];
          }
        }
      }
}

}  // namespace kernel

// Forward: `out` is sized by the caller. BatchNorm in training mode fills `stats`.

inline void forward(const Conv& l, const Batch& in, Batch& out, bool, BnBatchStats*) {
  const std::size_t hw = l.in.h * l.in.w;
  const std::size_t patch = l.patch();
  std::vector<double> col(patch * hw);
  for (std::size_t n = 0; n < in.n; ++n) {
    kernel::im2col(l.in, in.example(n).data(), col.data());
    double* o = out.example(n).data();
    for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
      double* orow = o + oc * hw;
      std::fill(orow, orow + hw, l.bias[oc]);
      const double* wrow = l.weight.data() + oc * patch;
      for (std::size_t j = 0; j < patch; ++j) {
        const double w = wrow[j];
        const double* crow = col.data() + j * hw;
        for (std::size_t p = 0; p < hw; ++p) orow[p] += w * crow[p];
      }
    }
  }
}

inline void forward(const Relu&, const Batch& in, Batch& out, bool, BnBatchStats*) {
  for (std::size_t i = 0; i < in.data.size(); ++i) out.data[i] = in.data[i] > 0.0 ? in.data[i] : 0.0;
}

inline void forward(const MaxPool& l, const Batch& in, Batch& out, bool, BnBatchStats*) {
  const std::size_t oh = l.in.h / 2, ow = l.in.w / 2;
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    double* o = out.example(n).data();
    for (std::size_t c = 0; c < l.in.c; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double* base = x + (c * l.in.h + 2 * y) * l.in.w + 2 * xx;
          o[(c * oh + y) * ow + xx] = std::max(std::max(base[0], base[1]), std::max(base[l.in.w], base[l.in.w + 1]));
        }
  }
}

namespace kernel {
inline void bn_batch_stats(const BatchNorm& l, const Batch& in, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t hw = l.in.h * l.in.w;
  const double count = static_cast<double>(in.n * hw);
  mean.assign(l.in.c, 0.0);
  var.assign(l.in.c, 0.0);
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    for (std::size_t c = 0; c < l.in.c; ++c)
      for (std::size_t p = 0; p < hw; ++p) mean[c] += x[c * hw + p];
  }
  for (double& m : mean) m /= count;
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    for (std::size_t c = 0; c < l.in.c; ++c)
      for (std::size_t p = 0; p < hw; ++p) {
        const double d = x[c * hw + p] - mean[c];
        var[c] += d * d;
      }
  }
  for (double& v : var) v /= count;
}
}  // namespace kernel

inline void forward(const BatchNorm& l, const Batch& in, Batch& out, bool train, BnBatchStats* stats) {
  const std::size_t hw = l.in.h * l.in.w;
  std::vector<double> mean, var;
  if (train) {
    kernel::bn_batch_stats(l, in, mean, var);
    if (stats) *stats = {mean, var};
  } else {
    mean = l.running_mean;
    var = l.running_var;
  }
  std::vector<double> mul(l.in.c), add(l.in.c);
  for (std::size_t c = 0; c < l.in.c; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + l.eps);
    mul[c] = l.scale[c] * inv;
    add[c] = l.offset[c] - mean[c] * mul[c];
  }
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    double* o = out.example(n).data();
    for (std::size_t c = 0; c < l.in.c; ++c)
      for (std::size_t p = 0; p < hw; ++p) o[c * hw + p] = x[c * hw + p] * mul[c] + add[c];
  }
}

inline void forward(const FullyConnected& l, const Batch& in, Batch& out, bool, BnBatchStats*) {
  const std::size_t d = l.in_features();
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    double* o = out.example(n).data();
    for (std::size_t j = 0; j < l.out_features; ++j) {
      const double* w = l.weight.data() + j * d;
      double s = l.bias[j];
      for (std::size_t i = 0; i < d; ++i) s += w[i] * x[i];
      o[j] = s;
    }
  }
}

inline void forward(const Softmax& l, const Batch& in, Batch& out, bool, BnBatchStats*) {
  const std::size_t d = l.in.size();
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    double* o = out.example(n).data();
    const double mx = *std::max_element(x, x + d);
    double sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) sum += (o[i] = std::exp(x[i] - mx));
    for (std::size_t i = 0; i < d; ++i) o[i] /= sum;
  }
}

// Backward: accumulates parameter gradients into `grads` (aligned with parameters())
// and, if `gin` is non-null, writes the input gradient.

inline void backward(const Conv& l, const Batch& in, const Batch&, const Batch& gout, Batch* gin,
                     std::vector<std::vector<double>>& grads) {
  const std::size_t hw = l.in.h * l.in.w;
  const std::size_t patch = l.patch();
  std::vector<double> col(patch * hw), dcol(patch * hw);
  auto& gw = grads[0];
  auto& gb = grads[1];
  for (std::size_t n = 0; n < in.n; ++n) {
    kernel::im2col(l.in, in.example(n).data(), col.data());
    const double* g = gout.example(n).data();
    for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
      const double* grow = g + oc * hw;
      double bsum = 0.0;
      for (std::size_t p = 0; p < hw; ++p) bsum += grow[p];
      gb[oc] += bsum;
      double* gwrow = gw.data() + oc * patch;
      for (std::size_t j = 0; j < patch; ++j) {
        const double* crow = col.data() + j * hw;
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += grow[p] * crow[p];
        gwrow[j] += s;
      }
    }
    if (gin) {
      std::fill(dcol.begin(), dcol.end(), 0.0);
      for (std::size_t oc = 0; oc < l.out_channels; ++oc) {
        const double* grow = g + oc * hw;
        const double* wrow = l.weight.data() + oc * patch;
        for (std::size_t j = 0; j < patch; ++j) {
          const double w = wrow[j];
          double* drow = dcol.data() + j * hw;
          for (std::size_t p = 0; p < hw; ++p) drow[p] += w * grow[p];
        }
      }
      double* gi = gin->example(n).data();
      std::fill(gi, gi + l.in.size(), 0.0);
      kernel::col2im_add(l.in, dcol.data(), gi);
    }
  }
}

inline void backward(const Relu&, const Batch& in, const Batch&, const Batch& gout, Batch* gin,
                     std::vector<std::vector<double>>&) {
  if (!gin) return;
  for (std::size_t i = 0; i < in.data.size(); ++i) gin->data[i] = in.data[i] > 0.0 ? gout.data[i] : 0.0;
}

inline void backward(const MaxPool& l, const Batch& in, const Batch&, const Batch& gout, Batch* gin,
                     std::vector<std::vector<double>>&) {
  if (!gin) return;
  std::fill(gin->data.begin(), gin->data.end(), 0.0);
  const std::size_t oh = l.in.h / 2, ow = l.in.w / 2;
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    const double* g = gout.example(n).data();
    double* gi = gin->example(n).data();
    for (std::size_t c = 0; c < l.in.c; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const std::size_t base = (c * l.in.h + 2 * y) * l.in.w + 2 * xx;
          const std::size_t cand[4] = {base, base + 1, base + l.in.w, base + l.in.w + 1};
          std::size_t arg = cand[0];
          for (std::size_t k = 1; k < 4; ++k)
            if (x[cand[k]] > x[arg]) arg = cand[k];
          gi[arg] += g[(c * oh + y) * ow + xx];
        }
  }
}

inline void backward(const BatchNorm& l, const Batch& in, const Batch&, const Batch& gout, Batch* gin,
                     std::vector<std::vector<double>>& grads) {
  const std::size_t hw = l.in.h * l.in.w;
  const double count = static_cast<double>(in.n * hw);
  std::vector<double> mean, var;
  kernel::bn_batch_stats(l, in, mean, var);
  std::vector<double> inv(l.in.c), sum_g(l.in.c, 0.0), sum_gx(l.in.c, 0.0);
  for (std::size_t c = 0; c < l.in.c; ++c) inv[c] = 1.0 / std::sqrt(var[c] + l.eps);
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    const double* g = gout.example(n).data();
    for (std::size_t c = 0; c < l.in.c; ++c)
      for (std::size_t p = 0; p < hw; ++p) {
        const double xhat = (x[c * hw + p] - mean[c]) * inv[c];
        sum_g[c] += g[c * hw + p];
        sum_gx[c] += g[c * hw + p] * xhat;
      }
  }
  for (std::size_t c = 0; c < l.in.c; ++c) {
    grads[0][c] += sum_gx[c];
    grads[1][c] += sum_g[c];
  }
  if (!gin) return;
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    const double* g = gout.example(n).data();
    double* gi = gin->example(n).data();
    for (std::size_t c = 0; c < l.in.c; ++c) {
      const double k = l.scale[c] * inv[c] / count;
      for (std::size_t p = 0; p < hw; ++p) {
        const double xhat = (x[c * hw + p] - mean[c]) * inv[c];
        gi[c * hw + p] = k * (count * g[c * hw + p] - sum_g[c] - xhat * sum_gx[c]);
      }
    }
  }
}

inline void backward(const FullyConnected& l, const Batch& in, const Batch&, const Batch& gout, Batch* gin,
                     std::vector<std::vector<double>>& grads) {
  const std::size_t d = l.in_features();
  auto& gw = grads[0];
  auto& gb = grads[1];
  for (std::size_t n = 0; n < in.n; ++n) {
    const double* x = in.example(n).data();
    const double* g = gout.example(n).data();
    for (std::size_t j = 0; j < l.out_features; ++j) {
      const double gj = g[j];
      gb[j] += gj;
      if (gj == 0.0) continue;
      double* gwrow = gw.data() + j * d;
      for (std::size_t i = 0; i < d; ++i) gwrow[i] += gj * x[i];
    }
    if (gin) {
      double* gi = gin->example(n).data();
      std::fill(gi, gi + d, 0.0);
      for (std::size_t j = 0; j < l.out_features; ++j) {
        const double gj = g[j];
        if (gj == 0.0) continue;
        const double* w = l.weight.data() + j * d;
        for (std::size_t i = 0; i < d; ++i) gi[i] += gj * w[i];
      }
    }
  }
}

inline void backward(const Softmax& l, const Batch&, const Batch& out, const Batch& gout, Batch* gin,
                     std::vector<std::vector<double>>&) {
  if (!gin) return;
  const std::size_t d = l.in.size();
  for (std::size_t n = 0; n < out.n; ++n) {
    const double* p = out.example(n).data();
    const double* g = gout.example(n).data();
    double* gi = gin->example(n).data();
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += g[i] * p[i];
    for (std::size_t i = 0; i < d; ++i) gi[i] = p[i] * (g[i] - s);
  }
}

/// Doubly-block-Toeplitz lowering of a 3x3/pad-1 convolution to the explicit
/// (out_c*H*W) x (in_c*H*W) matrix acting on the flattened activation.
inline linalg::Matrix lowered_matrix(const Conv& l) {
  const std::size_t h = l.in.h, w = l.in.w;
  linalg::Matrix m(l.out_channels * h * w, l.in.c * h * w);
  for (std::size_t oc = 0; oc < l.out_channels; ++oc)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t row = (oc * h + y) * w + x;
        for (std::size_t ic = 0; ic < l.in.c; ++ic)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long sy = static_cast<long>(y + ky) - 1, sx = static_cast<long>(x + kx) - 1;
              if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
              const std::size_t col = (ic * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx);
              m(row, col) = l.weight[((oc * l.in.c + ic) * 3 + ky) * 3 + kx];
            }
      }
  return m;
}

/// The weight matrix W that the layer applies to the flattened input.
inline linalg::Matrix linear_map(const Layer& l) {
  if (const auto* c = std::get_if<Conv>(&l)) return lowered_matrix(*c);
  if (const auto* f = std::get_if<FullyConnected>(&l)) return f->weight_matrix();
  fail(Errc::InvalidSplit, "layer '" + kind_name(l) + "' has no weight matrix");
}

}  // namespace splitshield::nn
