#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitshield/error.hpp"
#include "splitshield/linalg.hpp"
#include "splitshield/nn/layers.hpp"
#include "splitshield/nn/tensor.hpp"
#include "splitshield/random.hpp"

namespace splitshield::nn {

/// A layer stack grouped into blocks. Block b (1-based) starts at layers[block_starts[b-1]];
/// splitting at b sends the input of block b to the server.
struct SplitModel {
  Shape3 input_shape;
  std::vector<Layer> layers;
  std::vector<std::size_t> block_starts;
  std::size_t split_index = 1;
  std::uint64_t seed = 0;

  std::size_t num_blocks() const noexcept { return block_starts.size(); }

  Shape3 output_shape() const { return layers.empty() ? input_shape : nn::output_shape(layers.back()); }

  /// Activation shape entering block b.
  Shape3 block_input_shape(std::size_t b) const {
    require(b >= 1 && b <= num_blocks(), Errc::InvalidSplit, "block index " + std::to_string(b) + " out of range");
    return input_shape_at(block_starts[b - 1]);
  }

  Shape3 input_shape_at(std::size_t layer) const {
    return layer < layers.size() ? nn::input_shape(layers[layer]) : output_shape();
  }

  std::size_t num_classes() const { return output_shape().size(); }
};

/// Channel / unit counts of the six-block reference architecture.
struct ReferenceWidths {
  std::size_t conv1 = 16;
  std::size_t conv2 = 32;
  std::size_t conv3 = 64;
  std::size_t fc1 = 128;
  std::size_t fc2 = 64;
};

namespace detail {
class Builder {
 public:
  Builder(Shape3 in, std::uint64_t seed) : shape_(in), seed_(seed) { model_.input_shape = in; model_.seed = seed; }

  void begin_block() { model_.block_starts.push_back(model_.layers.size()); }
  void conv(std::size_t out) {
    Rng rng = next_rng();
    push(make_conv(shape_, out, rng));
  }
  void fc(std::size_t out) {
    Rng rng = next_rng();
    push(make_fc(shape_, out, rng));
  }
  void relu() { push(Relu{shape_}); }
  void maxpool() { push(MaxPool{shape_}); }
  void batchnorm() { push(make_batchnorm(shape_)); }
  void softmax() { push(Softmax{shape_}); }
  SplitModel finish() { return std::move(model_); }

 private:
  Rng next_rng() { return Rng(derive_seed(seed_, model_.layers.size())); }
  void push(Layer l) {
    shape_ = output_shape(l);
    model_.layers.push_back(std::move(l));
  }

  SplitModel model_;
  Shape3 shape_;
  std::uint64_t seed_;
};
}  // namespace detail

/// CONV-ReLU-MaxPool-BN x3, FC-ReLU-BN x2, FC-Softmax; six blocks.
inline SplitModel reference_model(Shape3 input, std::size_t classes, std::uint64_t seed, ReferenceWidths widths = {}) {
  require(input.h >= 8 && input.w >= 8, Errc::ShapeError, "reference model needs inputs of at least 8x8");
  require(classes >= 2, Errc::ShapeError, "need at least two classes");
  detail::Builder b(input, seed);
  for (std::size_t ch : {widths.conv1, widths.conv2, widths.conv3}) {
    b.begin_block();
    b.conv(ch);
    b.relu();
    b.maxpool();
    b.batchnorm();
  }
  for (std::size_t units : {widths.fc1, widths.fc2}) {
    b.begin_block();
    b.fc(units);
    b.relu();
    b.batchnorm();
  }
  b.begin_block();
  b.fc(classes);
  b.softmax();
  return b.finish();
}

/// Fully-connected variant for flat features: (FC-ReLU-BN) per hidden width, then FC-Softmax.
inline SplitModel mlp_model(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t classes,
                            std::uint64_t seed) {
  require(input_dim >= 1 && classes >= 2, Errc::ShapeError, "mlp needs input_dim >= 1 and >= 2 classes");
  detail::Builder b({input_dim, 1, 1}, seed);
  for (std::size_t units : hidden) {
    b.begin_block();
    b.fc(units);
    b.relu();
    b.batchnorm();
  }
  b.begin_block();
  b.fc(classes);
  b.softmax();
  return b.finish();
}

inline SplitModel mlp_model(std::size_t input_dim, std::initializer_list<std::size_t> hidden, std::size_t classes,
                            std::uint64_t seed) {
  return mlp_model(input_dim, std::span<const std::size_t>(hidden.begin(), hidden.size()), classes, seed);
}

/// Fresh copy of `model` with re-drawn weights and a new output width; used to give an
/// adversary the server's architecture.
inline SplitModel reinitialized(const SplitModel& model, std::size_t classes, std::uint64_t seed) {
  require(!model.layers.empty(), Errc::ShapeError, "cannot re-initialise an empty model");
  detail::Builder b(model.input_shape, seed);
  std::size_t block = 0;
  const std::size_t last_linear = [&] {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < model.layers.size(); ++i)
      if (is_linear(model.layers[i])) idx = i;
    return idx;
  }();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (block < model.block_starts.size() && model.block_starts[block] == i) {
      b.begin_block();
      ++block;
    }
    const Layer& l = model.layers[i];
    if (const auto* c = std::get_if<Conv>(&l)) b.conv(c->out_channels);
    else if (const auto* f = std::get_if<FullyConnected>(&l)) b.fc(i == last_linear ? classes : f->out_features);
    else if (std::holds_alternative<Relu>(l)) b.relu();
    else if (std::holds_alternative<MaxPool>(l)) b.maxpool();
    else if (std::holds_alternative<BatchNorm>(l)) b.batchnorm();
    else b.softmax();
  }
  SplitModel out = b.finish();
  out.split_index = model.split_index;
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

enum class Mode { Train, Eval };

/// Removes the signal directions in `discard` (n x d, orthonormal columns) from the input of
/// layer `layer`: x <- x - D D^T x. The same map is applied to the gradient on the way back,
/// so no gradient flows through the discarded components.
struct Projection {
  std::size_t layer = 0;
  linalg::Matrix discard;
};

namespace detail {
inline void apply_projection(const linalg::Matrix& d, Batch& x) {
  const std::size_t n = d.rows(), k = d.cols();
  std::vector<double> coef(k);
  for (std::size_t e = 0; e < x.n; ++e) {
    auto v = x.example(e);
    std::fill(coef.begin(), coef.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto drow = d.row(i);
      for (std::size_t j = 0; j < k; ++j) coef[j] += drow[j] * v[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto drow = d.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += drow[j] * coef[j];
      v[i] -= s;
    }
  }
}
}  // namespace detail

struct ForwardPass {
  Mode mode = Mode::Eval;
  std::vector<Batch> acts;                 // acts[i] is the input of layer i; acts.back() the output
  std::vector<BnBatchStats> bn_stats;      // per layer; filled for BatchNorm in train mode
  std::optional<Projection> projection;

  const Batch& output() const { return acts.back(); }
  const Batch& input_of(std::size_t layer) const { return acts[layer]; }
};

inline ForwardPass forward(const SplitModel& model, const Batch& x, Mode mode,
                           std::optional<Projection> projection = std::nullopt) {
  require(x.shape == model.input_shape, Errc::ShapeError,
          "input shape " + x.shape.str() + " != model input " + model.input_shape.str());
  ForwardPass pass;
  pass.mode = mode;
  pass.acts.reserve(model.layers.size() + 1);
  pass.acts.push_back(x);
  pass.bn_stats.resize(model.layers.size());
  if (projection) {
    require(projection->layer <= model.layers.size(), Errc::InvalidSplit, "projection layer out of range");
    require(projection->discard.rows() == model.input_shape_at(projection->layer).size(), Errc::ShapeError,
            "projection basis does not match activation size");
    if (projection->layer == 0) detail::apply_projection(projection->discard, pass.acts[0]);
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    Batch out(x.n, output_shape(l));
    std::visit([&](const auto& layer) { nn::forward(layer, pass.acts[i], out, mode == Mode::Train, &pass.bn_stats[i]); }, l);
    if (projection && projection->layer == i + 1) detail::apply_projection(projection->discard, out);
    pass.acts.push_back(std::move(out));
  }
  pass.projection = std::move(projection);
  return pass;
}

/// Eval-mode output without retaining intermediate activations.
inline Batch predict(const SplitModel& model, const Batch& x, std::size_t chunk = 256) {
  require(x.shape == model.input_shape, Errc::ShapeError,
          "input shape " + x.shape.str() + " != model input " + model.input_shape.str());
  const Shape3 oshape = model.output_shape();
  Batch out(x.n, oshape);
  for (std::size_t start = 0; start < x.n; start += chunk) {
    const std::size_t cnt = std::min(chunk, x.n - start);
    Batch cur(cnt, x.shape,
              std::vector<double>(x.data.begin() + static_cast<std::ptrdiff_t>(start * x.example_size()),
                                  x.data.begin() + static_cast<std::ptrdiff_t>((start + cnt) * x.example_size())));
    for (const Layer& l : model.layers) {
      Batch next(cnt, output_shape(l));
      std::visit([&](const auto& layer) { nn::forward(layer, cur, next, false, nullptr); }, l);
      cur = std::move(next);
    }
    std::copy(cur.data.begin(), cur.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * oshape.size()));
  }
  return out;
}

/// Gradients of every layer's parameters (aligned with `parameters()`), plus the input
/// gradient when requested.
struct Gradients {
  std::vector<std::vector<std::vector<double>>> layers;
  Batch input;
};

inline Gradients zero_gradients(const SplitModel& model) {
  Gradients g;
  g.layers.reserve(model.layers.size());
  for (const Layer& l : model.layers) {
    std::vector<std::vector<double>> t;
    for (auto p : parameters(l)) t.emplace_back(p.size(), 0.0);
    g.layers.push_back(std::move(t));
  }
  return g;
}

/// Extra gradient injected at the input of layer `layer` (e.g. from an activation penalty).
struct ExtraGrad {
  std::size_t layer = 0;
  Batch grad;
};

inline Gradients backward(const SplitModel& model, const ForwardPass& pass, const Batch& out_grad,
                          std::span<const ExtraGrad> extra = {}, bool want_input_grad = false) {
  require(pass.mode == Mode::Train && pass.acts.size() == model.layers.size() + 1, Errc::BackwardBeforeForward,
          "backward requires a training-mode forward pass over this model");
  require(out_grad.n == pass.output().n && out_grad.shape == pass.output().shape, Errc::ShapeError,
          "output gradient shape mismatch");
  Gradients g = zero_gradients(model);
  Batch cur = out_grad;
  auto add_extra = [&](std::size_t layer, Batch& grad) {
    for (const ExtraGrad& e : extra)
      if (e.layer == layer) {
        require(e.grad.data.size() == grad.data.size(), Errc::ShapeError, "extra gradient shape mismatch");
        for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] += e.grad.data[i];
      }
  };
  add_extra(model.layers.size(), cur);
  if (pass.projection && pass.projection->layer == model.layers.size()) detail::apply_projection(pass.projection->discard, cur);
  for (std::size_t i = model.layers.size(); i-- > 0;) {
    const bool need_in = i > 0 || want_input_grad;
    Batch gin;
    if (need_in) gin = Batch(cur.n, pass.acts[i].shape);
    std::visit(
        [&](const auto& layer) {
          nn::backward(layer, pass.acts[i], pass.acts[i + 1], cur, need_in ? &gin : nullptr, g.layers[i]);
        },
        model.layers[i]);
    if (!need_in) break;
    add_extra(i, gin);
    if (pass.projection && pass.projection->layer == i) detail::apply_projection(pass.projection->discard, gin);
    cur = std::move(gin);
  }
  if (want_input_grad) g.input = std::move(cur);
  return g;
}

/// Folds batch statistics of a training pass into the BatchNorm running estimates.
/// Frozen BatchNorm layers keep their statistics.
inline void update_running_stats(SplitModel& model, const ForwardPass& pass) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto* bn = std::get_if<BatchNorm>(&model.layers[i]);
    if (!bn || !bn->trainable || pass.bn_stats[i].mean.empty()) continue;
    for (std::size_t c = 0; c < bn->in.c; ++c) {
      bn->running_mean[c] = (1.0 - bn->momentum) * bn->running_mean[c] + bn->momentum * pass.bn_stats[i].mean[c];
      bn->running_var[c] = (1.0 - bn->momentum) * bn->running_var[c] + bn->momentum * pass.bn_stats[i].var[c];
    }
  }
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitParts {
  SplitModel client;  // M_c; no layers when splitting at block 1
  SplitModel server;  // M_s
  linalg::Matrix w;   // weight matrix of the first M_s layer
};

inline void check_split(const SplitModel& model, std::size_t split_index) {
  require(split_index >= 1 && split_index <= model.num_blocks(), Errc::InvalidSplit,
          "split index " + std::to_string(split_index) + " outside 1.." + std::to_string(model.num_blocks()));
  require(is_linear(model.layers[model.block_starts[split_index - 1]]), Errc::InvalidSplit,
          "block " + std::to_string(split_index) + " does not start with a conv or fully-connected layer");
}

/// Index of the first layer of block `split_index`.
inline std::size_t split_layer(const SplitModel& model, std::size_t split_index) {
  check_split(model, split_index);
  return model.block_starts[split_index - 1];
}

/// W of the first server layer for a split, without materialising the parts.
inline linalg::Matrix split_weight(const SplitModel& model, std::size_t split_index) {
  return linear_map(model.layers[split_layer(model, split_index)]);
}

inline SplitParts split(const SplitModel& model, std::size_t split_index) {
  const std::size_t at = split_layer(model, split_index);
  SplitParts parts;
  parts.client.input_shape = model.input_shape;
  parts.client.seed = model.seed;
  parts.client.layers.assign(model.layers.begin(), model.layers.begin() + static_cast<std::ptrdiff_t>(at));
  parts.client.block_starts.assign(model.block_starts.begin(),
                                   model.block_starts.begin() + static_cast<std::ptrdiff_t>(split_index - 1));
  parts.server.input_shape = model.input_shape_at(at);
  parts.server.seed = model.seed;
  parts.server.layers.assign(model.layers.begin() + static_cast<std::ptrdiff_t>(at), model.layers.end());
  for (std::size_t b = split_index - 1; b < model.num_blocks(); ++b) parts.server.block_starts.push_back(model.block_starts[b] - at);
  parts.w = linear_map(parts.server.layers.front());
  return parts;
}

/// Reassembles M_c and M_s.
inline SplitModel join(const SplitModel& client, const SplitModel& server, std::size_t split_index) {
  SplitModel m;
  m.input_shape = client.input_shape;
  m.seed = client.seed;
  m.layers = client.layers;
  m.layers.insert(m.layers.end(), server.layers.begin(), server.layers.end());
  m.block_starts = client.block_starts;
  for (std::size_t s : server.block_starts) m.block_starts.push_back(s + client.layers.size());
  m.split_index = split_index;
  return m;
}

inline std::size_t argmax(std::span<const double> p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace splitshield::nn
