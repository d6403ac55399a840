#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splitshield/error.hpp"
#include "splitshield/linalg.hpp"
#include "splitshield/log.hpp"
#include "splitshield/nn/model.hpp"
#include "splitshield/nn/optim.hpp"
#include "splitshield/nn/regularizers.hpp"
#include "splitshield/random.hpp"

namespace splitshield::nn {

struct TrainConfig {
  std::size_t epochs = 50;
  double lr = 0.001;
  std::vector<std::size_t> lr_drop_epochs{20, 40};
  double lr_drop_factor = 10.0;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double decov_weight = 0.0;
  double gauss_prior_weight = 0.0;
  double gauss_prior_sigma2 = 1.0;
  bool robustness_removal = false;
  std::vector<double> keep_fractions{1.0, 0.75, 0.5, 0.25, 0.1};
  // Blocks eligible for signal-content removal; empty means every valid split.
  std::vector<std::size_t> removal_splits;
  // Block whose input receives the activation penalties; 0 means model.split_index.
  std::size_t penalty_split = 0;

  void validate() const {
    require(epochs >= 1, Errc::ConfigError, "epochs must be >= 1");
    require(lr > 0.0 && std::isfinite(lr), Errc::ConfigError, "lr must be positive");
    require(batch_size >= 1, Errc::ConfigError, "batch_size must be >= 1");
    require(lr_drop_factor > 0.0, Errc::ConfigError, "lr_drop_factor must be positive");
    require(decov_weight >= 0.0 && gauss_prior_weight >= 0.0, Errc::ConfigError, "penalty weights must be >= 0");
    require(gauss_prior_sigma2 > 0.0, Errc::ConfigError, "gauss_prior_sigma2 must be positive");
    for (double f : keep_fractions) require(f > 0.0 && f <= 1.0, Errc::ConfigError, "keep fractions must lie in (0, 1]");
    require(!robustness_removal || !keep_fractions.empty(), Errc::ConfigError, "keep_fractions is empty");
  }
};

/// Step schedule: lr / factor^(number of drop epochs already passed). Epochs are 1-based.
inline double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (std::size_t d : cfg.lr_drop_epochs)
    if (epoch > d) lr /= cfg.lr_drop_factor;
  return lr;
}

struct LossAndGrad {
  double loss = 0.0;
  Batch grad;  // with respect to the probabilities
};

/// Mean negative log-likelihood of the labels under softmax outputs.
inline LossAndGrad cross_entropy(const Batch& probs, std::span<const std::uint32_t> labels) {
  require(labels.size() == probs.n, Errc::ShapeError, "label count does not match batch");
  const std::size_t k = probs.example_size();
  LossAndGrad out{0.0, Batch(probs.n, probs.shape)};
  const double inv_n = 1.0 / static_cast<double>(std::max<std::size_t>(probs.n, 1));
  for (std::size_t i = 0; i < probs.n; ++i) {
    require(labels[i] < k, Errc::ShapeError, "label " + std::to_string(labels[i]) + " out of range");
    const double p = std::max(probs.data[i * k + labels[i]], 1e-300);
    out.loss -= std::log(p) * inv_n;
    out.grad.data[i * k + labels[i]] = -inv_n / p;
  }
  return out;
}

/// Orthonormal basis of the signal directions beyond the top `keep` ones of the first layer
/// of block b, i.e. the columns v_{keep+1..r}.
inline linalg::Matrix discard_basis(const linalg::SvdBasis& basis, std::size_t keep) {
  const std::size_t r = basis.rank_bound();
  keep = std::min(keep, r);
  linalg::Matrix d(basis.n, r - keep);
  for (std::size_t i = 0; i < basis.n; ++i)
    for (std::size_t k = keep; k < r; ++k) d(i, k - keep) = basis.v(i, k);
  return d;
}

/// Number of signal components kept for a fraction f of r.
inline std::size_t kept_components(double f, std::size_t r) {
  return std::min(r, static_cast<std::size_t>(std::ceil(f * static_cast<double>(r) - 1e-12)));
}

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;        // mean total loss over batches
  double ce_loss = 0.0;     // cross-entropy part
  double penalty = 0.0;     // weighted regularizer part
};

struct TrainResult {
  SplitModel model;
  std::vector<EpochStats> history;

  std::vector<double> loss_history() const {
    std::vector<double> h;
    for (const auto& e : history) h.push_back(e.loss);
    return h;
  }
};

using EpochCallback = std::function<void(const EpochStats&)>;

namespace detail {

struct RemovalPlan {
  std::vector<std::size_t> splits;               // candidate blocks
  std::vector<linalg::SvdBasis> bases;           // refreshed every epoch
};

inline std::vector<std::size_t> removal_candidates(const SplitModel& model, const TrainConfig& cfg) {
  std::vector<std::size_t> out;
  if (!cfg.removal_splits.empty()) {
    for (std::size_t b : cfg.removal_splits) {
      check_split(model, b);
      out.push_back(b);
    }
    return out;
  }
  for (std::size_t b = 1; b <= model.num_blocks(); ++b)
    if (is_linear(model.layers[model.block_starts[b - 1]])) out.push_back(b);
  return out;
}

inline bool penalties_active(const TrainConfig& cfg) { return cfg.decov_weight > 0.0 || cfg.gauss_prior_weight > 0.0; }

}  // namespace detail

/// One optimisation step on a mini-batch. Returns (cross-entropy, weighted penalty).
inline std::pair<double, double> train_step(SplitModel& model, Adam& opt, const Batch& xb,
                                            std::span<const std::uint32_t> yb, const TrainConfig& cfg, double lr,
                                            std::optional<Projection> projection = std::nullopt) {
  ForwardPass pass = forward(model, xb, Mode::Train, std::move(projection));
  LossAndGrad ce = cross_entropy(pass.output(), yb);
  std::vector<ExtraGrad> extra;
  double pen = 0.0;
  if (detail::penalties_active(cfg)) {
    const std::size_t b = cfg.penalty_split ? cfg.penalty_split : model.split_index;
    const std::size_t at = split_layer(model, b);
    const Batch& z = pass.input_of(at);
    ExtraGrad eg{at, Batch(z.n, z.shape)};
    if (cfg.decov_weight > 0.0) {
      Penalty p = decov_penalty(z);
      pen += cfg.decov_weight * p.value;
      for (std::size_t i = 0; i < z.data.size(); ++i) eg.grad.data[i] += cfg.decov_weight * p.grad.data[i];
    }
    if (cfg.gauss_prior_weight > 0.0) {
      Penalty p = gauss_prior_penalty(z, cfg.gauss_prior_sigma2);
      pen += cfg.gauss_prior_weight * p.value;
      for (std::size_t i = 0; i < z.data.size(); ++i) eg.grad.data[i] += cfg.gauss_prior_weight * p.grad.data[i];
    }
    extra.push_back(std::move(eg));
  }
  Gradients g = backward(model, pass, ce.grad, extra);
  opt.step(model, g, lr);
  update_running_stats(model, pass);
  return {ce.loss, pen};
}

/// Mini-batch Adam training with the step learning-rate schedule, optional activation
/// penalties at the split input and optional random signal-content removal.
inline TrainResult train(SplitModel model, const Batch& x, std::span<const std::uint32_t> y, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  require(x.n > 0, Errc::ShapeError, "training set is empty");
  require(y.size() == x.n, Errc::ShapeError, "label count does not match examples");
  const std::size_t classes = model.num_classes();
  for (std::uint32_t label : y)
    require(label < classes, Errc::ShapeError, "label " + std::to_string(label) + " out of range");
  if (detail::penalties_active(cfg)) check_split(model, cfg.penalty_split ? cfg.penalty_split : model.split_index);

  detail::RemovalPlan removal;
  if (cfg.robustness_removal) removal.splits = detail::removal_candidates(model, cfg);

  Adam opt;
  Rng choice_rng(derive_seed(cfg.seed, 0x72656d6fULL));
  TrainResult result;
  std::vector<std::size_t> order(x.n);
  const std::size_t min_batch = (detail::penalties_active(cfg) || x.n >= 2) ? 2 : 1;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    if (cfg.robustness_removal) {
      removal.bases.clear();
      for (std::size_t b : removal.splits) removal.bases.push_back(linalg::svd(split_weight(model, b)));
    }

    double ce_sum = 0.0, pen_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < x.n; start += cfg.batch_size) {
      const std::size_t cnt = std::min(cfg.batch_size, x.n - start);
      if (cnt < min_batch) continue;
      std::span<const std::size_t> idx(order.data() + start, cnt);
      const Batch xb = gather(x, idx);
      std::vector<std::uint32_t> yb(cnt);
      for (std::size_t i = 0; i < cnt; ++i) yb[i] = y[idx[i]];

      std::optional<Projection> proj;
      if (cfg.robustness_removal && !removal.splits.empty()) {
        const std::size_t pick = static_cast<std::size_t>(choice_rng.index(removal.splits.size()));
        const double f = cfg.keep_fractions[static_cast<std::size_t>(choice_rng.index(cfg.keep_fractions.size()))];
        const auto& basis = removal.bases[pick];
        const std::size_t keep = kept_components(f, basis.rank_bound());
        if (keep < basis.rank_bound())
          proj = Projection{split_layer(model, removal.splits[pick]), discard_basis(basis, keep)};
      }
      const auto [ce, pen] = train_step(model, opt, xb, yb, cfg, lr, std::move(proj));
      ce_sum += ce;
      pen_sum += pen;
      ++batches;
    }
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.ce_loss = batches ? ce_sum / static_cast<double>(batches) : 0.0;
    st.penalty = batches ? pen_sum / static_cast<double>(batches) : 0.0;
    st.loss = st.ce_loss + st.penalty;
    require(std::isfinite(st.loss), Errc::NumericalFailure, "training loss became non-finite at epoch " + std::to_string(epoch));
    log::debug("epoch ", epoch, " lr ", lr, " loss ", st.loss);
    if (on_epoch) on_epoch(st);
    result.history.push_back(st);
  }
  result.model = std::move(model);
  return result;
}

/// Fraction of examples whose arg-max prediction equals the label.
inline double accuracy_of(const SplitModel& model, const Batch& x, std::span<const std::uint32_t> y) {
  require(x.n > 0, Errc::EmptySplit, "accuracy over an empty set");
  const Batch p = predict(model, x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < x.n; ++i) hit += argmax(p.example(i)) == y[i];
  return static_cast<double>(hit) / static_cast<double>(x.n);
}

/// Marks every parameterized layer of `model` as frozen (or trainable).
inline void set_trainable(SplitModel& model, bool trainable, std::size_t first = 0,
                          std::size_t last = static_cast<std::size_t>(-1)) {
  last = std::min(last, model.layers.size());
  for (std::size_t i = first; i < last; ++i)
    std::visit(
        [&](auto& l) {
          if constexpr (requires { l.trainable; }) l.trainable = trainable;
        },
        model.layers[i]);
}

}  // namespace splitshield::nn
