#pragma once

// Comparison methods: L1 column-norm pruning of the transmitted feature with server
// fine-tuning, and min-max adversarial training against a hidden-attribute adversary.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "splitshield/data.hpp"
#include "splitshield/error.hpp"
#include "splitshield/linalg.hpp"
#include "splitshield/log.hpp"
#include "splitshield/nn/model.hpp"
#include "splitshield/nn/optim.hpp"
#include "splitshield/nn/train.hpp"
#include "splitshield/random.hpp"

namespace splitshield::baselines {

using linalg::Matrix;
using linalg::Vector;
using Mask = std::vector<std::size_t>;

struct PruneConfig {
  std::size_t m_prime = 0;
  std::size_t finetune_epochs = 10;
  double finetune_lr = 1e-4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

/// Indices (ascending) of the m' columns of `w_next` with the largest L1 norm; ties go to
/// the lower index.
inline Mask prune_mask(const Matrix& w_next, std::size_t m_prime) {
  require(m_prime <= w_next.cols(), Errc::InvalidM,
          "m' = " + std::to_string(m_prime) + " exceeds feature count " + std::to_string(w_next.cols()));
  std::vector<double> norm(w_next.cols(), 0.0);
  for (std::size_t i = 0; i < w_next.rows(); ++i) {
    const auto row = w_next.row(i);
    for (std::size_t j = 0; j < w_next.cols(); ++j) norm[j] += std::abs(row[j]);
  }
  Mask order(w_next.cols());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norm[a] > norm[b]; });
  order.resize(m_prime);
  std::sort(order.begin(), order.end());
  return order;
}

/// Keeps the masked coordinates of z and zeroes the rest.
inline Vector apply_prune(std::span<const double> z, const Mask& mask) {
  Vector out(z.size());
  std::vector<char> seen(z.size(), 0);
  for (std::size_t i : mask) {
    require(i < z.size(), Errc::MaskError, "mask index " + std::to_string(i) + " out of range");
    require(!seen[i], Errc::MaskError, "duplicate mask index " + std::to_string(i));
    seen[i] = 1;
    out[i] = z[i];
  }
  return out;
}

inline nn::Batch apply_prune(const nn::Batch& z, const Mask& mask) {
  nn::Batch out(z.n, z.shape);
  for (std::size_t e = 0; e < z.n; ++e) {
    const Vector p = apply_prune(z.example(e), mask);
    std::copy(p.begin(), p.end(), out.example(e).begin());
  }
  return out;
}

/// Continues training M_s on pruned features with a constant learning rate.
inline nn::SplitModel finetune_server(const nn::SplitModel& ms, const nn::Batch& pruned, std::span<const std::uint32_t> y,
                                      const PruneConfig& cfg) {
  if (cfg.finetune_epochs == 0) return ms;
  nn::TrainConfig tc;
  tc.epochs = cfg.finetune_epochs;
  tc.lr = cfg.finetune_lr;
  tc.lr_drop_epochs.clear();
  tc.batch_size = cfg.batch_size;
  tc.seed = cfg.seed;
  return nn::train(ms, pruned, y, tc).model;
}

// ---------------------------------------------------------------------------
// Adversarial training

struct ATConfig {
  double gamma_at = 0.5;
  std::size_t inner_adversary_steps = 5;
  std::size_t outer_epochs = 20;
  std::size_t adversary_reinit_every = 10;
  std::uint64_t seed = 0;
  std::size_t split_index = 1;
  std::string attribute;
  std::size_t batch_size = 64;
  double lr = 0.001;
  std::vector<std::size_t> lr_drop_epochs{20, 40};
  double lr_drop_factor = 10.0;
  double adversary_lr = 0.001;

  void validate() const {
    require(gamma_at >= 0.0 && std::isfinite(gamma_at), Errc::ConfigError, "gamma_at must be >= 0");
    require(outer_epochs >= 1, Errc::ConfigError, "outer_epochs must be >= 1");
    require(batch_size >= 2, Errc::ConfigError, "batch_size must be >= 2");
    require(lr > 0.0 && adversary_lr > 0.0, Errc::ConfigError, "learning rates must be positive");
    require(adversary_reinit_every >= 1, Errc::ConfigError, "adversary_reinit_every must be >= 1");
  }

  nn::TrainConfig schedule() const {
    nn::TrainConfig t;
    t.epochs = outer_epochs;
    t.lr = lr;
    t.lr_drop_epochs = lr_drop_epochs;
    t.lr_drop_factor = lr_drop_factor;
    t.batch_size = batch_size;
    t.seed = seed;
    return t;
  }
};

struct ATStep {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double target_loss = 0.0;
  double adversary_loss = 0.0;  // adversary's hidden-label loss seen by the main step
};

struct ATResult {
  nn::SplitModel model;      // M_c and M_s joined, split_index set
  nn::SplitModel adversary;  // last adversary (architecture of M_s)
  std::vector<ATStep> log;
};

namespace detail {

inline nn::SplitModel fresh_adversary(const nn::SplitModel& server, std::size_t classes, std::uint64_t seed,
                                      std::size_t generation) {
  return nn::reinitialized(server, classes, derive_seed(seed, 0xad00 + generation));
}

}  // namespace detail

/// Alternating min-max: per mini-batch, `inner_adversary_steps` updates of the adversary on
/// the current (fixed) M_c features, then one joint M_c/M_s update minimising
/// target_loss - gamma * adversary_loss. Batches are drawn in the same order as nn::train
/// with the same seed, so gamma = 0 reproduces plain training of the joined model.
inline ATResult adversarial_train(const nn::SplitModel& model, const data::LabeledDataset& ds, const ATConfig& cfg) {
  cfg.validate();
  if (!ds.hidden.contains(cfg.attribute))
    fail(Errc::MissingHiddenLabels, "adversarial training needs hidden labels '" + cfg.attribute + "'");
  const auto& hid = ds.attribute(cfg.attribute);
  nn::SplitParts parts = nn::split(model, cfg.split_index);
  nn::SplitModel& mc = parts.client;
  nn::SplitModel& ms = parts.server;
  std::size_t generation = 0;
  nn::SplitModel ma = detail::fresh_adversary(ms, hid.classes, cfg.seed, generation);

  const nn::Batch x = ds.examples(data::Split::Train);
  const data::Labels y = ds.labels("target", data::Split::Train);
  const data::Labels h = ds.labels(cfg.attribute, data::Split::Train);
  require(x.n >= 2, Errc::EmptySplit, "training split too small for adversarial training");

  const nn::TrainConfig sched = cfg.schedule();
  nn::Adam opt_c, opt_s, opt_a;
  ATResult res;
  std::vector<std::size_t> order(x.n);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.outer_epochs; ++epoch) {
    if (epoch > 1 && (epoch - 1) % cfg.adversary_reinit_every == 0) {
      ma = detail::fresh_adversary(ms, hid.classes, cfg.seed, ++generation);
      opt_a = nn::Adam{};
    }
    const double lr = nn::lr_at_epoch(sched, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    for (std::size_t start = 0; start < x.n; start += cfg.batch_size) {
      const std::size_t cnt = std::min(cfg.batch_size, x.n - start);
      if (cnt < 2) continue;
      std::span<const std::size_t> idx(order.data() + start, cnt);
      const nn::Batch xb = nn::gather(x, idx);
      std::vector<std::uint32_t> yb(cnt), hb(cnt);
      for (std::size_t i = 0; i < cnt; ++i) {
        yb[i] = y[idx[i]];
        hb[i] = h[idx[i]];
      }

      const bool use_adversary = cfg.gamma_at > 0.0;
      if (use_adversary) {
        const nn::Batch z = nn::forward(mc, xb, nn::Mode::Train).output();
        for (std::size_t k = 0; k < cfg.inner_adversary_steps; ++k) {
          const nn::ForwardPass pa = nn::forward(ma, z, nn::Mode::Train);
          const nn::Gradients ga = nn::backward(ma, pa, nn::cross_entropy(pa.output(), hb).grad);
          opt_a.step(ma, ga, cfg.adversary_lr);
          nn::update_running_stats(ma, pa);
        }
      }

      const nn::ForwardPass pc = nn::forward(mc, xb, nn::Mode::Train);
      const nn::ForwardPass ps = nn::forward(ms, pc.output(), nn::Mode::Train);
      const nn::LossAndGrad ls = nn::cross_entropy(ps.output(), yb);
      nn::Gradients gs = nn::backward(ms, ps, ls.grad, {}, !mc.layers.empty());
      ATStep rec{epoch, ++step, ls.loss, 0.0};
      if (!mc.layers.empty()) {
        nn::Batch dz = std::move(gs.input);
        if (use_adversary) {
          const nn::ForwardPass pa = nn::forward(ma, pc.output(), nn::Mode::Train);
          const nn::LossAndGrad la = nn::cross_entropy(pa.output(), hb);
          rec.adversary_loss = la.loss;
          const nn::Gradients ga = nn::backward(ma, pa, la.grad, {}, true);
          for (std::size_t i = 0; i < dz.data.size(); ++i) dz.data[i] -= cfg.gamma_at * ga.input.data[i];
        }
        const nn::Gradients gc = nn::backward(mc, pc, dz);
        opt_c.step(mc, gc, lr);
        nn::update_running_stats(mc, pc);
      }
      opt_s.step(ms, gs, lr);
      nn::update_running_stats(ms, ps);
      log::debug("at epoch ", epoch, " step ", rec.step, " target ", rec.target_loss, " adversary ", rec.adversary_loss);
      res.log.push_back(rec);
    }
  }
  res.model = nn::join(mc, ms, cfg.split_index);
  res.adversary = std::move(ma);
  return res;
}

}  // namespace splitshield::baselines
