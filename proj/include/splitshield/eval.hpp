#pragma once

// Post-hoc adversaries, accuracy metrics, tradeoff sweeps and the accuracy profile.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "json.hpp"

#include "splitshield/baselines.hpp"
#include "splitshield/data.hpp"
#include "splitshield/error.hpp"
#include "splitshield/linalg.hpp"
#include "splitshield/log.hpp"
#include "splitshield/nn/model.hpp"
#include "splitshield/nn/train.hpp"
#include "splitshield/obfuscator.hpp"
#include "splitshield/random.hpp"

namespace splitshield::eval {

using data::Labels;
using data::LabeledDataset;
using data::Split;
using nn::Batch;
using nn::SplitModel;

// ---------------------------------------------------------------------------
// Metrics

inline double accuracy(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> labels) {
  require(!labels.empty(), Errc::EmptySplit, "accuracy over an empty split");
  require(predicted.size() == labels.size(), Errc::ShapeError, "prediction/label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline Labels predictions(const SplitModel& model, const Batch& x) {
  const Batch p = nn::predict(model, x);
  Labels out(x.n);
  for (std::size_t i = 0; i < x.n; ++i) out[i] = static_cast<std::uint32_t>(nn::argmax(p.example(i)));
  return out;
}

/// Top-1 accuracy of `model` on (x, labels).
inline double accuracy(const SplitModel& model, const Batch& x, std::span<const std::uint32_t> labels) {
  require(x.n > 0, Errc::EmptySplit, "accuracy over an empty split");
  return accuracy(predictions(model, x), labels);
}

/// Average ranks (ties share the mean rank), then Pearson correlation of the ranks.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, Errc::DimensionError, "spearman needs two equal-length samples");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean_rank;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Features and obfuscation over batches

/// M_c(x); the raw input when M_c has no layers.
inline Batch client_features(const SplitModel& mc, const Batch& x) { return mc.layers.empty() ? x : nn::predict(mc, x); }

struct ObfuscatedBatch {
  Batch z;                    // reconstructed z' per example
  double mean_m_prime = 0.0;  // transmitted coefficients per query
};

inline ObfuscatedBatch obfuscate_batch(const Batch& z, const linalg::SvdBasis& basis, const obf::Mode& mode) {
  ObfuscatedBatch out{Batch(z.n, z.shape), 0.0};
  double total = 0.0;
  for (std::size_t e = 0; e < z.n; ++e) {
    const obf::ObfuscationResult r = obf::obfuscate(z.example(e), basis, mode);
    const linalg::Vector zp = obf::reconstruct(r, basis);
    std::copy(zp.begin(), zp.end(), out.z.example(e).begin());
    total += static_cast<double>(r.m_prime);
  }
  out.mean_m_prime = z.n ? total / static_cast<double>(z.n) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Adversaries

enum class AdversaryArch { ServerMirror, Linear };

inline const char* arch_name(AdversaryArch a) { return a == AdversaryArch::Linear ? "linear" : "server"; }

inline nn::TrainConfig default_adversary_schedule() {
  nn::TrainConfig t;  // 50 epochs, 1e-3 dropped by 10 after 20 and 40
  t.batch_size = 64;
  return t;
}

/// Trains a fresh adversary on (z', hidden labels). The architecture mirrors M_s (with a
/// new output width) or is a single softmax-regression layer.
inline SplitModel train_adversary_on(const SplitModel& ms, const Batch& z_train, std::span<const std::uint32_t> h_train,
                                     std::size_t classes, nn::TrainConfig cfg, std::uint64_t seed,
                                     AdversaryArch arch = AdversaryArch::ServerMirror) {
  SplitModel ma;
  if (arch == AdversaryArch::Linear) {
    ma = nn::mlp_model(z_train.example_size(), std::span<const std::size_t>{}, classes, seed);
    ma.input_shape = z_train.shape;
    std::get<nn::FullyConnected>(ma.layers[0]).in = z_train.shape;
  } else {
    ma = nn::reinitialized(ms, classes, seed);
  }
  cfg.seed = seed;
  return nn::train(std::move(ma), z_train, h_train, cfg).model;
}

/// Linear probe: softmax regression on the flattened features.
inline SplitModel linear_probe(const Batch& z_train, std::span<const std::uint32_t> labels, std::size_t classes,
                               nn::TrainConfig cfg, std::uint64_t seed) {
  return train_adversary_on(SplitModel{}, z_train, labels, classes, std::move(cfg), seed, AdversaryArch::Linear);
}

struct AttackOutcome {
  SplitModel adversary;
  double accuracy = 0.0;  // on the test split
};

/// The adversary sees exactly the z' the server receives for `split_index` under `mode`,
/// trains on the train split and is scored on the test split. Never touches `model`.
inline AttackOutcome train_adversary(const SplitModel& model, std::size_t split_index, const obf::Mode& mode,
                                     const LabeledDataset& ds, const std::string& attribute,
                                     const nn::TrainConfig& cfg, std::uint64_t seed,
                                     AdversaryArch arch = AdversaryArch::ServerMirror) {
  const data::Attribute& attr = ds.attribute(attribute);
  const nn::SplitParts parts = nn::split(model, split_index);
  const linalg::SvdBasis basis = linalg::svd(parts.w);
  const Batch ztr = obfuscate_batch(client_features(parts.client, ds.examples(Split::Train)), basis, mode).z;
  const Batch zte = obfuscate_batch(client_features(parts.client, ds.examples(Split::Test)), basis, mode).z;
  AttackOutcome out;
  out.adversary = train_adversary_on(parts.server, ztr, ds.labels(attribute, Split::Train), attr.classes, cfg, seed, arch);
  out.accuracy = accuracy(out.adversary, zte, ds.labels(attribute, Split::Test));
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class Method { Svd, Prune };

inline const char* method_name(Method m) { return m == Method::Prune ? "prune" : "svd"; }

struct SweepConfig {
  std::vector<std::size_t> splits;
  std::vector<obf::Mode> grid;             // Prune accepts TopM only (kept coordinates)
  Method method = Method::Svd;
  std::vector<std::string> attributes;     // empty: every hidden attribute
  std::size_t adversary_seeds = 3;
  AdversaryArch adversary_arch = AdversaryArch::ServerMirror;
  nn::TrainConfig adversary = default_adversary_schedule();
  baselines::PruneConfig prune;            // fine-tuning settings (m_prime comes from the grid)
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct TradeoffPoint {
  std::size_t split_index = 0;
  std::string mode;        // free | topm | budget | prune
  double param = 0.0;      // m' (topm/prune), epsilon (budget), r (free)
  double target_error = 0.0;
  std::map<std::string, std::vector<double>> attack_error;  // per adversary seed
  std::vector<std::uint64_t> adversary_seeds;
  double comm_floats = 0.0;
  std::size_t n = 0;

  double mean_attack_error(const std::string& attr) const {
    const auto& v = attack_error.at(attr);
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
};

namespace detail {

struct SplitContext {
  std::size_t split_index = 0;
  nn::SplitParts parts;
  linalg::SvdBasis basis;
  Batch z_train, z_test;
};

inline obf::Mode effective_mode(const obf::Mode& mode, const linalg::SvdBasis& basis, Method method) {
  if (const auto* t = std::get_if<obf::TopM>(&mode)) {
    const std::size_t cap = method == Method::Prune ? basis.n : basis.rank_bound();
    if (t->m_prime > cap) {
      log::info("m' = ", t->m_prime, " capped at ", cap, " for this split");
      return obf::TopM{cap};
    }
  }
  return mode;
}

inline TradeoffPoint run_point(const SplitContext& ctx, const obf::Mode& requested, const LabeledDataset& ds,
                               const SweepConfig& cfg, const std::vector<std::string>& attrs, std::uint64_t point_seed) {
  const obf::Mode mode = effective_mode(requested, ctx.basis, cfg.method);
  TradeoffPoint pt;
  pt.split_index = ctx.split_index;
  pt.n = ctx.basis.n;
  const SplitModel* server = &ctx.parts.server;
  SplitModel tuned;
  Batch ztr, zte;
  if (cfg.method == Method::Prune) {
    const auto* t = std::get_if<obf::TopM>(&mode);
    require(t != nullptr, Errc::ConfigError, "pruning sweeps take m' values only");
    const baselines::Mask mask = baselines::prune_mask(ctx.parts.w, t->m_prime);
    ztr = baselines::apply_prune(ctx.z_train, mask);
    zte = baselines::apply_prune(ctx.z_test, mask);
    baselines::PruneConfig pc = cfg.prune;
    pc.m_prime = t->m_prime;
    pc.seed = derive_seed(point_seed, 0);
    tuned = baselines::finetune_server(ctx.parts.server, ztr, ds.labels("target", Split::Train), pc);
    server = &tuned;
    pt.mode = "prune";
    pt.param = static_cast<double>(t->m_prime);
    pt.comm_floats = static_cast<double>(t->m_prime);
  } else {
    ztr = obfuscate_batch(ctx.z_train, ctx.basis, mode).z;
    const ObfuscatedBatch ob = obfuscate_batch(ctx.z_test, ctx.basis, mode);
    zte = ob.z;
    pt.mode = obf::mode_name(mode);
    if (const auto* t = std::get_if<obf::TopM>(&mode)) pt.param = static_cast<double>(t->m_prime);
    else if (const auto* b = std::get_if<obf::Budget>(&mode)) pt.param = b->epsilon;
    else pt.param = static_cast<double>(ctx.basis.rank_bound());
    pt.comm_floats = ob.mean_m_prime;
  }
  pt.target_error = 1.0 - accuracy(*server, zte, ds.labels("target", Split::Test));
  for (std::size_t j = 0; j < cfg.adversary_seeds; ++j) pt.adversary_seeds.push_back(derive_seed(point_seed, 1 + j));
  for (const std::string& a : attrs) {
    const auto& attr = ds.attribute(a);
    auto& errs = pt.attack_error[a];
    for (std::uint64_t s : pt.adversary_seeds) {
      const SplitModel ma =
          train_adversary_on(ctx.parts.server, ztr, ds.labels(a, Split::Train), attr.classes, cfg.adversary, s, cfg.adversary_arch);
      errs.push_back(1.0 - accuracy(ma, zte, ds.labels(a, Split::Test)));
    }
  }
  return pt;
}

}  // namespace detail

/// One point per (split, grid entry), in that order. Point k draws all randomness from
/// derive_seed(cfg.seed, k), so any `jobs` value yields identical results.
inline std::vector<TradeoffPoint> sweep(const SplitModel& model, const LabeledDataset& ds, const SweepConfig& cfg) {
  require(!cfg.splits.empty(), Errc::ConfigError, "sweep needs at least one split index");
  require(!cfg.grid.empty(), Errc::ConfigError, "sweep needs a non-empty parameter grid");
  require(cfg.adversary_seeds >= 1, Errc::ConfigError, "sweep needs at least one adversary seed");
  std::vector<std::string> attrs = cfg.attributes;
  if (attrs.empty())
    for (const auto& [name, _] : ds.hidden) attrs.push_back(name);
  for (const auto& a : attrs) ds.attribute(a);

  std::vector<detail::SplitContext> ctx;
  for (std::size_t b : cfg.splits) {
    detail::SplitContext c;
    c.split_index = b;
    c.parts = nn::split(model, b);
    c.basis = linalg::svd(c.parts.w);
    c.z_train = client_features(c.parts.client, ds.examples(Split::Train));
    c.z_test = client_features(c.parts.client, ds.examples(Split::Test));
    ctx.push_back(std::move(c));
  }
  const std::size_t total = ctx.size() * cfg.grid.size();
  std::vector<TradeoffPoint> out(total);
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= total) return;
      try {
        out[k] = detail::run_point(ctx[k / cfg.grid.size()], cfg.grid[k % cfg.grid.size()], ds, cfg, attrs,
                                   derive_seed(cfg.seed, k));
        log::info("sweep point ", k + 1, "/", total, " done");
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, total));
  if (jobs == 1) worker();
  else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

namespace detail {
inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}
}  // namespace detail

inline const char* kCsvHeader = "split_index,mode,param,target_err,attr,attack_err,comm_floats,seed";

/// One row per (point, attribute, adversary seed).
inline std::string to_csv(const std::vector<TradeoffPoint>& pts) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& p : pts)
    for (const auto& [attr, errs] : p.attack_error)
      for (std::size_t j = 0; j < errs.size(); ++j)
        out += std::to_string(p.split_index) + "," + p.mode + "," + detail::num(p.param) + "," +
               detail::num(p.target_error) + "," + attr + "," + detail::num(errs[j]) + "," + detail::num(p.comm_floats) +
               "," + std::to_string(p.adversary_seeds[j]) + "\n";
  return out;
}

inline nlohmann::json to_json(const std::vector<TradeoffPoint>& pts) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& p : pts)
    for (const auto& [attr, errs] : p.attack_error)
      for (std::size_t j = 0; j < errs.size(); ++j)
        rows.push_back({{"split_index", p.split_index},
                        {"mode", p.mode},
                        {"param", p.param},
                        {"target_err", p.target_error},
                        {"attr", attr},
                        {"attack_err", errs[j]},
                        {"comm_floats", p.comm_floats},
                        {"seed", p.adversary_seeds[j]}});
  return rows;
}

// ---------------------------------------------------------------------------
// Accuracy profile

struct ProfileRow {
  std::size_t split_index = 0;
  double keep_fraction = 1.0;
  double drop = 0.0;  // baseline accuracy minus accuracy with the fraction kept
};

struct AccuracyProfile {
  std::vector<ProfileRow> rows;
};

/// Mean target-accuracy drop on the validation split when only the top ceil(f * r)
/// signal coefficients are kept, for every (split, fraction) pair.
inline AccuracyProfile build_profile(const SplitModel& model, const LabeledDataset& ds,
                                     std::span<const std::size_t> splits, std::span<const double> fractions) {
  require(!fractions.empty(), Errc::ConfigError, "profile needs at least one keep fraction");
  require(!splits.empty(), Errc::ConfigError, "profile needs at least one split index");
  for (double f : fractions) require(f > 0.0 && f <= 1.0, Errc::ConfigError, "keep fractions must lie in (0, 1]");
  const Batch xv = ds.examples(Split::Val);
  const Labels yv = ds.labels("target", Split::Val);
  const double base = accuracy(model, xv, yv);
  AccuracyProfile prof;
  for (std::size_t b : splits) {
    const nn::SplitParts parts = nn::split(model, b);
    const linalg::SvdBasis basis = linalg::svd(parts.w);
    const Batch z = client_features(parts.client, xv);
    for (double f : fractions) {
      const std::size_t keep = nn::kept_components(f, basis.rank_bound());
      const Batch zp = obfuscate_batch(z, basis, obf::TopM{keep}).z;
      prof.rows.push_back({b, f, base - accuracy(parts.server, zp, yv)});
    }
  }
  return prof;
}

inline nlohmann::json to_json(const AccuracyProfile& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : p.rows) rows.push_back({{"split_index", r.split_index}, {"keep_fraction", r.keep_fraction}, {"drop", r.drop}});
  return rows;
}

inline AccuracyProfile profile_from_json(const nlohmann::json& j) {
  AccuracyProfile p;
  for (const auto& r : j)
    p.rows.push_back({r.at("split_index").get<std::size_t>(), r.at("keep_fraction").get<double>(), r.at("drop").get<double>()});
  return p;
}

}  // namespace splitshield::eval
