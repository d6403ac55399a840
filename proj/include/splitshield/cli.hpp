#pragma once

// Command-line driver. Every subcommand reads a JSON run config (unknown keys rejected),
// writes its artifacts under --out and finishes with a manifest.json that is itself a
// valid --config for an identical rerun.

#include <pthread.h>
#include <signal.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "splitshield/baselines.hpp"
#include "splitshield/cumulative.hpp"
#include "splitshield/data.hpp"
#include "splitshield/error.hpp"
#include "splitshield/eval.hpp"
#include "splitshield/log.hpp"
#include "splitshield/nn/checkpoint.hpp"
#include "splitshield/nn/train.hpp"
#include "splitshield/splitwire.hpp"

namespace splitshield::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

// ---------------------------------------------------------------------------
// Config schema

namespace schema {

inline void keys(const json& j, std::span<const std::string_view> allowed, const std::string& where) {
  require(j.is_object(), Errc::ConfigError, where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == k;
    require(ok, Errc::ConfigError, "unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

inline void keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  keys(j, std::span<const std::string_view>(allowed.begin(), allowed.size()), where);
}

inline constexpr std::string_view kTrain[] = {"epochs",
                                "lr",
                                "lr_drop_epochs",
                                "lr_drop_factor",
                                "batch_size",
                                "decov_weight",
                                "gauss_prior_weight",
                                "gauss_prior_sigma2",
                                "robustness_removal",
                                "keep_fractions",
                                "removal_splits",
                                "penalty_split"};
inline constexpr std::string_view kMode[] = {"mode", "m_prime", "epsilon"};

inline void mode(const json& j, const std::string& where) {
  keys(j, kMode, where);
  require(j.contains("mode"), Errc::ConfigError, where + ".mode is required");
}

inline void validate(const json& doc) {
  keys(doc, {"seed", "jobs", "data", "model", "train", "sweep", "profile", "prune", "at", "serve", "infer", "obfuscate",
             "evaluate", "cumulative"},
       "");
  if (doc.contains("data")) {
    const json& d = doc["data"];
    keys(d, {"synthetic", "path", "prefix", "image_type"}, "data");
    if (d.contains("synthetic")) {
      const json& s = d["synthetic"];
      keys(s, {"n_examples", "shape", "target_classes", "target_scale", "noise_std", "train_frac", "val_frac", "seed", "hidden"},
           "data.synthetic");
      if (s.contains("hidden")) {
        require(s["hidden"].is_object(), Errc::ConfigError, "data.synthetic.hidden must be an object");
        for (const auto& [name, h] : s["hidden"].items())
          keys(h, {"classes", "coupling", "rho", "scale"}, "data.synthetic.hidden." + name);
      }
    }
  }
  if (doc.contains("model")) keys(doc["model"], {"arch", "widths", "hidden", "split_index", "plant_null", "checkpoint"}, "model");
  if (doc.contains("train")) keys(doc["train"], kTrain, "train");
  if (doc.contains("sweep")) {
    const json& s = doc["sweep"];
    keys(s, {"splits", "grid", "attributes", "adversary_seeds", "adversary_arch", "adversary"}, "sweep");
    if (s.contains("grid")) {
      require(s["grid"].is_array(), Errc::ConfigError, "sweep.grid must be an array");
      for (std::size_t i = 0; i < s["grid"].size(); ++i) mode(s["grid"][i], "sweep.grid[" + std::to_string(i) + "]");
    }
    if (s.contains("adversary")) keys(s["adversary"], kTrain, "sweep.adversary");
  }
  if (doc.contains("profile")) keys(doc["profile"], {"splits", "fractions"}, "profile");
  if (doc.contains("prune")) keys(doc["prune"], {"finetune_epochs", "finetune_lr", "batch_size"}, "prune");
  if (doc.contains("at"))
    keys(doc["at"], {"gamma_at", "inner_adversary_steps", "outer_epochs", "adversary_reinit_every", "split_index", "attribute",
                     "batch_size", "lr", "lr_drop_epochs", "lr_drop_factor", "adversary_lr"},
         "at");
  if (doc.contains("serve")) keys(doc["serve"], {"bind", "port", "splits", "profile"}, "serve");
  if (doc.contains("infer")) {
    keys(doc["infer"], {"host", "port", "split", "mode", "limit", "max_drop", "max_split"}, "infer");
    if (doc["infer"].contains("mode")) mode(doc["infer"]["mode"], "infer.mode");
  }
  if (doc.contains("obfuscate")) {
    keys(doc["obfuscate"], {"split", "mode", "input", "weights"}, "obfuscate");
    if (doc["obfuscate"].contains("mode")) mode(doc["obfuscate"]["mode"], "obfuscate.mode");
  }
  if (doc.contains("evaluate")) {
    keys(doc["evaluate"], {"split", "mode", "limit"}, "evaluate");
    if (doc["evaluate"].contains("mode")) mode(doc["evaluate"]["mode"], "evaluate.mode");
  }
  if (doc.contains("cumulative")) keys(doc["cumulative"], {"chunk"}, "cumulative");
}

}  // namespace schema

namespace detail {

inline const json& section(const json& doc, const char* name) {
  static const json empty = json::object();
  return doc.contains(name) ? doc[name] : empty;
}

template <class T>
T get(const json& j, const char* key, T def, const std::string& where) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(Errc::ConfigError, where + "." + key + ": " + e.what());
  }
}

inline obf::Mode mode_from(const json& j, const std::string& where) {
  const auto name = get<std::string>(j, "mode", "", where);
  if (name == "free") return obf::DistortionFree{};
  if (name == "topm") {
    require(j.contains("m_prime"), Errc::ConfigError, where + ": topm needs m_prime");
    return obf::TopM{get<std::size_t>(j, "m_prime", 0, where)};
  }
  if (name == "budget") {
    require(j.contains("epsilon"), Errc::ConfigError, where + ": budget needs epsilon");
    const double e = get<double>(j, "epsilon", 0.0, where);
    require(std::isfinite(e) && e >= 0.0, Errc::ConfigError, where + ": epsilon must be finite and >= 0");
    return obf::Budget{e};
  }
  fail(Errc::ConfigError, where + ": mode must be free, topm or budget, got '" + name + "'");
}

inline json mode_json(const obf::Mode& m) {
  if (const auto* t = std::get_if<obf::TopM>(&m)) return {{"mode", "topm"}, {"m_prime", t->m_prime}};
  if (const auto* b = std::get_if<obf::Budget>(&m)) return {{"mode", "budget"}, {"epsilon", b->epsilon}};
  return {{"mode", "free"}};
}

inline nn::TrainConfig train_config(const json& t, std::uint64_t seed, const std::string& where,
                                    nn::TrainConfig c = nn::TrainConfig{}) {
  c.epochs = get(t, "epochs", c.epochs, where);
  c.lr = get(t, "lr", c.lr, where);
  c.lr_drop_epochs = get(t, "lr_drop_epochs", c.lr_drop_epochs, where);
  c.lr_drop_factor = get(t, "lr_drop_factor", c.lr_drop_factor, where);
  c.batch_size = get(t, "batch_size", c.batch_size, where);
  c.decov_weight = get(t, "decov_weight", c.decov_weight, where);
  c.gauss_prior_weight = get(t, "gauss_prior_weight", c.gauss_prior_weight, where);
  c.gauss_prior_sigma2 = get(t, "gauss_prior_sigma2", c.gauss_prior_sigma2, where);
  c.robustness_removal = get(t, "robustness_removal", c.robustness_removal, where);
  c.keep_fractions = get(t, "keep_fractions", c.keep_fractions, where);
  c.removal_splits = get(t, "removal_splits", c.removal_splits, where);
  c.penalty_split = get(t, "penalty_split", c.penalty_split, where);
  c.seed = seed;
  c.validate();
  return c;
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::vector<std::vector<double>> read_csv(const fs::path& p) {
  require(fs::exists(p), Errc::ConfigError, "file not found: " + p.string());
  std::ifstream in(p);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        fail(Errc::ConfigError, p.string() + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
      }
    }
    require(rows.empty() || row.size() == rows[0].size(), Errc::ConfigError,
            p.string() + ":" + std::to_string(lineno) + ": ragged row");
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string csv_row(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += fmt(v[i]);
  }
  return s + '\n';
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Run context

struct Context {
  std::string command;
  json doc;  // validated effective config
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  fs::path out;
  std::vector<std::string> outputs;
  json summary = json::object();

  fs::path path(const std::string& name) const { return out / name; }

  void write(const std::string& name, const std::string& content) {
    data::detail::write_file(path(name), content);
    outputs.push_back(name);
  }

  /// Seed of a named pipeline stage; every stage draws from its own stream.
  std::uint64_t stage_seed(std::uint64_t stage) const { return derive_seed(seed, stage); }
};

enum Stage : std::uint64_t { kDataStage = 1, kModelStage = 2, kTrainStage = 3, kSweepStage = 4, kATStage = 5 };

struct LoadedData {
  data::LabeledDataset ds;
  std::optional<linalg::Matrix> planted;
};

inline data::SynthSpec synth_spec(const json& s, std::uint64_t default_seed) {
  const std::string w = "data.synthetic";
  data::SynthSpec synth;
  synth.n_examples = detail::get(s, "n_examples", synth.n_examples, w);
  if (s.contains("shape")) {
    const auto dims = detail::get<std::vector<std::size_t>>(s, "shape", {}, w);
    require(dims.size() == 1 || dims.size() == 3, Errc::ConfigError, w + ".shape must be [d] or [c, h, w]");
    synth.shape = dims.size() == 1 ? nn::Shape3{dims[0], 1, 1} : nn::Shape3{dims[0], dims[1], dims[2]};
  }
  synth.target_classes = detail::get(s, "target_classes", synth.target_classes, w);
  synth.target_scale = detail::get(s, "target_scale", synth.target_scale, w);
  synth.noise_std = detail::get(s, "noise_std", synth.noise_std, w);
  synth.train_frac = detail::get(s, "train_frac", synth.train_frac, w);
  synth.val_frac = detail::get(s, "val_frac", synth.val_frac, w);
  synth.seed = detail::get(s, "seed", default_seed, w);
  if (s.contains("hidden"))
    for (const auto& [name, h] : s["hidden"].items()) {
      const std::string hw = w + ".hidden." + name;
      data::HiddenSpec hs;
      hs.classes = detail::get(h, "classes", hs.classes, hw);
      hs.scale = detail::get(h, "scale", hs.scale, hw);
      const auto kind = detail::get<std::string>(h, "coupling", "orthogonal", hw);
      if (kind == "orthogonal") hs.coupling.kind = data::CouplingKind::Orthogonal;
      else if (kind == "correlated") hs.coupling.kind = data::CouplingKind::Correlated;
      else if (kind == "nullspace") hs.coupling.kind = data::CouplingKind::Nullspace;
      else fail(Errc::ConfigError, hw + ".coupling must be orthogonal, correlated or nullspace");
      hs.coupling.rho = detail::get(h, "rho", 0.0, hw);
      synth.hidden[name] = hs;
    }
  return synth;
}

inline LoadedData load_data(const Context& ctx) {
  const json& d = detail::section(ctx.doc, "data");
  if (d.contains("path")) {
    const fs::path p = detail::get<std::string>(d, "path", "", "data");
    require(fs::exists(p), Errc::ConfigError, "dataset metadata not found: " + p.string());
    return {data::load_idx(p), std::nullopt};
  }
  require(d.contains("synthetic"), Errc::ConfigError, "config needs data.synthetic or data.path (or --data)");
  auto r = data::gen_synthetic(synth_spec(d["synthetic"], ctx.stage_seed(kDataStage)));
  return {std::move(r.dataset), std::move(r.planted_w)};
}

inline std::size_t feature_count(const nn::SplitModel& m, std::size_t split) {
  return m.layers.empty() ? 0 : nn::input_shape(m.layers[m.block_starts[split - 1]]).size();
}

inline nn::SplitModel model_for(const Context& ctx, const LoadedData& d, bool need_checkpoint) {
  const json& m = detail::section(ctx.doc, "model");
  nn::SplitModel model;
  if (m.contains("checkpoint")) {
    const fs::path p = detail::get<std::string>(m, "checkpoint", "", "model");
    require(fs::exists(p), Errc::ConfigError, "checkpoint not found: " + p.string());
    model = nn::load_model(p.string(), d.ds.x.shape);
  } else {
    require(!need_checkpoint, Errc::ConfigError, ctx.command + " needs model.checkpoint (or --checkpoint)");
    const auto arch = detail::get<std::string>(m, "arch", "reference", "model");
    const std::uint64_t seed = ctx.stage_seed(kModelStage);
    if (arch == "reference") {
      nn::ReferenceWidths w;
      if (m.contains("widths")) {
        const auto v = detail::get<std::vector<std::size_t>>(m, "widths", {}, "model");
        require(v.size() == 5, Errc::ConfigError, "model.widths needs five entries");
        w = {v[0], v[1], v[2], v[3], v[4]};
      }
      model = nn::reference_model(d.ds.x.shape, d.ds.target_classes, seed, w);
    } else if (arch == "mlp") {
      const auto hidden = detail::get<std::vector<std::size_t>>(m, "hidden", {64, 32}, "model");
      model = nn::mlp_model(d.ds.x.shape.size(), hidden, d.ds.target_classes, seed);
      model.input_shape = d.ds.x.shape;
      if (detail::get(m, "plant_null", false, "model")) {
        require(d.planted.has_value(), Errc::ConfigError, "model.plant_null needs a synthetic nullspace attribute");
        require(!hidden.empty() && hidden[0] == d.planted->rows(), Errc::ConfigError,
                "model.plant_null needs hidden[0] == " + std::to_string(d.planted->rows()));
        auto& fc = std::get<nn::FullyConnected>(model.layers[0]);
        const auto s = d.planted->span();
        fc.weight.assign(s.begin(), s.end());
        std::fill(fc.bias.begin(), fc.bias.end(), 0.0);
        fc.trainable = false;
      }
    } else {
      fail(Errc::ConfigError, "model.arch must be reference or mlp");
    }
  }
  if (m.contains("split_index")) {
    const auto b = detail::get<std::size_t>(m, "split_index", 1, "model");
    require(b >= 1 && b <= model.num_blocks(), Errc::ConfigError, "model.split_index out of range");
    model.split_index = b;
  }
  return model;
}

inline std::vector<std::size_t> default_splits(const nn::SplitModel& m) {
  std::vector<std::size_t> out;
  for (std::size_t b = 1; b <= m.num_blocks(); ++b)
    if (nn::is_linear(m.layers[m.block_starts[b - 1]])) out.push_back(b);
  return out;
}

inline double accuracy_or_nan(const nn::SplitModel& m, const data::LabeledDataset& ds, data::Split s) {
  if (ds.splits.get(s).empty()) return std::numeric_limits<double>::quiet_NaN();
  return eval::accuracy(m, ds.examples(s), ds.labels("target", s));
}

inline json accuracies(const nn::SplitModel& m, const data::LabeledDataset& ds) {
  json j;
  for (auto s : {data::Split::Train, data::Split::Val, data::Split::Test}) {
    const double a = accuracy_or_nan(m, ds, s);
    j[data::split_name(s)] = std::isnan(a) ? json(nullptr) : json(a);
  }
  return j;
}

inline std::string predictions_csv(const data::Labels& pred, const data::Labels& truth) {
  std::string s = "index,predicted,label\n";
  for (std::size_t i = 0; i < pred.size(); ++i)
    s += std::to_string(i) + "," + std::to_string(pred[i]) + "," + std::to_string(truth[i]) + "\n";
  return s;
}

/// Test-split examples, truncated to `limit` when positive.
inline std::pair<nn::Batch, data::Labels> test_slice(const data::LabeledDataset& ds, std::size_t limit) {
  auto idx = ds.splits.get(data::Split::Test);
  require(!idx.empty(), Errc::EmptySplit, "dataset has an empty test split");
  if (limit > 0 && limit < idx.size()) idx.resize(limit);
  data::Labels y;
  for (std::size_t i : idx) y.push_back(ds.y_tar[i]);
  return {nn::gather(ds.x, idx), y};
}

// ---------------------------------------------------------------------------
// Subcommands

inline void cmd_gen_data(Context& ctx) {
  const json& d = detail::section(ctx.doc, "data");
  require(d.contains("synthetic"), Errc::ConfigError, "gen-data needs data.synthetic");
  const LoadedData ld = load_data(ctx);
  const auto prefix = detail::get<std::string>(d, "prefix", "data", "data");
  const auto type = detail::get<std::string>(d, "image_type", "f64", "data");
  require(type == "f64" || type == "u8", Errc::ConfigError, "data.image_type must be f64 or u8");
  data::save_idx(ld.ds, ctx.out, prefix, type == "u8" ? data::ImageType::U8 : data::ImageType::F64);
  for (const auto& e : fs::directory_iterator(ctx.out)) {
    const auto name = e.path().filename().string();
    if (name.rfind(prefix, 0) == 0 && name != "manifest.json") ctx.outputs.push_back(name);
  }
  if (ld.planted) {
    std::string csv;
    for (std::size_t i = 0; i < ld.planted->rows(); ++i) csv += detail::csv_row(ld.planted->row(i));
    ctx.write(prefix + "-planted.csv", csv);
  }
  ctx.summary = {{"examples", ld.ds.size()}, {"metadata", prefix + ".json"}};
}

inline void cmd_train(Context& ctx) {
  const LoadedData ld = load_data(ctx);
  nn::SplitModel model = model_for(ctx, ld, false);
  const auto cfg = detail::train_config(detail::section(ctx.doc, "train"), ctx.stage_seed(kTrainStage), "train");
  std::string hist = "epoch,lr,loss,ce_loss,penalty\n";
  const auto res = nn::train(std::move(model), ld.ds.examples(data::Split::Train), ld.ds.labels("target", data::Split::Train),
                             cfg, [&](const nn::EpochStats& s) {
                               log::info("epoch ", s.epoch, " loss ", s.loss);
                               hist += std::to_string(s.epoch) + "," + detail::fmt(s.lr) + "," + detail::fmt(s.loss) + "," +
                                       detail::fmt(s.ce_loss) + "," + detail::fmt(s.penalty) + "\n";
                             });
  ctx.write("model.ckpt", nn::serialize_model(res.model));
  ctx.write("history.csv", hist);
  ctx.summary = {{"accuracy", accuracies(res.model, ld.ds)}, {"epochs", cfg.epochs}};
  ctx.write("metrics.json", ctx.summary.dump(2) + "\n");
}

inline void cmd_profile(Context& ctx) {
  const LoadedData ld = load_data(ctx);
  const nn::SplitModel model = model_for(ctx, ld, true);
  const json& p = detail::section(ctx.doc, "profile");
  const auto splits = detail::get(p, "splits", default_splits(model), "profile");
  const auto fr = detail::get(p, "fractions", std::vector<double>{1.0, 0.75, 0.5, 0.25, 0.1}, "profile");
  const auto prof = eval::build_profile(model, ld.ds, splits, fr);
  std::string csv = "split_index,keep_fraction,drop\n";
  for (const auto& r : prof.rows)
    csv += std::to_string(r.split_index) + "," + detail::fmt(r.keep_fraction) + "," + detail::fmt(r.drop) + "\n";
  ctx.write("profile.json", eval::to_json(prof).dump(2) + "\n");
  ctx.write("profile.csv", csv);
  ctx.summary = {{"rows", prof.rows.size()}};
}

inline void run_sweep(Context& ctx, eval::Method method, const std::string& stem) {
  const LoadedData ld = load_data(ctx);
  const nn::SplitModel model = model_for(ctx, ld, true);
  const json& s = detail::section(ctx.doc, "sweep");
  eval::SweepConfig cfg;
  cfg.method = method;
  cfg.splits = detail::get(s, "splits", default_splits(model), "sweep");
  if (s.contains("grid")) {
    for (std::size_t i = 0; i < s["grid"].size(); ++i)
      cfg.grid.push_back(detail::mode_from(s["grid"][i], "sweep.grid[" + std::to_string(i) + "]"));
  } else if (method == eval::Method::Prune) {
    for (std::size_t m : {1000u, 16u, 8u, 4u, 2u, 1u, 0u}) cfg.grid.push_back(obf::TopM{m});
  } else {
    cfg.grid = {obf::DistortionFree{}, obf::TopM{16}, obf::TopM{8}, obf::TopM{4}, obf::TopM{2}, obf::TopM{1}, obf::TopM{0}};
  }
  cfg.attributes = detail::get(s, "attributes", cfg.attributes, "sweep");
  cfg.adversary_seeds = detail::get(s, "adversary_seeds", cfg.adversary_seeds, "sweep");
  const auto arch = detail::get<std::string>(s, "adversary_arch", "server", "sweep");
  require(arch == "server" || arch == "linear", Errc::ConfigError, "sweep.adversary_arch must be server or linear");
  cfg.adversary_arch = arch == "linear" ? eval::AdversaryArch::Linear : eval::AdversaryArch::ServerMirror;
  cfg.adversary = detail::train_config(detail::section(s, "adversary"), 0, "sweep.adversary", eval::default_adversary_schedule());
  const json& pr = detail::section(ctx.doc, "prune");
  cfg.prune.finetune_epochs = detail::get(pr, "finetune_epochs", cfg.prune.finetune_epochs, "prune");
  cfg.prune.finetune_lr = detail::get(pr, "finetune_lr", cfg.prune.finetune_lr, "prune");
  cfg.prune.batch_size = detail::get(pr, "batch_size", cfg.prune.batch_size, "prune");
  cfg.seed = ctx.stage_seed(kSweepStage);
  cfg.jobs = ctx.jobs;
  const auto pts = eval::sweep(model, ld.ds, cfg);
  ctx.write(stem + ".csv", eval::to_csv(pts));
  ctx.write(stem + ".json", eval::to_json(pts).dump(2) + "\n");
  ctx.summary = {{"points", pts.size()}, {"method", eval::method_name(method)}};
}

inline void cmd_cumulative(Context& ctx) {
  const LoadedData ld = load_data(ctx);
  const nn::SplitModel model = model_for(ctx, ld, true);
  const auto chunk = detail::get<std::size_t>(detail::section(ctx.doc, "cumulative"), "chunk", 256, "cumulative");
  const auto prof = obf::cumulative_signal_content(model, ld.ds.examples(data::Split::Test), chunk);
  std::string csv = "split_index,n,r,mean_log_ratio,cumulative,used,skipped\n";
  for (const auto& l : prof)
    csv += std::to_string(l.split_index) + "," + std::to_string(l.n) + "," + std::to_string(l.r) + "," +
           detail::fmt(l.mean_log_ratio) + "," + detail::fmt(l.cumulative) + "," + std::to_string(l.used) + "," +
           std::to_string(l.skipped) + "\n";
  ctx.write("cumulative.csv", csv);
  ctx.summary = {{"blocks", prof.size()}};
}

inline void cmd_obfuscate(Context& ctx) {
  const json& o = detail::section(ctx.doc, "obfuscate");
  require(o.contains("input"), Errc::ConfigError, "obfuscate needs obfuscate.input (or --input)");
  require(o.contains("mode"), Errc::ConfigError, "obfuscate needs obfuscate.mode (or --mode)");
  const obf::Mode mode = detail::mode_from(o["mode"], "obfuscate.mode");
  linalg::Matrix w;
  if (o.contains("weights")) {
    const auto rows = detail::read_csv(detail::get<std::string>(o, "weights", "", "obfuscate"));
    require(!rows.empty(), Errc::ConfigError, "weights file is empty");
    w = linalg::Matrix(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows[i].size(); ++j) w(i, j) = rows[i][j];
  } else {
    const json& m = detail::section(ctx.doc, "model");
    require(m.contains("checkpoint"), Errc::ConfigError, "obfuscate needs obfuscate.weights or a model checkpoint");
    const fs::path p = detail::get<std::string>(m, "checkpoint", "", "model");
    require(fs::exists(p), Errc::ConfigError, "checkpoint not found: " + p.string());
    const nn::SplitModel model = nn::load_model(p.string());
    w = nn::split_weight(model, detail::get<std::size_t>(o, "split", model.split_index, "obfuscate"));
  }
  const auto zs = detail::read_csv(detail::get<std::string>(o, "input", "", "obfuscate"));
  const auto basis = linalg::svd(w);
  std::string coef, feat;
  json mp = json::array();
  double total = 0;
  for (const auto& z : zs) {
    const auto r = obf::obfuscate(z, basis, mode);
    coef += detail::csv_row(r.alpha_prime.span().first(basis.rank_bound()));
    feat += detail::csv_row(obf::reconstruct(r, basis).span());
    mp.push_back(r.m_prime);
    total += static_cast<double>(r.m_prime);
  }
  ctx.write("coefficients.csv", coef);
  ctx.write("obfuscated.csv", feat);
  ctx.summary = {{"rows", zs.size()},
                 {"n", basis.n},
                 {"r", basis.rank_bound()},
                 {"mode", detail::mode_json(mode)},
                 {"m_prime", mp},
                 {"mean_m_prime", zs.empty() ? 0.0 : total / static_cast<double>(zs.size())}};
  ctx.write("obfuscate.json", ctx.summary.dump(2) + "\n");
}

inline void cmd_evaluate(Context& ctx) {
  const LoadedData ld = load_data(ctx);
  const nn::SplitModel model = model_for(ctx, ld, true);
  const json& e = detail::section(ctx.doc, "evaluate");
  const auto [x, y] = test_slice(ld.ds, detail::get<std::size_t>(e, "limit", 0, "evaluate"));
  data::Labels pred;
  json info = {{"n", y.size()}};
  if (e.contains("mode")) {
    const obf::Mode mode = detail::mode_from(e["mode"], "evaluate.mode");
    const auto split = detail::get<std::size_t>(e, "split", model.split_index, "evaluate");
    const auto parts = nn::split(model, split);
    const auto basis = linalg::svd(parts.w);
    const auto ob = eval::obfuscate_batch(eval::client_features(parts.client, x), basis, mode);
    pred = eval::predictions(parts.server, ob.z);
    info["split"] = split;
    info["mode"] = detail::mode_json(mode);
    info["mean_m_prime"] = ob.mean_m_prime;
  } else {
    pred = eval::predictions(model, x);
  }
  info["accuracy"] = eval::accuracy(pred, y);
  ctx.write("predictions.csv", predictions_csv(pred, y));
  ctx.summary = info;
  ctx.write("evaluate.json", info.dump(2) + "\n");
}

inline void cmd_serve(Context& ctx) {
  const json& s = detail::section(ctx.doc, "serve");
  const json& m = detail::section(ctx.doc, "model");
  require(m.contains("checkpoint"), Errc::ConfigError, "serve needs model.checkpoint (or --checkpoint)");
  const fs::path ckpt = detail::get<std::string>(m, "checkpoint", "", "model");
  require(fs::exists(ckpt), Errc::ConfigError, "checkpoint not found: " + ckpt.string());
  splitwire::ServerOptions opts;
  opts.splits = detail::get(s, "splits", opts.splits, "serve");
  if (s.contains("profile")) {
    const fs::path p = detail::get<std::string>(s, "profile", "", "serve");
    require(fs::exists(p), Errc::ConfigError, "profile not found: " + p.string());
    opts.profile = eval::profile_from_json(json::parse(data::detail::read_file(p)));
  }
  const auto bind = detail::get<std::string>(s, "bind", "127.0.0.1", "serve");
  const auto port = detail::get<std::uint16_t>(s, "port", 7878, "serve");

  // Block termination signals before any thread exists so only sigwait sees them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  splitwire::Server server(nn::load_model(ckpt.string()), opts);
  server.start(bind, port);
  ctx.summary = {{"bind", bind}, {"port", server.port()}};
  ctx.write("serve.json", ctx.summary.dump(2) + "\n");
  std::cout << "listening on " << bind << ":" << server.port() << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  log::info("signal ", sig, ", shutting down");
  server.stop();
}

inline void cmd_infer(Context& ctx) {
  const LoadedData ld = load_data(ctx);
  const nn::SplitModel model = model_for(ctx, ld, true);
  const json& q = detail::section(ctx.doc, "infer");
  const auto host = detail::get<std::string>(q, "host", "127.0.0.1", "infer");
  const auto port = detail::get<std::uint16_t>(q, "port", 7878, "infer");
  const auto [x, y] = test_slice(ld.ds, detail::get<std::size_t>(q, "limit", 0, "infer"));
  splitwire::Client client(host, port);

  std::size_t split = detail::get<std::size_t>(q, "split", model.split_index, "infer");
  obf::Mode mode = q.contains("mode") ? detail::mode_from(q["mode"], "infer.mode") : obf::Mode{obf::DistortionFree{}};
  json info;
  if (q.contains("max_drop")) {
    const auto choice = splitwire::client_choose(client.handshake().profile, detail::get(q, "max_drop", 0.0, "infer"),
                                                 detail::get(q, "max_split", model.num_blocks(), "infer"));
    split = choice.split_index;
    const auto* sb = client.handshake().find(split);
    require(sb != nullptr, Errc::InvalidSplit, "profile names split " + std::to_string(split) + " the server does not host");
    mode = obf::TopM{nn::kept_components(choice.keep_fraction, sb->r())};
    info["keep_fraction"] = choice.keep_fraction;
  }
  const auto parts = nn::split(model, split);
  data::Labels pred;
  double m_total = 0, bytes = 0;
  std::size_t n_feat = 0;
  for (std::size_t i = 0; i < x.n; ++i) {
    const std::size_t idx[] = {i};
    const auto r = client.infer(parts.client, nn::gather(x, idx), split, mode);
    pred.push_back(r.predicted);
    m_total += static_cast<double>(r.m_prime);
    bytes += static_cast<double>(r.request_bytes);
    n_feat = r.n;
  }
  const double mean_m = m_total / static_cast<double>(x.n);
  info.update({{"n", y.size()},
               {"split", split},
               {"mode", detail::mode_json(mode)},
               {"accuracy", eval::accuracy(pred, y)},
               {"mean_m_prime", mean_m},
               {"features", n_feat},
               {"comm_ratio", n_feat ? mean_m / static_cast<double>(n_feat) : 0.0},
               {"request_bytes", bytes}});
  ctx.write("predictions.csv", predictions_csv(pred, y));
  ctx.summary = info;
  ctx.write("infer.json", info.dump(2) + "\n");
}

inline void cmd_at_train(Context& ctx) {
  const LoadedData ld = load_data(ctx);
  const nn::SplitModel model = model_for(ctx, ld, false);
  const json& a = detail::section(ctx.doc, "at");
  baselines::ATConfig cfg;
  cfg.gamma_at = detail::get(a, "gamma_at", cfg.gamma_at, "at");
  cfg.inner_adversary_steps = detail::get(a, "inner_adversary_steps", cfg.inner_adversary_steps, "at");
  cfg.outer_epochs = detail::get(a, "outer_epochs", cfg.outer_epochs, "at");
  cfg.adversary_reinit_every = detail::get(a, "adversary_reinit_every", cfg.adversary_reinit_every, "at");
  cfg.split_index = detail::get(a, "split_index", model.split_index, "at");
  require(a.contains("attribute"), Errc::ConfigError, "at-train needs at.attribute");
  cfg.attribute = detail::get<std::string>(a, "attribute", "", "at");
  cfg.batch_size = detail::get(a, "batch_size", cfg.batch_size, "at");
  cfg.lr = detail::get(a, "lr", cfg.lr, "at");
  cfg.lr_drop_epochs = detail::get(a, "lr_drop_epochs", cfg.lr_drop_epochs, "at");
  cfg.lr_drop_factor = detail::get(a, "lr_drop_factor", cfg.lr_drop_factor, "at");
  cfg.adversary_lr = detail::get(a, "adversary_lr", cfg.adversary_lr, "at");
  cfg.seed = ctx.stage_seed(kATStage);
  try {
    cfg.validate();
  } catch (const Error& e) {
    fail(Errc::ConfigError, e.what());
  }
  const auto res = baselines::adversarial_train(model, ld.ds, cfg);
  std::string log_csv = "epoch,step,target_loss,adversary_loss\n";
  for (const auto& s : res.log)
    log_csv += std::to_string(s.epoch) + "," + std::to_string(s.step) + "," + detail::fmt(s.target_loss) + "," +
               detail::fmt(s.adversary_loss) + "\n";
  ctx.write("model.ckpt", nn::serialize_model(res.model));
  ctx.write("adversary.ckpt", nn::serialize_model(res.adversary));
  ctx.write("at_log.csv", log_csv);
  ctx.summary = {{"accuracy", accuracies(res.model, ld.ds)}, {"gamma_at", cfg.gamma_at}};
  ctx.write("metrics.json", ctx.summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Entry point

struct Overrides {
  std::string checkpoint, data_path, input, weights, mode, host, bind, profile;
  std::size_t split = 0, m_prime = 0, limit = 0;
  double epsilon = 0.0, max_drop = 0.0;
  std::uint16_t port = 0;
};

namespace detail {

inline json read_config(const std::string& path, const std::string& command) {
  if (path.empty()) return json::object();
  require(fs::exists(path), Errc::ConfigError, "config not found: " + path);
  json doc;
  try {
    doc = json::parse(data::detail::read_file(path));
  } catch (const json::exception& e) {
    fail(Errc::ConfigError, path + ": " + e.what());
  }
  require(doc.is_object(), Errc::ConfigError, path + ": top level must be an object");
  if (doc.contains("config_hash") && doc.contains("config")) {  // a manifest
    if (doc.value("command", command) != command)
      log::warn("manifest was written by '", doc.value("command", std::string{}), "', running '", command, "'");
    return doc["config"];
  }
  return doc;
}

inline void write_manifest(Context& ctx) {
  const std::string canon = ctx.doc.dump();
  json man = {{"command", ctx.command},
              {"config", ctx.doc},
              {"config_hash", "fnv1a64:" + hex64(fnv1a(canon))},
              {"seed", ctx.seed},
              {"versions",
               {{"splitshield", kVersion},
                {"protocol", splitwire::kProtocolVersion},
                {"checkpoint", 1},
                {"compiler", __VERSION__}}},
              {"outputs", ctx.outputs}};
  data::detail::write_file(ctx.out / "manifest.json", man.dump(2) + "\n");
}

}  // namespace detail

/// Parses argv and runs one subcommand; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"splitshield: obfuscated split inference toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir = "out";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool as_json = false;
  auto* o_config = app.add_option("--config", config_path, "JSON run config or a previous manifest.json");
  app.add_option("--out", out_dir, "output directory");
  auto* o_seed = app.add_option("--seed", seed, "master seed");
  auto* o_jobs = app.add_option("--jobs", jobs, "parallel sweep workers")->check(CLI::PositiveNumber);
  app.add_flag("--json", as_json, "machine-readable output");
  bool show_version = false;
  app.add_flag("--version", show_version, "print version");
  (void)o_config;

  Overrides ov;
  struct Sub {
    const char* name;
    const char* help;
    void (*fn)(Context&);
  };
  static const Sub subs[] = {
      {"gen-data", "generate a synthetic dataset", cmd_gen_data},
      {"train", "train a split model", cmd_train},
      {"profile", "accuracy-drop profile per split and kept fraction", cmd_profile},
      {"sweep", "privacy/utility sweep with the SVD obfuscator", [](Context& c) { run_sweep(c, eval::Method::Svd, "sweep"); }},
      {"cumulative", "cumulative preserved signal content per block", cmd_cumulative},
      {"obfuscate", "obfuscate feature vectors from a CSV file", cmd_obfuscate},
      {"evaluate", "local predictions on the test split", cmd_evaluate},
      {"serve", "host the server half of a checkpoint", cmd_serve},
      {"infer", "query a running server for the test split", cmd_infer},
      {"at-train", "adversarial-training baseline", cmd_at_train},
      {"prune-sweep", "pruning baseline sweep", [](Context& c) { run_sweep(c, eval::Method::Prune, "prune_sweep"); }},
  };
  std::map<std::string, CLI::Option*> flags;
  for (const auto& s : subs) {
    CLI::App* sc = app.add_subcommand(s.name, s.help);
    const std::string n = s.name;
    auto add = [&](const char* flag, auto& target, const char* help) { flags[n + flag] = sc->add_option(flag, target, help); };
    if (n != "gen-data" && n != "obfuscate" && n != "serve") add("--data", ov.data_path, "dataset metadata (IDX sidecar)");
    if (n != "gen-data" && n != "train" && n != "at-train") add("--checkpoint", ov.checkpoint, "model checkpoint");
    if (n == "obfuscate" || n == "evaluate" || n == "infer") {
      add("--split", ov.split, "split index");
      add("--mode", ov.mode, "free | topm | budget");
      add("--m-prime", ov.m_prime, "retained coefficients (topm)");
      add("--epsilon", ov.epsilon, "distortion budget (budget)");
    }
    if (n == "obfuscate") {
      add("--input", ov.input, "CSV of feature vectors, one per line");
      add("--weights", ov.weights, "CSV weight matrix of the next layer");
    }
    if (n == "evaluate" || n == "infer") add("--limit", ov.limit, "use only the first N test examples");
    if (n == "serve") {
      add("--bind", ov.bind, "bind address");
      add("--port", ov.port, "TCP port (0: ephemeral)");
      add("--profile", ov.profile, "profile.json to publish");
    }
    if (n == "infer") {
      add("--host", ov.host, "server host");
      add("--port", ov.port, "server port");
      add("--max-drop", ov.max_drop, "choose split and fraction from the server profile");
    }
  }

  auto report = [&](int code, Errc kind, const std::string& msg) {
    if (as_json)
      out << json{{"ok", false}, {"error", {{"code", std::string(errc_name(kind))}, {"message", msg}, {"exit", code}}}}.dump()
          << "\n";
    else
      err << "error: " << msg << "\n";
    return code;
  };

  for (int i = 1; i < argc; ++i)
    if (std::string_view(argv[i]) == "--version") show_version = true;
  if (show_version) {
    out << "splitshield " << kVersion << "\n";
    return kExitOk;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    for (int i = 1; i < argc; ++i) as_json = as_json || std::string(argv[i]) == "--json";
    return report(kExitConfig, Errc::ConfigError, e.what());
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  const Sub* sub = nullptr;
  for (const auto& s : subs)
    if (name == s.name) sub = &s;

  Context ctx;
  ctx.command = name;
  try {
    json doc = detail::read_config(config_path, name);
    auto given = [&](const char* flag) {
      auto it = flags.find(name + flag);
      return it != flags.end() && it->second->count() > 0;
    };
    if (*o_seed) doc["seed"] = seed;
    if (*o_jobs) doc["jobs"] = jobs;
    if (given("--data")) doc["data"] = {{"path", ov.data_path}};
    if (given("--checkpoint")) doc["model"]["checkpoint"] = ov.checkpoint;
    const char* sec = name == "obfuscate" ? "obfuscate" : name == "evaluate" ? "evaluate" : name == "infer" ? "infer" : nullptr;
    if (sec) {
      if (given("--split")) doc[sec]["split"] = ov.split;
      if (given("--mode")) {
        json m = {{"mode", ov.mode}};
        if (given("--m-prime")) m["m_prime"] = ov.m_prime;
        if (given("--epsilon")) m["epsilon"] = ov.epsilon;
        doc[sec]["mode"] = m;
      }
      if (given("--limit")) doc[sec]["limit"] = ov.limit;
    }
    if (given("--input")) doc["obfuscate"]["input"] = ov.input;
    if (given("--weights")) doc["obfuscate"]["weights"] = ov.weights;
    if (name == "serve") {
      if (given("--bind")) doc["serve"]["bind"] = ov.bind;
      if (given("--port")) doc["serve"]["port"] = ov.port;
      if (given("--profile")) doc["serve"]["profile"] = ov.profile;
    }
    if (name == "infer") {
      if (given("--host")) doc["infer"]["host"] = ov.host;
      if (given("--port")) doc["infer"]["port"] = ov.port;
      if (given("--max-drop")) doc["infer"]["max_drop"] = ov.max_drop;
    }
    schema::validate(doc);
    ctx.seed = detail::get<std::uint64_t>(doc, "seed", 0, "config");
    ctx.jobs = detail::get<std::size_t>(doc, "jobs", 1, "config");
    require(ctx.jobs >= 1, Errc::ConfigError, "jobs must be >= 1");
    doc["seed"] = ctx.seed;
    ctx.doc = std::move(doc);
    ctx.out = out_dir;
    fs::create_directories(ctx.out);
    sub->fn(ctx);
    detail::write_manifest(ctx);
  } catch (const Error& e) {
    const bool config = e.code() == Errc::ConfigError || e.code() == Errc::SpecError;
    return report(config ? kExitConfig : kExitRuntime, e.code(), e.what());
  } catch (const json::exception& e) {
    return report(kExitConfig, Errc::ConfigError, e.what());
  } catch (const std::exception& e) {
    return report(kExitRuntime, Errc::IoError, e.what());
  }

  if (as_json) {
    out << json{{"ok", true}, {"command", name}, {"out", ctx.out.string()}, {"outputs", ctx.outputs}, {"summary", ctx.summary}}
               .dump()
        << "\n";
  } else {
    for (const auto& o : ctx.outputs) out << "wrote " << (ctx.out / o).string() << "\n";
    out << "wrote " << (ctx.out / "manifest.json").string() << "\n";
  }
  return kExitOk;
}

}  // namespace splitshield::cli
