#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "splitshield/baselines.hpp"
#include "splitshield/cumulative.hpp"
#include "splitshield/data.hpp"
#include "splitshield/eval.hpp"
#include "splitshield/nn/checkpoint.hpp"
#include "test_util.hpp"

using namespace splitshield;
using namespace splitshield::eval;

namespace {

data::SynthResult small_synth(std::uint64_t seed, data::CouplingKind kind = data::CouplingKind::Orthogonal,
                              double rho = 0.0, std::size_t n = 900) {
  data::SynthSpec s;
  s.n_examples = n;
  s.shape = {24, 1, 1};
  s.target_classes = 3;
  s.noise_std = 0.3;
  s.seed = seed;
  s.hidden["h"] = {2, {kind, rho}, 1.5};
  return data::gen_synthetic(s);
}

nn::TrainConfig quick(std::size_t epochs = 15, double lr = 0.01) {
  nn::TrainConfig c;
  c.epochs = epochs;
  c.lr = lr;
  c.lr_drop_epochs = {epochs * 2 / 3};
  c.batch_size = 32;
  return c;
}

nn::SplitModel trained_mlp(const LabeledDataset& ds, std::uint64_t seed, std::size_t epochs = 15) {
  auto cfg = quick(epochs);
  cfg.seed = seed;
  return nn::train(nn::mlp_model(ds.x.example_size(), {16, 8}, ds.target_classes, seed), ds.examples(Split::Train),
                   ds.labels("target", Split::Train), cfg)
      .model;
}

double test_accuracy(const nn::SplitModel& m, const LabeledDataset& ds) {
  return accuracy(m, ds.examples(Split::Test), ds.labels("target", Split::Test));
}

}  // namespace

// ---------------------------------------------------------------------------
// Pruning

TEST(PruneMask, PicksLargestColumnNorm) {
  EXPECT_EQ(baselines::prune_mask(linalg::Matrix{{1, 0}, {0, 2}}, 1), (baselines::Mask{1}));
}

TEST(PruneMask, FullCountKeepsEverything) {
  EXPECT_EQ(baselines::prune_mask(linalg::Matrix{{1, 5, 3}, {0, 2, 1}}, 3), (baselines::Mask{0, 1, 2}));
}

TEST(PruneMask, TiesGoToLowerIndex) {
  EXPECT_EQ(baselines::prune_mask(linalg::Matrix{{1, -1, 1, 2}}, 2), (baselines::Mask{0, 3}));
  EXPECT_EQ(baselines::prune_mask(linalg::Matrix{{1, -1, 1, 0}}, 2), (baselines::Mask{0, 1}));
}

TEST(PruneMask, MatchesSortOracleOnRandomMatrices) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto w = test::random_matrix(8, 16, rng);
    std::vector<std::pair<double, std::size_t>> keyed;
    for (std::size_t j = 0; j < 16; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 8; ++i) s += std::abs(w(i, j));
      keyed.emplace_back(-s, j);
    }
    std::sort(keyed.begin(), keyed.end());
    for (std::size_t m = 0; m <= 16; m += 3) {
      baselines::Mask expect;
      for (std::size_t k = 0; k < m; ++k) expect.push_back(keyed[k].second);
      std::sort(expect.begin(), expect.end());
      EXPECT_EQ(baselines::prune_mask(w, m), expect);
    }
  }
}

TEST(PruneMask, RejectsTooManyColumns) {
  try {
    baselines::prune_mask(linalg::Matrix{{1, 2}}, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidM);
  }
}

TEST(ApplyPrune, IdentityEmptyAndComplement) {
  const std::vector<double> z{1.0, -2.0, 3.0, 0.5};
  EXPECT_EQ(baselines::apply_prune(z, {0, 1, 2, 3}).values(), z);
  EXPECT_EQ(baselines::apply_prune(z, {}).values(), std::vector<double>(4, 0.0));
  const auto a = baselines::apply_prune(z, {0, 2});
  const auto b = baselines::apply_prune(z, {1, 3});
  const double na = linalg::l2_norm(a.span()), nb = linalg::l2_norm(b.span()), nz = linalg::l2_norm(z);
  EXPECT_NEAR(na * na + nb * nb, nz * nz, 1e-12);
}

TEST(ApplyPrune, OutOfRangeIsMaskError) {
  const std::vector<double> z{1.0, 2.0};
  try {
    baselines::apply_prune(z, {2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MaskError);
  }
}

TEST(Finetune, ZeroEpochsLeavesServerUnchangedAndRunsAreSeeded) {
  const auto ds = small_synth(1).dataset;
  const auto model = trained_mlp(ds, 2, 3);
  const auto parts = nn::split(model, 2);
  const auto z = client_features(parts.client, ds.examples(Split::Train));
  const auto pruned = baselines::apply_prune(z, baselines::prune_mask(parts.w, 8));
  baselines::PruneConfig pc;
  pc.finetune_epochs = 0;
  EXPECT_EQ(nn::serialize_model(baselines::finetune_server(parts.server, pruned, ds.labels("target", Split::Train), pc)),
            nn::serialize_model(parts.server));
  pc.finetune_epochs = 2;
  pc.seed = 5;
  const auto a = baselines::finetune_server(parts.server, pruned, ds.labels("target", Split::Train), pc);
  const auto b = baselines::finetune_server(parts.server, pruned, ds.labels("target", Split::Train), pc);
  EXPECT_EQ(nn::serialize_model(a), nn::serialize_model(b));
  EXPECT_NE(nn::serialize_model(a), nn::serialize_model(parts.server));
}

// ---------------------------------------------------------------------------
// Adversarial training

TEST(AdversarialTraining, ZeroGammaIsPlainTraining) {
  const auto ds = small_synth(4).dataset;
  const auto init = nn::mlp_model(24, {16, 8}, 3, 9);
  baselines::ATConfig at;
  at.gamma_at = 0.0;
  at.outer_epochs = 3;
  at.split_index = 2;
  at.attribute = "h";
  at.batch_size = 32;
  at.seed = 21;
  const auto r = baselines::adversarial_train(init, ds, at);
  nn::TrainConfig tc = at.schedule();
  const auto plain = nn::train(init, ds.examples(Split::Train), ds.labels("target", Split::Train), tc);
  auto a = r.model;
  a.split_index = plain.model.split_index;
  EXPECT_EQ(nn::serialize_model(a), nn::serialize_model(plain.model));
}

TEST(AdversarialTraining, SeededRunsAreBitReproducible) {
  const auto ds = small_synth(5).dataset;
  const auto init = nn::mlp_model(24, {16, 8}, 3, 2);
  baselines::ATConfig at;
  at.gamma_at = 0.5;
  at.outer_epochs = 3;
  at.adversary_reinit_every = 2;
  at.split_index = 2;
  at.attribute = "h";
  at.seed = 8;
  const auto a = baselines::adversarial_train(init, ds, at);
  const auto b = baselines::adversarial_train(init, ds, at);
  EXPECT_EQ(nn::serialize_model(a.model), nn::serialize_model(b.model));
  EXPECT_EQ(nn::serialize_model(a.adversary), nn::serialize_model(b.adversary));
  ASSERT_EQ(a.log.size(), b.log.size());
  ASSERT_FALSE(a.log.empty());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].target_loss, b.log[i].target_loss);
    EXPECT_TRUE(std::isfinite(a.log[i].adversary_loss));
  }
  EXPECT_EQ(a.model.split_index, 2u);
}

TEST(AdversarialTraining, MissingHiddenLabelsRejected) {
  const auto ds = small_synth(5).dataset;
  baselines::ATConfig at;
  at.attribute = "absent";
  try {
    baselines::adversarial_train(nn::mlp_model(24, {8}, 3, 1), ds, at);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MissingHiddenLabels);
  }
}

TEST(AdversarialTraining, IdenticalHiddenLabelConflictsWithTarget) {
  // hidden == target: pushing the adversary down drags the target with it.
  auto res = small_synth(6, data::CouplingKind::Correlated, 1.0);
  auto& ds = res.dataset;
  ds.hidden["h"].classes = 3;
  ds.hidden["h"].labels = ds.y_tar;
  const auto init = nn::mlp_model(24, {16, 8}, 3, 3);
  baselines::ATConfig at;
  at.outer_epochs = 6;
  at.split_index = 2;
  at.attribute = "h";
  at.lr = 0.01;
  at.adversary_lr = 0.01;
  at.lr_drop_epochs.clear();
  at.gamma_at = 0.0;
  const double plain = test_accuracy(baselines::adversarial_train(init, ds, at).model, ds);
  at.gamma_at = 1.0;
  const auto r = baselines::adversarial_train(init, ds, at);
  const double target = test_accuracy(r.model, ds);
  const auto attack = train_adversary(r.model, 2, obf::DistortionFree{}, ds, "h", quick(), 4);
  EXPECT_LT(target, plain);
  EXPECT_NEAR(attack.accuracy, target, 0.25);
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Accuracy, PerfectConstantAndHandCount) {
  const Labels y{0, 1, 1, 0, 1, 0, 0, 1, 1, 0};
  EXPECT_EQ(accuracy(y, y), 1.0);
  EXPECT_EQ(accuracy(Labels(10, 1), y), 0.5);
  const Labels p{0, 1, 0, 0, 1, 1, 0, 1, 0, 0};  // mismatches at 2, 5, 8
  EXPECT_DOUBLE_EQ(accuracy(p, y), 0.7);
  try {
    accuracy(Labels{}, Labels{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptySplit);
  }
}

TEST(Spearman, KnownValues) {
  const std::vector<double> a{1, 2, 3, 4, 5};
  EXPECT_NEAR(spearman(a, std::vector<double>{2, 4, 6, 8, 100}), 1.0, 1e-12);
  EXPECT_NEAR(spearman(a, std::vector<double>{5, 4, 3, 2, 1}), -1.0, 1e-12);
  // with ties: ranks of b are (1.5, 1.5, 3, 4, 5); r = 0.9746794344808963 by hand
  EXPECT_NEAR(spearman(a, std::vector<double>{1, 1, 2, 3, 4}), 0.9746794344808963, 1e-12);
}

// ---------------------------------------------------------------------------
// Adversaries

TEST(Adversary, HiddenEqualTargetMatchesServerRetrain) {
  auto res = small_synth(7);
  auto& ds = res.dataset;
  ds.hidden["h"] = {3, ds.y_tar};
  const auto model = trained_mlp(ds, 1);
  const auto cfg = quick();
  const auto attack = train_adversary(model, 2, obf::DistortionFree{}, ds, "h", cfg, 33);
  // same problem with the target labels and the same seed
  const auto parts = nn::split(model, 2);
  const auto basis = linalg::svd(parts.w);
  const auto ztr = obfuscate_batch(client_features(parts.client, ds.examples(Split::Train)), basis, obf::DistortionFree{}).z;
  const auto zte = obfuscate_batch(client_features(parts.client, ds.examples(Split::Test)), basis, obf::DistortionFree{}).z;
  const auto retrain = train_adversary_on(parts.server, ztr, ds.labels("target", Split::Train), 3, cfg, 33);
  EXPECT_NEAR(attack.accuracy, accuracy(retrain, zte, ds.labels("target", Split::Test)), 0.02);
}

TEST(Adversary, ShuffledHiddenLabelsStayNearChance) {
  auto res = small_synth(8, data::CouplingKind::Orthogonal, 0.0, 2000);
  auto& ds = res.dataset;
  Rng rng(99);
  auto& lbl = ds.hidden["h"].labels;
  rng.shuffle(std::span<std::uint32_t>(lbl));
  const auto model = trained_mlp(ds, 3, 8);
  const auto attack = train_adversary(model, 1, obf::DistortionFree{}, ds, "h", quick(), 5);
  EXPECT_NEAR(attack.accuracy, 0.5, 0.05);
}

TEST(Adversary, ZeroFeaturesGiveMajorityRate) {
  const auto ds = small_synth(9).dataset;
  const auto model = trained_mlp(ds, 3, 5);
  const auto attack = train_adversary(model, 2, obf::TopM{0}, ds, "h", quick(), 5);
  const Labels yt = ds.labels("h", Split::Test);
  const double ones = std::count(yt.begin(), yt.end(), 1u) / static_cast<double>(yt.size());
  EXPECT_NEAR(attack.accuracy, std::max(ones, 1 - ones), 0.05);
}

TEST(Adversary, UnknownAttributeRejected) {
  const auto ds = small_synth(9).dataset;
  const auto model = nn::mlp_model(24, {8}, 3, 1);
  try {
    train_adversary(model, 1, obf::DistortionFree{}, ds, "zzz", quick(1), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownAttribute);
  }
}

TEST(Adversary, LeavesModelBytesUntouched) {
  const auto ds = small_synth(10).dataset;
  const auto model = trained_mlp(ds, 3, 3);
  const std::string before = nn::serialize_model(model);
  train_adversary(model, 2, obf::TopM{4}, ds, "h", quick(2), 1);
  train_adversary(model, 1, obf::DistortionFree{}, ds, "h", quick(2), 1, AdversaryArch::Linear);
  EXPECT_EQ(nn::serialize_model(model), before);
}

// ---------------------------------------------------------------------------
// Sweeps

TEST(Sweep, FullSignalMatchesUnobfuscatedBaseline) {
  const auto ds = small_synth(11).dataset;
  const auto model = trained_mlp(ds, 4);
  SweepConfig cfg;
  cfg.splits = {1, 2, 3};
  cfg.grid = {obf::TopM{1000}};
  cfg.adversary_seeds = 1;
  cfg.adversary = quick(2);
  const auto pts = sweep(model, ds, cfg);
  ASSERT_EQ(pts.size(), 3u);
  const double base = 1.0 - test_accuracy(model, ds);
  for (const auto& p : pts) {
    EXPECT_NEAR(p.target_error, base, 0.005) << "split " << p.split_index;
    EXPECT_LE(p.comm_floats, static_cast<double>(p.n));
  }
  EXPECT_EQ(pts[0].param, 16.0);  // capped at r = min(16, 24)
}

TEST(Sweep, CommunicationFollowsGrid) {
  const auto ds = small_synth(12).dataset;
  const auto model = trained_mlp(ds, 4, 3);
  SweepConfig cfg;
  cfg.splits = {2};
  cfg.grid = {obf::TopM{8}, obf::TopM{5}, obf::TopM{2}, obf::TopM{0}};
  cfg.adversary_seeds = 1;
  cfg.adversary = quick(1);
  const auto pts = sweep(model, ds, cfg);
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_LT(pts[i].comm_floats, pts[i - 1].comm_floats);
  EXPECT_EQ(pts[3].comm_floats, 0.0);
}

TEST(Sweep, BudgetCommunicationIsMeanRetainedCount) {
  const auto ds = small_synth(13).dataset;
  const auto model = trained_mlp(ds, 4, 3);
  SweepConfig cfg;
  cfg.splits = {2};
  cfg.grid = {obf::Budget{0.5}};
  cfg.adversary_seeds = 1;
  cfg.adversary = quick(1);
  const auto pts = sweep(model, ds, cfg);
  const auto parts = nn::split(model, 2);
  const auto basis = linalg::svd(parts.w);
  const auto z = client_features(parts.client, ds.examples(Split::Test));
  double total = 0;
  for (std::size_t e = 0; e < z.n; ++e) total += obf::obfuscate_budget(z.example(e), basis, 0.5).m_prime;
  EXPECT_DOUBLE_EQ(pts[0].comm_floats, total / z.n);
  EXPECT_EQ(pts[0].mode, "budget");
  EXPECT_EQ(pts[0].param, 0.5);
}

TEST(Sweep, ParallelAndSerialCsvAreIdentical) {
  const auto ds = small_synth(14).dataset;
  const auto model = trained_mlp(ds, 4, 3);
  SweepConfig cfg;
  cfg.splits = {1, 2};
  cfg.grid = {obf::TopM{6}, obf::TopM{1}};
  cfg.adversary_seeds = 2;
  cfg.adversary = quick(2);
  cfg.seed = 17;
  const std::string serial = to_csv(sweep(model, ds, cfg));
  cfg.jobs = 3;
  const std::string parallel = to_csv(sweep(model, ds, cfg));
  EXPECT_EQ(serial, parallel);
  EXPECT_EQ(serial.substr(0, serial.find('\n')), "split_index,mode,param,target_err,attr,attack_err,comm_floats,seed");
  EXPECT_EQ(std::count(serial.begin(), serial.end(), '\n'), 1 + 4 * 2);
}

TEST(Sweep, PruneMethodFineTunesAndReportsMask) {
  const auto ds = small_synth(15).dataset;
  const auto model = trained_mlp(ds, 4, 3);
  SweepConfig cfg;
  cfg.splits = {2};
  cfg.grid = {obf::TopM{16}, obf::TopM{4}};
  cfg.method = Method::Prune;
  cfg.adversary_seeds = 1;
  cfg.adversary = quick(1);
  cfg.prune.finetune_epochs = 1;
  const auto pts = sweep(model, ds, cfg);
  EXPECT_EQ(pts[0].mode, "prune");
  EXPECT_EQ(pts[1].comm_floats, 4.0);
  cfg.grid = {obf::Budget{1.0}};
  EXPECT_THROW(sweep(model, ds, cfg), Error);
}

TEST(Sweep, NothingRemovedGivesIdenticalServerLogitsForBothMethods) {
  const auto ds = small_synth(16).dataset;
  const auto model = trained_mlp(ds, 4, 3);
  const auto parts = nn::split(model, 2);
  const auto basis = linalg::svd(parts.w);  // 8 x 16: r = 8
  const auto z = client_features(parts.client, ds.examples(Split::Test));
  const auto full_mask = baselines::prune_mask(parts.w, parts.w.cols());
  const auto a = nn::predict(parts.server, baselines::apply_prune(z, full_mask));
  const auto b = nn::predict(parts.server, obfuscate_batch(z, basis, obf::DistortionFree{}).z);
  for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-9);
}

TEST(Sweep, NullspaceHiddenAttributeIsDefeatedAtDistortionFreePoint) {
  auto res = small_synth(17, data::CouplingKind::Nullspace, 0.0, 1200);
  const auto& ds = res.dataset;
  auto model = nn::mlp_model(24, {22, 12}, 3, 5);
  auto& first = std::get<nn::FullyConnected>(model.layers[0]);
  first.weight = res.planted_w->span().size() ? std::vector<double>(res.planted_w->span().begin(), res.planted_w->span().end())
                                               : first.weight;
  first.trainable = false;
  auto cfg = quick(15);
  model = nn::train(model, ds.examples(Split::Train), ds.labels("target", Split::Train), cfg).model;
  SweepConfig sc;
  sc.splits = {1};
  sc.grid = {obf::DistortionFree{}};
  sc.adversary_seeds = 2;
  sc.adversary = quick(15);
  const auto pts = sweep(model, ds, sc);
  EXPECT_GE(pts[0].mean_attack_error("h"), 0.45);
  EXPECT_NEAR(pts[0].target_error, 1.0 - test_accuracy(model, ds), 0.005);
}

// ---------------------------------------------------------------------------
// Profile and cumulative signal

TEST(Profile, FullFractionCostsNothingAndDropsGrowAsFractionShrinks) {
  const auto ds = small_synth(18).dataset;
  const auto model = trained_mlp(ds, 6);
  const std::vector<std::size_t> splits{1, 2, 3};
  const std::vector<double> fr{1.0, 0.75, 0.5, 0.25, 0.1};
  const auto prof = build_profile(model, ds, splits, fr);
  ASSERT_EQ(prof.rows.size(), 15u);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_LE(std::abs(prof.rows[s * 5].drop), 0.005);
    for (std::size_t k = 1; k < 5; ++k) EXPECT_GE(prof.rows[s * 5 + k].drop, prof.rows[s * 5 + k - 1].drop - 0.01);
  }
  const auto back = profile_from_json(to_json(prof));
  EXPECT_EQ(back.rows.size(), prof.rows.size());
  EXPECT_THROW(build_profile(model, ds, splits, std::vector<double>{}), Error);
}

TEST(Cumulative, SquareFullRankLayerKeepsAllSignal) {
  Rng rng(2);
  const auto m = nn::mlp_model(6, {6, 4}, 3, 3);
  nn::Batch x(20, {6, 1, 1});
  for (double& v : x.data) v = rng.normal();
  const auto prof = obf::cumulative_signal_content(m, x);
  ASSERT_EQ(prof.size(), 3u);
  EXPECT_NEAR(prof[0].mean_log_ratio, 0.0, 1e-12);
  EXPECT_EQ(prof[0].used, 20u);
}

TEST(Cumulative, NullSpaceInputHitsFloorAndZeroInputsAreSkipped) {
  auto m = nn::mlp_model(4, {2}, 2, 1);
  auto& fc = std::get<nn::FullyConnected>(m.layers[0]);
  fc.weight = {1, 0, 0, 0, 0, 1, 0, 0};  // reads coordinates 0 and 1 only
  nn::Batch x(3, {4, 1, 1}, {0, 0, 1, 2, 0, 0, -1, 3, 0, 0, 0, 0});
  const auto prof = obf::cumulative_signal_content(m, x);
  EXPECT_EQ(prof[0].mean_log_ratio, -50.0);
  EXPECT_EQ(prof[0].used, 2u);
  EXPECT_EQ(prof[0].skipped, 1u);
}

TEST(Cumulative, RandomNetworksGiveNonIncreasingCurves) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const auto m = nn::reference_model({1, 8, 8}, 5, seed, {4, 6, 8, 16, 8});
    nn::Batch x(16, {1, 8, 8});
    for (double& v : x.data) v = rng.normal();
    const auto prof = obf::cumulative_signal_content(m, x);
    ASSERT_EQ(prof.size(), 6u);
    for (std::size_t k = 0; k < prof.size(); ++k) {
      EXPECT_LE(prof[k].mean_log_ratio, 0.0);
      if (k) EXPECT_LE(prof[k].cumulative, prof[k - 1].cumulative);
    }
  }
}
