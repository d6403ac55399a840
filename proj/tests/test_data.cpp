#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "splitshield/data.hpp"
#include "splitshield/nn/train.hpp"
#include "splitshield/obfuscator.hpp"

using namespace splitshield;
using namespace splitshield::data;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("splitshield_data_" + name);
  fs::remove_all(p);
  return p;
}

// Multinomial logistic regression trained with the nn engine; returns accuracy on (xe, ye).
double probe_accuracy(const nn::Batch& xt, const Labels& yt, const nn::Batch& xe, const Labels& ye, std::size_t classes) {
  nn::TrainConfig cfg;
  cfg.epochs = 60;
  cfg.lr = 0.05;
  cfg.lr_drop_epochs = {40};
  cfg.batch_size = 32;
  const auto r = nn::train(nn::mlp_model(xt.example_size(), {}, classes, 1), xt, yt, cfg);
  return nn::accuracy_of(r.model, xe, ye);
}

SynthSpec base_spec() {
  SynthSpec s;
  s.n_examples = 600;
  s.shape = {24, 1, 1};
  s.target_classes = 3;
  s.noise_std = 0.2;
  s.seed = 42;
  return s;
}

}  // namespace

TEST(Synthetic, NoiselessOrthogonalCodesAreLinearlyRecoverable) {
  SynthSpec s = base_spec();
  s.noise_std = 0.0;
  s.hidden["h"] = {4, {CouplingKind::Orthogonal}};
  const auto r = gen_synthetic(s);
  const auto& ds = r.dataset;
  EXPECT_EQ(probe_accuracy(ds.x, ds.y_tar, ds.x, ds.y_tar, 3), 1.0);
  EXPECT_EQ(probe_accuracy(ds.x, ds.labels("h"), ds.x, ds.labels("h"), 4), 1.0);
}

TEST(Synthetic, FramesAreMutuallyOrthogonal) {
  SynthSpec s = base_spec();
  s.hidden["a"] = {2, {CouplingKind::Orthogonal}};
  s.hidden["b"] = {3, {CouplingKind::Correlated, 0.5}};
  const auto r = gen_synthetic(s);
  const auto bt = r.b_tar.transpose();
  for (const auto& [name, b] : r.b_hid) {
    const auto g = linalg::matmul(bt, b);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) EXPECT_NEAR(g(i, j), 0.0, 1e-12) << name;
  }
}

TEST(Synthetic, NullspaceCouplingPlantsAnnihilatingMatrix) {
  SynthSpec s = base_spec();
  s.hidden["secret"] = {2, {CouplingKind::Nullspace}};
  const auto r = gen_synthetic(s);
  ASSERT_TRUE(r.planted_w.has_value());
  const auto& w = *r.planted_w;
  EXPECT_EQ(w.rows(), 22u);
  EXPECT_EQ(w.cols(), 24u);
  const auto wb = linalg::matmul(w, r.b_hid.at("secret"));
  for (std::size_t i = 0; i < wb.rows(); ++i)
    for (std::size_t j = 0; j < wb.cols(); ++j) EXPECT_NEAR(wb(i, j), 0.0, 1e-12);
  // null space is exactly the two planted directions: the 22 singular values are nonzero
  const auto basis = linalg::svd(w);
  EXPECT_GT(basis.s[21], 1e-6);
}

TEST(Synthetic, NullspaceProjectionDefeatsHiddenProbe) {
  SynthSpec s = base_spec();
  s.n_examples = 1200;
  s.hidden["secret"] = {2, {CouplingKind::Nullspace}, 2.0};
  const auto r = gen_synthetic(s);
  const auto& ds = r.dataset;
  const auto basis = linalg::svd(*r.planted_w);
  nn::Batch xs = ds.x;
  for (std::size_t e = 0; e < xs.n; ++e) {
    const auto zs = obf::signal_content(ds.x.example(e), basis);
    std::copy(zs.begin(), zs.end(), xs.example(e).begin());
  }
  const nn::Batch tr = nn::gather(xs, ds.splits.train), te = nn::gather(xs, ds.splits.test);
  const double raw = probe_accuracy(ds.examples(Split::Train), ds.labels("secret", Split::Train),
                                    ds.examples(Split::Test), ds.labels("secret", Split::Test), 2);
  const double projected =
      probe_accuracy(tr, ds.labels("secret", Split::Train), te, ds.labels("secret", Split::Test), 2);
  EXPECT_GE(raw, 0.95);
  EXPECT_LE(projected, 0.55);
}

TEST(Synthetic, FullCorrelationCopiesTarget) {
  SynthSpec s = base_spec();
  s.hidden["copy"] = {3, {CouplingKind::Correlated, 1.0}};
  const auto r = gen_synthetic(s);
  EXPECT_EQ(r.dataset.labels("copy"), r.dataset.y_tar);
}

TEST(Synthetic, PartialCorrelationMatchesRate) {
  SynthSpec s = base_spec();
  s.n_examples = 4000;
  s.target_classes = 2;
  s.hidden["c"] = {2, {CouplingKind::Correlated, 0.2}};
  const auto r = gen_synthetic(s);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < s.n_examples; ++i) agree += r.dataset.y_tar[i] == r.dataset.labels("c")[i];
  // P(agree) = rho + (1 - rho) / 2 = 0.6
  EXPECT_NEAR(static_cast<double>(agree) / s.n_examples, 0.6, 3 * std::sqrt(0.24 / s.n_examples));
}

TEST(Synthetic, BitReproduciblePerSeed) {
  SynthSpec s = base_spec();
  s.hidden["h"] = {2, {CouplingKind::Nullspace}};
  const auto a = gen_synthetic(s);
  const auto b = gen_synthetic(s);
  EXPECT_EQ(a.dataset.x, b.dataset.x);
  EXPECT_EQ(a.dataset.y_tar, b.dataset.y_tar);
  EXPECT_EQ(a.dataset.labels("h"), b.dataset.labels("h"));
  EXPECT_EQ(*a.planted_w, *b.planted_w);
  s.seed = 43;
  EXPECT_NE(gen_synthetic(s).dataset.x, a.dataset.x);
}

TEST(Synthetic, LabelMarginalsAreUniform) {
  SynthSpec s = base_spec();
  s.n_examples = 3000;
  s.target_classes = 5;
  s.shape = {32, 1, 1};
  s.hidden["h"] = {4, {CouplingKind::Orthogonal}};
  const auto r = gen_synthetic(s);
  auto check = [&](const Labels& l, std::size_t k) {
    std::vector<std::size_t> count(k, 0);
    for (auto v : l) ++count[v];
    const double p = 1.0 / k, n = static_cast<double>(l.size());
    for (auto c : count) EXPECT_LE(std::abs(c - n * p), 3 * std::sqrt(n * p * (1 - p)));
  };
  check(r.dataset.y_tar, 5);
  check(r.dataset.labels("h"), 4);
}

TEST(Synthetic, SplitsPartitionTheExamples) {
  const auto r = gen_synthetic(base_spec());
  const auto& sp = r.dataset.splits;
  EXPECT_EQ(sp.train.size() + sp.val.size() + sp.test.size(), 600u);
  EXPECT_EQ(sp.train.size(), 420u);
  EXPECT_EQ(sp.val.size(), 90u);
}

TEST(Synthetic, RejectsInfeasibleSpecs) {
  SynthSpec s = base_spec();
  s.shape = {4, 1, 1};
  s.hidden["h"] = {2, {CouplingKind::Orthogonal}};
  try {
    gen_synthetic(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SpecError);
  }
  s = base_spec();
  s.hidden["h"] = {2, {CouplingKind::Correlated, 1.5}};
  EXPECT_THROW(gen_synthetic(s), Error);
  s = base_spec();
  s.noise_std = -1;
  EXPECT_THROW(gen_synthetic(s), Error);
}

TEST(Dataset, UnknownAttributeRejected) {
  const auto r = gen_synthetic(base_spec());
  try {
    r.dataset.labels("nope");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownAttribute);
  }
}

TEST(EmnistProtocol, Constants) {
  EXPECT_EQ(EmnistProtocol::hidden_classes, 100u);
  EXPECT_EQ(EmnistProtocol::per_class, 130u);
  EXPECT_EQ(EmnistProtocol::train, 10000u);
  EXPECT_EQ(EmnistProtocol::val, 1500u);
  EXPECT_EQ(EmnistProtocol::test, 1500u);
}

// ---------------------------------------------------------------------------

TEST(Idx, RoundTripIsIdentityAndByteStable) {
  SynthSpec s = base_spec();
  s.hidden["h"] = {2, {CouplingKind::Orthogonal}};
  s.hidden["g"] = {3, {CouplingKind::Correlated, 0.3}};
  const auto ds = gen_synthetic(s).dataset;
  const auto d1 = scratch_dir("rt1"), d2 = scratch_dir("rt2");
  const auto meta = save_idx(ds, d1, "set");
  const auto back = load_idx(meta);
  EXPECT_EQ(back.x, ds.x);
  EXPECT_EQ(back.y_tar, ds.y_tar);
  EXPECT_EQ(back.target_classes, ds.target_classes);
  EXPECT_EQ(back.labels("h"), ds.labels("h"));
  EXPECT_EQ(back.classes("g"), 3u);
  EXPECT_EQ(back.splits.test, ds.splits.test);
  save_idx(back, d2, "set");
  for (const auto& f : fs::directory_iterator(d1)) {
    std::ifstream a(f.path(), std::ios::binary), b(d2 / f.path().filename(), std::ios::binary);
    const std::string ba{std::istreambuf_iterator<char>(a), {}}, bb{std::istreambuf_iterator<char>(b), {}};
    EXPECT_EQ(ba, bb) << f.path();
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Idx, MagicIsSpltBigEndian) {
  IdxArray a;
  a.type = IdxType::U32;
  a.dims = {2};
  a.u32 = {1, 258};
  const std::string b = encode_idx(a);
  EXPECT_EQ(b.substr(0, 4), "SPLT");
  EXPECT_EQ(b.size(), 4u + 2 + 4 + 8);
  EXPECT_EQ(decode_idx(b).u32, a.u32);
}

TEST(Idx, U8ImagesQuantise) {
  LabeledDataset ds;
  ds.x = nn::Batch(2, {1, 1, 3}, {0.0, 1.0, 0.5, 0.2, 1.7, -3.0});
  ds.y_tar = {0, 1};
  const auto dir = scratch_dir("u8");
  const auto back = load_idx(save_idx(ds, dir, "img", ImageType::U8));
  const std::vector<double> expect{0.0, 1.0, 128 / 255.0, 51 / 255.0, 1.0, 0.0};
  EXPECT_EQ(back.x.data, expect);
  fs::remove_all(dir);
}

TEST(Idx, BadMagicAndTruncationRejected) {
  IdxArray a;
  a.type = IdxType::F64;
  a.dims = {3};
  a.f64 = {1.0, 2.0, 3.0};
  std::string b = encode_idx(a);
  auto code_of = [](const std::string& bytes) {
    try {
      decode_idx(bytes);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::ConfigError;
  };
  std::string bad = b;
  bad[0] = 'X';
  EXPECT_EQ(code_of(bad), Errc::MagicMismatch);
  EXPECT_EQ(code_of(b.substr(0, b.size() - 1)), Errc::LengthMismatch);
  EXPECT_EQ(code_of(b.substr(0, 7)), Errc::LengthMismatch);
  EXPECT_EQ(code_of(b + "x"), Errc::LengthMismatch);
}

TEST(Idx, TruncatedImageFileRejected) {
  const auto ds = gen_synthetic(base_spec()).dataset;
  const auto dir = scratch_dir("trunc");
  const auto meta = save_idx(ds, dir, "d");
  const auto img = dir / "d-images.idx";
  fs::resize_file(img, fs::file_size(img) - 8);
  try {
    load_idx(meta);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::LengthMismatch);
  }
  fs::remove_all(dir);
}

TEST(Idx, LabelCountMismatchRejected) {
  const auto ds = gen_synthetic(base_spec()).dataset;
  const auto dir = scratch_dir("count");
  const auto meta = save_idx(ds, dir, "d");
  IdxArray l;
  l.type = IdxType::U32;
  l.dims = {3};
  l.u32 = {0, 1, 0};
  std::ofstream(dir / "d-target.idx", std::ios::binary) << encode_idx(l);
  try {
    load_idx(meta);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::LengthMismatch);
  }
  fs::remove_all(dir);
}

TEST(Idx, EmptyDatasetRejected) {
  LabeledDataset ds;
  EXPECT_THROW(save_idx(ds, scratch_dir("empty")), Error);
}
