#pragma once

// Labeled datasets with one target and any number of hidden attributes, synthetic
// generators with controllable coupling, and an IDX-like on-disk format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "splitshield/error.hpp"
#include "splitshield/linalg.hpp"
#include "splitshield/nn/tensor.hpp"
#include "splitshield/random.hpp"

namespace splitshield::data {

using nn::Batch;
using nn::Shape3;
using Labels = std::vector<std::uint32_t>;

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

struct Attribute {
  std::size_t classes = 2;
  Labels labels;
};

struct Splits {
  std::vector<std::size_t> train, val, test;

  const std::vector<std::size_t>& get(Split s) const {
    return s == Split::Train ? train : (s == Split::Val ? val : test);
  }
};

struct LabeledDataset {
  Batch x;
  std::size_t target_classes = 2;
  Labels y_tar;
  std::map<std::string, Attribute> hidden;
  Splits splits;

  std::size_t size() const noexcept { return x.n; }

  const Attribute& attribute(const std::string& name) const {
    auto it = hidden.find(name);
    if (it == hidden.end()) fail(Errc::UnknownAttribute, "unknown hidden attribute '" + name + "'");
    return it->second;
  }

  /// Labels for `name`; "target" (or an empty name) selects the target label.
  const Labels& labels(const std::string& name) const {
    if (name.empty() || name == "target") return y_tar;
    return attribute(name).labels;
  }
  std::size_t classes(const std::string& name) const {
    if (name.empty() || name == "target") return target_classes;
    return attribute(name).classes;
  }

  Batch examples(Split s) const { return nn::gather(x, splits.get(s)); }

  Labels labels(const std::string& name, Split s) const {
    const Labels& all = labels(name);
    Labels out;
    for (std::size_t i : splits.get(s)) out.push_back(all[i]);
    return out;
  }

  void validate() const {
    require(x.n > 0, Errc::SpecError, "dataset is empty");
    require(y_tar.size() == x.n, Errc::LengthMismatch, "target label count != example count");
    require(target_classes >= 2, Errc::SpecError, "target needs >= 2 classes");
    for (std::uint32_t v : y_tar) require(v < target_classes, Errc::SpecError, "target label out of range");
    for (const auto& [name, a] : hidden) {
      require(name != "target" && !name.empty(), Errc::SpecError, "reserved attribute name '" + name + "'");
      require(a.labels.size() == x.n, Errc::LengthMismatch, "hidden '" + name + "' label count != example count");
      require(a.classes >= 2, Errc::SpecError, "hidden '" + name + "' needs >= 2 classes");
      for (std::uint32_t v : a.labels) require(v < a.classes, Errc::SpecError, "hidden '" + name + "' label out of range");
    }
    std::vector<char> seen(x.n, 0);
    for (const auto* part : {&splits.train, &splits.val, &splits.test})
      for (std::size_t i : *part) {
        require(i < x.n, Errc::SpecError, "split index out of range");
        require(!seen[i], Errc::SpecError, "split index lists overlap");
        seen[i] = 1;
      }
  }
};

/// Partitions 0..n-1 after a seeded shuffle, by train/val fractions (test takes the rest).
inline Splits make_splits(std::size_t n, double train_frac, double val_frac, std::uint64_t seed) {
  require(train_frac >= 0 && val_frac >= 0 && train_frac + val_frac <= 1.0, Errc::SpecError, "bad split fractions");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  const auto ntr = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n)));
  const auto nva = std::min(n - ntr, static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n))));
  Splits s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(ntr));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(ntr), idx.begin() + static_cast<std::ptrdiff_t>(ntr + nva));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(ntr + nva), idx.end());
  return s;
}

/// Subset protocol for an EMNIST-style writer-identity task.
struct EmnistProtocol {
  static constexpr std::size_t hidden_classes = 100;
  static constexpr std::size_t per_class = 130;
  static constexpr std::size_t train = 10000;
  static constexpr std::size_t val = 1500;
  static constexpr std::size_t test = 1500;
};
static_assert(EmnistProtocol::hidden_classes * EmnistProtocol::per_class ==
              EmnistProtocol::train + EmnistProtocol::val + EmnistProtocol::test);

// ---------------------------------------------------------------------------
// Synthetic generation

enum class CouplingKind { Orthogonal, Correlated, Nullspace };

struct Coupling {
  CouplingKind kind = CouplingKind::Orthogonal;
  double rho = 0.0;  // Correlated only
};

inline std::string coupling_name(const Coupling& c) {
  switch (c.kind) {
    case CouplingKind::Orthogonal: return "orthogonal";
    case CouplingKind::Correlated: return "correlated";
    case CouplingKind::Nullspace: return "nullspace";
  }
  return "?";
}

struct HiddenSpec {
  std::size_t classes = 2;
  Coupling coupling;
  double scale = 1.0;  // length of each class code
};

struct SynthSpec {
  std::size_t n_examples = 1000;
  Shape3 shape{16, 1, 1};
  std::size_t target_classes = 2;
  double target_scale = 1.0;
  std::map<std::string, HiddenSpec> hidden;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
  double train_frac = 0.7;
  double val_frac = 0.15;

  void validate() const {
    require(n_examples >= 1, Errc::SpecError, "n_examples must be >= 1");
    require(shape.size() >= 1, Errc::SpecError, "empty example shape");
    require(target_classes >= 2, Errc::SpecError, "target_classes must be >= 2");
    require(noise_std >= 0.0 && std::isfinite(noise_std), Errc::SpecError, "noise_std must be >= 0");
    for (const auto& [name, h] : hidden) {
      require(name != "target" && !name.empty(), Errc::SpecError, "reserved attribute name '" + name + "'");
      require(h.classes >= 2, Errc::SpecError, "hidden '" + name + "' needs >= 2 classes");
      if (h.coupling.kind == CouplingKind::Correlated)
        require(h.coupling.rho >= 0.0 && h.coupling.rho <= 1.0, Errc::SpecError, "rho must lie in [0, 1]");
    }
  }
};

struct SynthResult {
  LabeledDataset dataset;
  linalg::Matrix b_tar;                       // d x target_classes
  std::map<std::string, linalg::Matrix> b_hid;  // d x classes per attribute
  std::optional<linalg::Matrix> planted_w;    // nullspace coupling only: null(W) = span of nullspace frames
};

namespace detail {

/// Columns of `g` orthonormalised (modified Gram-Schmidt, twice) against `against` and each other.
inline std::vector<std::vector<double>> orthonormal_columns(std::size_t d, std::size_t k, Rng& rng,
                                                            const std::vector<std::vector<double>>& against) {
  std::vector<std::vector<double>> out;
  for (std::size_t c = 0; c < k; ++c) {
    for (int attempt = 0;; ++attempt) {
      require(attempt < 20, Errc::SpecError, "failed to draw an independent direction");
      std::vector<double> v(d);
      for (double& x : v) x = rng.normal();
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto* set : std::initializer_list<const std::vector<std::vector<double>>*>{&against, &out})
          for (const auto& u : *set) {
            const double p = linalg::dot(std::span<const double>(v), std::span<const double>(u));
            for (std::size_t i = 0; i < d; ++i) v[i] -= p * u[i];
          }
      }
      const double nv = linalg::l2_norm(v);
      if (nv < 1e-8) continue;
      for (double& x : v) x /= nv;
      out.push_back(std::move(v));
      break;
    }
  }
  return out;
}

/// FNV-1a; a stable stream id per attribute name (std::hash is implementation-defined).
inline std::uint64_t name_stream(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline linalg::Matrix as_matrix(const std::vector<std::vector<double>>& cols, std::size_t d, double scale) {
  linalg::Matrix m(d, cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < d; ++i) m(i, j) = scale * cols[j][i];
  return m;
}

}  // namespace detail

/// x = B_tar e(y_tar) + sum_h B_h e(y_h) + noise.
///
/// All class codes are orthonormal directions (scaled), drawn from one seeded Gram-Schmidt
/// sequence, so frames of different attributes are mutually orthogonal; this needs
/// d >= total number of classes, otherwise SpecError. Correlated attributes copy the target
/// label (mod classes) with probability rho and draw uniformly otherwise. Nullspace
/// attributes additionally yield a square planted W whose null space is exactly the span
/// of their frames.
inline SynthResult gen_synthetic(const SynthSpec& synth) {
  synth.validate();
  const std::size_t d = synth.shape.size();
  std::size_t total = synth.target_classes;
  for (const auto& [_, h] : synth.hidden) total += h.classes;
  require(total <= d, Errc::SpecError,
          "need input dimension >= " + std::to_string(total) + " for orthogonal class frames, have " + std::to_string(d));

  Rng frame_rng(derive_seed(synth.seed, 1));
  std::vector<std::vector<double>> used;
  SynthResult res;
  auto tar_cols = detail::orthonormal_columns(d, synth.target_classes, frame_rng, used);
  used.insert(used.end(), tar_cols.begin(), tar_cols.end());
  res.b_tar = detail::as_matrix(tar_cols, d, synth.target_scale);
  std::vector<std::vector<double>> null_cols;
  for (const auto& [name, h] : synth.hidden) {
    auto cols = detail::orthonormal_columns(d, h.classes, frame_rng, used);
    used.insert(used.end(), cols.begin(), cols.end());
    if (h.coupling.kind == CouplingKind::Nullspace) null_cols.insert(null_cols.end(), cols.begin(), cols.end());
    res.b_hid.emplace(name, detail::as_matrix(cols, d, h.scale));
  }

  LabeledDataset& ds = res.dataset;
  const std::size_t n = synth.n_examples;
  ds.target_classes = synth.target_classes;
  ds.x = Batch(n, synth.shape);
  Rng label_rng(derive_seed(synth.seed, 2));
  ds.y_tar.resize(n);
  for (auto& y : ds.y_tar) y = static_cast<std::uint32_t>(label_rng.index(synth.target_classes));
  for (const auto& [name, h] : synth.hidden) {
    Attribute a{h.classes, Labels(n)};
    Rng hrng(derive_seed(synth.seed, 0x100 + detail::name_stream(name)));
    for (std::size_t i = 0; i < n; ++i) {
      if (h.coupling.kind == CouplingKind::Correlated && hrng.uniform() < h.coupling.rho)
        a.labels[i] = static_cast<std::uint32_t>(ds.y_tar[i] % h.classes);
      else
        a.labels[i] = static_cast<std::uint32_t>(hrng.index(h.classes));
    }
    ds.hidden.emplace(name, std::move(a));
  }

  Rng noise_rng(derive_seed(synth.seed, 3));
  for (std::size_t e = 0; e < n; ++e) {
    auto xe = ds.x.example(e);
    for (std::size_t i = 0; i < d; ++i) xe[i] = res.b_tar(i, ds.y_tar[e]);
    for (const auto& [name, b] : res.b_hid) {
      const std::uint32_t lbl = ds.hidden.at(name).labels[e];
      for (std::size_t i = 0; i < d; ++i) xe[i] += b(i, lbl);
    }
    if (synth.noise_std > 0.0)
      for (std::size_t i = 0; i < d; ++i) xe[i] += synth.noise_std * noise_rng.normal();
  }

  if (!null_cols.empty()) {
    // W = R P^T with P an orthonormal basis of the complement of the nullspace frames.
    Rng wrng(derive_seed(synth.seed, 4));
    const auto p = detail::orthonormal_columns(d, d - null_cols.size(), wrng, null_cols);
    const std::size_t k = p.size();
    linalg::Matrix w(k, d);
    std::vector<double> r(k * k);
    for (double& v : r) v = wrng.normal() / std::sqrt(static_cast<double>(k));
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t c = 0; c < d; ++c) w(i, c) += r[i * k + j] * p[j][c];
    res.planted_w = std::move(w);
  }

  ds.splits = make_splits(n, synth.train_frac, synth.val_frac, derive_seed(synth.seed, 5));
  ds.validate();
  return res;
}

// ---------------------------------------------------------------------------
// IDX-like files: magic "SPLT" (u32 0x53504C54, big-endian like classic IDX), u8 dtype
// code, u8 rank, rank x u32 dims, payload. All integers and payload words are big-endian.

inline constexpr std::uint32_t kIdxMagic = 0x53504C54;

enum class IdxType : std::uint8_t { U8 = 0x08, U32 = 0x0C, F64 = 0x0E };

struct IdxArray {
  IdxType type = IdxType::F64;
  std::vector<std::uint32_t> dims;
  std::vector<double> f64;   // F64 payload
  std::vector<std::uint32_t> u32;  // U8 / U32 payload (U8 values stored widened)

  std::size_t count() const {
    std::size_t c = 1;
    for (auto d : dims) c *= d;
    return c;
  }
};

namespace detail {

template <typename T>
constexpr T byte_swap(T v) {
  T out = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out = static_cast<T>((out << 8) | (v & 0xFF));
    v = static_cast<T>(v >> 8);
  }
  return out;
}

template <typename T>
void put_be(std::string& out, T v) {
  if constexpr (std::endian::native == std::endian::little) v = byte_swap(v);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_be(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail(Errc::LengthMismatch, "IDX file truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  if constexpr (std::endian::native == std::endian::little) v = byte_swap(v);
  return v;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  require(static_cast<bool>(f), Errc::IoError, "cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  require(static_cast<bool>(f), Errc::IoError, "cannot open '" + p.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), Errc::IoError, "write to '" + p.string() + "' failed");
}

}  // namespace detail

inline std::string encode_idx(const IdxArray& a) {
  require(a.dims.size() <= 255, Errc::SpecError, "IDX rank too large");
  std::string out;
  detail::put_be<std::uint32_t>(out, kIdxMagic);
  out.push_back(static_cast<char>(a.type));
  out.push_back(static_cast<char>(a.dims.size()));
  for (auto d : a.dims) detail::put_be<std::uint32_t>(out, d);
  const std::size_t n = a.count();
  switch (a.type) {
    case IdxType::F64:
      require(a.f64.size() == n, Errc::LengthMismatch, "IDX payload length != product of dims");
      for (double v : a.f64) detail::put_be<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      break;
    case IdxType::U32:
      require(a.u32.size() == n, Errc::LengthMismatch, "IDX payload length != product of dims");
      for (auto v : a.u32) detail::put_be<std::uint32_t>(out, v);
      break;
    case IdxType::U8:
      require(a.u32.size() == n, Errc::LengthMismatch, "IDX payload length != product of dims");
      for (auto v : a.u32) {
        require(v <= 255, Errc::SpecError, "u8 IDX value out of range");
        out.push_back(static_cast<char>(v));
      }
      break;
  }
  return out;
}

inline IdxArray decode_idx(const std::string& bytes) {
  std::size_t pos = 0;
  if (bytes.size() < 4) fail(Errc::MagicMismatch, "file too short for IDX magic");
  const auto magic = detail::get_be<std::uint32_t>(bytes, pos);
  require(magic == kIdxMagic, Errc::MagicMismatch, "bad IDX magic");
  require(bytes.size() >= 6, Errc::LengthMismatch, "IDX header truncated");
  IdxArray a;
  const auto code = static_cast<std::uint8_t>(bytes[pos++]);
  require(code == 0x08 || code == 0x0C || code == 0x0E, Errc::MagicMismatch, "unknown IDX dtype code");
  a.type = static_cast<IdxType>(code);
  const auto rank = static_cast<std::uint8_t>(bytes[pos++]);
  for (std::size_t i = 0; i < rank; ++i) a.dims.push_back(detail::get_be<std::uint32_t>(bytes, pos));
  const std::size_t n = a.count();
  const std::size_t width = a.type == IdxType::F64 ? 8 : (a.type == IdxType::U32 ? 4 : 1);
  require(bytes.size() - pos == n * width, Errc::LengthMismatch,
          "IDX payload has " + std::to_string(bytes.size() - pos) + " bytes, dims need " + std::to_string(n * width));
  if (a.type == IdxType::F64) {
    a.f64.resize(n);
    for (auto& v : a.f64) v = std::bit_cast<double>(detail::get_be<std::uint64_t>(bytes, pos));
  } else if (a.type == IdxType::U32) {
    a.u32.resize(n);
    for (auto& v : a.u32) v = detail::get_be<std::uint32_t>(bytes, pos);
  } else {
    a.u32.resize(n);
    for (auto& v : a.u32) v = static_cast<std::uint8_t>(bytes[pos++]);
  }
  return a;
}

enum class ImageType { F64, U8 };

/// Writes <prefix>-images.idx, <prefix>-target.idx, <prefix>-hidden-<name>.idx and the
/// metadata sidecar <prefix>.json into `dir`. Returns the metadata path. U8 images are
/// quantised from [0, 1].
inline std::filesystem::path save_idx(const LabeledDataset& ds, const std::filesystem::path& dir,
                                      const std::string& prefix = "data", ImageType image_type = ImageType::F64) {
  ds.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["format"] = "splitshield-idx";
  meta["count"] = ds.size();
  meta["shape"] = {ds.x.shape.c, ds.x.shape.h, ds.x.shape.w};
  meta["target_classes"] = ds.target_classes;
  meta["image_dtype"] = image_type == ImageType::F64 ? "f64" : "u8";

  IdxArray img;
  img.dims = {static_cast<std::uint32_t>(ds.size()), static_cast<std::uint32_t>(ds.x.shape.c),
              static_cast<std::uint32_t>(ds.x.shape.h), static_cast<std::uint32_t>(ds.x.shape.w)};
  if (image_type == ImageType::F64) {
    img.type = IdxType::F64;
    img.f64 = ds.x.data;
  } else {
    img.type = IdxType::U8;
    img.u32.reserve(ds.x.data.size());
    for (double v : ds.x.data) img.u32.push_back(static_cast<std::uint32_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  const std::string img_name = prefix + "-images.idx";
  detail::write_file(dir / img_name, encode_idx(img));
  meta["images"] = img_name;

  auto write_labels = [&](const Labels& l, const std::string& name) {
    IdxArray a;
    a.type = IdxType::U32;
    a.dims = {static_cast<std::uint32_t>(l.size())};
    a.u32 = l;
    detail::write_file(dir / name, encode_idx(a));
  };
  const std::string tar_name = prefix + "-target.idx";
  write_labels(ds.y_tar, tar_name);
  meta["target"] = tar_name;
  meta["hidden"] = nlohmann::json::object();
  for (const auto& [name, a] : ds.hidden) {
    const std::string file = prefix + "-hidden-" + name + ".idx";
    write_labels(a.labels, file);
    meta["hidden"][name] = {{"classes", a.classes}, {"file", file}};
  }
  meta["splits"] = {{"train", ds.splits.train}, {"val", ds.splits.val}, {"test", ds.splits.test}};
  const auto meta_path = dir / (prefix + ".json");
  detail::write_file(meta_path, meta.dump(2) + "\n");
  return meta_path;
}

inline LabeledDataset load_idx(const std::filesystem::path& metadata_path) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(detail::read_file(metadata_path));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::SpecError, std::string("bad dataset metadata: ") + e.what());
  }
  const auto dir = metadata_path.parent_path();
  LabeledDataset ds;
  try {
    const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
    require(shape.size() == 3, Errc::SpecError, "metadata shape must have 3 entries");
    const Shape3 s{shape[0], shape[1], shape[2]};
    const IdxArray img = decode_idx(detail::read_file(dir / meta.at("images").get<std::string>()));
    require(img.dims.size() == 4 && img.dims[1] == s.c && img.dims[2] == s.h && img.dims[3] == s.w,
            Errc::LengthMismatch, "image dims do not match metadata shape");
    const std::size_t n = img.dims[0];
    require(n > 0, Errc::SpecError, "dataset is empty");
    require(meta.value("count", n) == n, Errc::LengthMismatch, "image count != metadata count");
    std::vector<double> data;
    if (img.type == IdxType::F64) data = img.f64;
    else {
      data.reserve(img.u32.size());
      for (auto v : img.u32) data.push_back(static_cast<double>(v) / 255.0);
    }
    ds.x = Batch(n, s, std::move(data));
    ds.target_classes = meta.at("target_classes").get<std::size_t>();

    auto read_labels = [&](const std::string& file) {
      const IdxArray a = decode_idx(detail::read_file(dir / file));
      require(a.type == IdxType::U32 && a.dims.size() == 1, Errc::MagicMismatch, "label file must be rank-1 u32");
      require(a.dims[0] == n, Errc::LengthMismatch, "label count in '" + file + "' != image count");
      return a.u32;
    };
    ds.y_tar = read_labels(meta.at("target").get<std::string>());
    for (const auto& [name, h] : meta.at("hidden").items())
      ds.hidden.emplace(name, Attribute{h.at("classes").get<std::size_t>(), read_labels(h.at("file").get<std::string>())});
    if (meta.contains("splits")) {
      const auto& sp = meta["splits"];
      ds.splits.train = sp.at("train").get<std::vector<std::size_t>>();
      ds.splits.val = sp.at("val").get<std::vector<std::size_t>>();
      ds.splits.test = sp.at("test").get<std::vector<std::size_t>>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::SpecError, std::string("bad dataset metadata: ") + e.what());
  }
  ds.validate();
  return ds;
}

}  // namespace splitshield::data
