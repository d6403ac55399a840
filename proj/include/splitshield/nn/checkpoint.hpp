#pragma once

// Model checkpoints: "SOBF", u16 version, u32 header length, JSON header, then raw
// little-endian f64 blobs in layer/declaration order (BatchNorm appends its running stats).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "splitshield/error.hpp"
#include "splitshield/nn/model.hpp"

namespace splitshield::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'S', 'O', 'B', 'F'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json shape_json(const Shape3& s) { return nlohmann::json::array({s.c, s.h, s.w}); }

inline Shape3 shape_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) fail(Errc::CheckpointError, "bad shape in checkpoint header");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

inline std::vector<const std::vector<double>*> blobs(const Layer& l) {
  if (const auto* c = std::get_if<Conv>(&l)) return {&c->weight, &c->bias};
  if (const auto* f = std::get_if<FullyConnected>(&l)) return {&f->weight, &f->bias};
  if (const auto* b = std::get_if<BatchNorm>(&l)) return {&b->scale, &b->offset, &b->running_mean, &b->running_var};
  return {};
}

inline std::vector<std::vector<double>*> blobs(Layer& l) {
  if (auto* c = std::get_if<Conv>(&l)) return {&c->weight, &c->bias};
  if (auto* f = std::get_if<FullyConnected>(&l)) return {&f->weight, &f->bias};
  if (auto* b = std::get_if<BatchNorm>(&l)) return {&b->scale, &b->offset, &b->running_mean, &b->running_var};
  return {};
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail(Errc::CheckpointError, "checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline nlohmann::json model_header(const SplitModel& model) {
  nlohmann::json h;
  h["input_shape"] = detail::shape_json(model.input_shape);
  h["split_index"] = model.split_index;
  h["seed"] = model.seed;
  h["block_starts"] = model.block_starts;
  auto& layers = h["layers"] = nlohmann::json::array();
  for (const Layer& l : model.layers) {
    nlohmann::json j{{"kind", kind_name(l)}, {"in", detail::shape_json(input_shape(l))}};
    if (const auto* c = std::get_if<Conv>(&l)) {
      j["out_channels"] = c->out_channels;
      j["trainable"] = c->trainable;
    } else if (const auto* f = std::get_if<FullyConnected>(&l)) {
      j["out_features"] = f->out_features;
      j["trainable"] = f->trainable;
    } else if (const auto* b = std::get_if<BatchNorm>(&l)) {
      j["momentum"] = b->momentum;
      j["eps"] = b->eps;
      j["trainable"] = b->trainable;
    }
    layers.push_back(std::move(j));
  }
  return h;
}

inline std::string serialize_model(const SplitModel& model) {
  const std::string header = model_header(model).dump();
  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint16_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (const Layer& l : model.layers)
    for (const auto* b : detail::blobs(l))
      out.append(reinterpret_cast<const char*>(b->data()), b->size() * sizeof(double));
  return out;
}

/// Parses a checkpoint. Rejects a wrong magic/version, inconsistent layer shapes and
/// blob lengths that do not match the header.
inline SplitModel deserialize_model(const std::string& bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    fail(Errc::CheckpointError, "not a model checkpoint (bad magic)");
  std::size_t pos = 4;
  const auto version = detail::take<std::uint16_t>(bytes, pos);
  require(version == kCheckpointVersion, Errc::CheckpointError,
          "unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::take<std::uint32_t>(bytes, pos);
  require(pos + hlen <= bytes.size(), Errc::CheckpointError, "checkpoint header truncated");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::CheckpointError, std::string("bad checkpoint header: ") + e.what());
  }
  pos += hlen;

  SplitModel m;
  try {
    m.input_shape = detail::shape_from_json(h.at("input_shape"));
    m.split_index = h.at("split_index").get<std::size_t>();
    m.seed = h.at("seed").get<std::uint64_t>();
    m.block_starts = h.at("block_starts").get<std::vector<std::size_t>>();
    Shape3 cur = m.input_shape;
    for (const auto& j : h.at("layers")) {
      const std::string kind = j.at("kind");
      const Shape3 in = detail::shape_from_json(j.at("in"));
      require(in == cur, Errc::CheckpointError, "layer input shape " + in.str() + " does not chain from " + cur.str());
      Layer l;
      if (kind == "conv") {
        const std::size_t oc = j.at("out_channels");
        l = Conv{in, oc, std::vector<double>(oc * in.c * Conv::kTaps), std::vector<double>(oc), j.value("trainable", true)};
      } else if (kind == "fc") {
        const std::size_t of = j.at("out_features");
        l = FullyConnected{in, of, std::vector<double>(of * in.size()), std::vector<double>(of), j.value("trainable", true)};
      } else if (kind == "batchnorm") {
        BatchNorm b = make_batchnorm(in);
        b.momentum = j.value("momentum", 0.1);
        b.eps = j.value("eps", 1e-5);
        b.trainable = j.value("trainable", true);
        l = std::move(b);
      } else if (kind == "relu") {
        l = Relu{in};
      } else if (kind == "maxpool") {
        l = MaxPool{in};
      } else if (kind == "softmax") {
        l = Softmax{in};
      } else {
        fail(Errc::CheckpointError, "unknown layer kind '" + kind + "'");
      }
      cur = output_shape(l);
      m.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::CheckpointError, std::string("bad checkpoint header: ") + e.what());
  }
  for (std::size_t s : m.block_starts)
    require(s < m.layers.size(), Errc::CheckpointError, "block start beyond layer count");

  for (Layer& l : m.layers)
    for (auto* b : detail::blobs(l)) {
      const std::size_t len = b->size() * sizeof(double);
      require(pos + len <= bytes.size(), Errc::CheckpointError, "parameter blob shorter than header declares");
      std::memcpy(b->data(), bytes.data() + pos, len);
      pos += len;
    }
  require(pos == bytes.size(), Errc::CheckpointError, "trailing bytes after parameter blobs");
  return m;
}

inline void save_model(const SplitModel& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), Errc::IoError, "cannot open '" + path + "' for writing");
  const std::string bytes = serialize_model(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), Errc::IoError, "write to '" + path + "' failed");
}

inline SplitModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), Errc::IoError, "cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

/// Loads and checks the input shape against what the caller expects.
inline SplitModel load_model(const std::string& path, const Shape3& expected_input) {
  SplitModel m = load_model(path);
  require(m.input_shape == expected_input, Errc::CheckpointError,
          "checkpoint input shape " + m.input_shape.str() + " != expected " + expected_input.str());
  return m;
}

}  // namespace splitshield::nn
