#pragma once

// Split-inference runtime. The server hosts M_s with the SVD basis of its first layer and
// an accuracy profile; the client runs M_c, obfuscates locally and ships only the retained
// coefficient prefix.
//
// Frame: "SOWP" | version u16 | type u8 | flags u8 | body_len u32 | body.
// All integers little-endian, coefficients and basis entries f32.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "splitshield/error.hpp"
#include "splitshield/eval.hpp"
#include "splitshield/linalg.hpp"
#include "splitshield/log.hpp"
#include "splitshield/nn/model.hpp"
#include "splitshield/obfuscator.hpp"

namespace splitshield::splitwire {

static_assert(std::endian::native == std::endian::little, "wire codec assumes a little-endian host");

inline constexpr char kMagic[4] = {'S', 'O', 'W', 'P'};
inline constexpr std::uint16_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderSize = 12;
inline constexpr std::size_t kRequestBodyHeader = 14;  // split u16 + m' u32 + id u64
// Per-request overhead as accounted against the coefficient payload: version, type and
// flags of the frame header plus the request body header.
inline constexpr std::size_t kRequestAccountedHeader = 4 + kRequestBodyHeader;
inline constexpr std::uint32_t kMaxClientBody = 1u << 20;    // server-side read bound
inline constexpr std::uint32_t kMaxServerBody = 1u << 28;    // client-side read bound (handshake)

enum class FrameType : std::uint8_t { Hello = 1, Handshake = 2, InferRequest = 3, InferResponse = 4, Error = 5 };

inline bool known_type(std::uint8_t t) { return t >= 1 && t <= 5; }

struct Frame {
  FrameType type = FrameType::Error;
  std::uint8_t flags = 0;
  std::uint16_t version = kProtocolVersion;
  std::string body;
};

// ---------------------------------------------------------------------------
// Byte codec

class Writer {
 public:
  template <class T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out_.append(b, sizeof(T));
  }
  void bytes(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view s) : s_(s) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto v = s_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::size_t remaining() const { return s_.size() - pos_; }
  void need(std::size_t n) const {
    if (remaining() < n) fail(Errc::ProtocolError, "truncated frame body");
  }
  void finish() const {
    if (remaining() != 0) fail(Errc::ProtocolError, "trailing bytes in frame body");
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

struct FrameHeader {
  std::uint16_t version = 0;
  std::uint8_t type = 0;
  std::uint8_t flags = 0;
  std::uint32_t body_len = 0;
};

inline std::string encode_frame(const Frame& f) {
  Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.put<std::uint16_t>(f.version);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(f.type));
  w.put<std::uint8_t>(f.flags);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.body.size()));
  w.bytes(f.body);
  return w.take();
}

/// Parses and bounds-checks the fixed 12-byte header.
inline FrameHeader decode_header(std::string_view h, std::uint32_t max_body) {
  require(h.size() == kHeaderSize, Errc::ProtocolError, "short frame header");
  if (std::memcmp(h.data(), kMagic, 4) != 0) fail(Errc::ProtocolError, "bad frame magic");
  Reader r(h.substr(4));
  FrameHeader fh;
  fh.version = r.get<std::uint16_t>();
  fh.type = r.get<std::uint8_t>();
  fh.flags = r.get<std::uint8_t>();
  fh.body_len = r.get<std::uint32_t>();
  require(known_type(fh.type), Errc::ProtocolError, "unknown frame type " + std::to_string(fh.type));
  require(fh.body_len <= max_body, Errc::ProtocolError, "frame body of " + std::to_string(fh.body_len) + " bytes too large");
  return fh;
}

inline Frame decode_frame(std::string_view bytes, std::uint32_t max_body = kMaxServerBody) {
  require(bytes.size() >= kHeaderSize, Errc::ProtocolError, "short frame");
  const FrameHeader h = decode_header(bytes.substr(0, kHeaderSize), max_body);
  require(bytes.size() == kHeaderSize + h.body_len, Errc::ProtocolError, "frame length mismatch");
  return {static_cast<FrameType>(h.type), h.flags, h.version, std::string(bytes.substr(kHeaderSize))};
}

// ---------------------------------------------------------------------------
// Messages

struct Hello {
  std::uint16_t version = kProtocolVersion;
};

struct SplitBasis {
  std::uint16_t split_index = 0;
  std::uint32_t n = 0;  // feature length
  std::uint32_t m = 0;  // rows of the server's first weight matrix
  std::vector<float> singular_values;  // r values, non-increasing
  std::vector<float> rows;             // r x n, row k = v_k

  std::size_t r() const { return singular_values.size(); }

  /// Basis usable by the obfuscator; columns past r are zero.
  linalg::SvdBasis to_basis() const {
    linalg::SvdBasis b;
    b.m = m;
    b.n = n;
    b.s = linalg::Vector(r());
    for (std::size_t k = 0; k < r(); ++k) b.s[k] = singular_values[k];
    b.v = linalg::Matrix(n, n);
    for (std::size_t k = 0; k < r(); ++k)
      for (std::size_t i = 0; i < n; ++i) b.v(i, k) = rows[k * n + i];
    return b;
  }
};

struct Handshake {
  std::uint16_t protocol_version = kProtocolVersion;
  std::uint32_t classes = 0;
  std::vector<SplitBasis> splits;
  eval::AccuracyProfile profile;

  const SplitBasis* find(std::size_t split) const {
    for (const auto& s : splits)
      if (s.split_index == split) return &s;
    return nullptr;
  }
};

struct InferRequest {
  std::uint16_t split_index = 0;
  std::uint64_t request_id = 0;
  std::vector<float> coefficients;  // the m' retained coefficients, singular-value order
};

struct InferResponse {
  std::uint64_t request_id = 0;
  std::uint32_t predicted = 0;
  std::vector<float> probabilities;
};

struct ErrorMsg {
  std::uint16_t code = 0;
  std::string message;
};

inline Frame encode(const Hello& h) {
  Writer w;
  w.put<std::uint16_t>(h.version);
  return {FrameType::Hello, 0, kProtocolVersion, w.take()};
}

inline Frame encode(const Handshake& hs) {
  Writer w;
  w.put<std::uint16_t>(hs.protocol_version);
  w.put<std::uint32_t>(hs.classes);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(hs.splits.size()));
  for (const auto& s : hs.splits) {
    w.put<std::uint16_t>(s.split_index);
    w.put<std::uint32_t>(s.n);
    w.put<std::uint32_t>(s.m);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.r()));
    for (float v : s.singular_values) w.put<float>(v);
    for (float v : s.rows) w.put<float>(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(hs.profile.rows.size()));
  for (const auto& row : hs.profile.rows) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(row.split_index));
    w.put<double>(row.keep_fraction);
    w.put<double>(row.drop);
  }
  return {FrameType::Handshake, 0, kProtocolVersion, w.take()};
}

inline Frame encode(const InferRequest& q) {
  Writer w;
  w.put<std::uint16_t>(q.split_index);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(q.coefficients.size()));
  w.put<std::uint64_t>(q.request_id);
  for (float v : q.coefficients) w.put<float>(v);
  return {FrameType::InferRequest, 0, kProtocolVersion, w.take()};
}

inline Frame encode(const InferResponse& a) {
  Writer w;
  w.put<std::uint64_t>(a.request_id);
  w.put<std::uint32_t>(a.predicted);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(a.probabilities.size()));
  for (float v : a.probabilities) w.put<float>(v);
  return {FrameType::InferResponse, 0, kProtocolVersion, w.take()};
}

inline Frame encode(const ErrorMsg& e) {
  Writer w;
  w.put<std::uint16_t>(e.code);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(e.message.size()));
  w.bytes(e.message);
  return {FrameType::Error, 0, kProtocolVersion, w.take()};
}

namespace detail {
inline void expect_type(const Frame& f, FrameType t) {
  require(f.type == t, Errc::ProtocolError, "unexpected frame type " + std::to_string(static_cast<int>(f.type)));
}
}  // namespace detail

inline Hello decode_hello(const Frame& f) {
  detail::expect_type(f, FrameType::Hello);
  Reader r(f.body);
  Hello h{r.get<std::uint16_t>()};
  r.finish();
  return h;
}

inline Handshake decode_handshake(const Frame& f) {
  detail::expect_type(f, FrameType::Handshake);
  Reader r(f.body);
  Handshake hs;
  hs.protocol_version = r.get<std::uint16_t>();
  hs.classes = r.get<std::uint32_t>();
  const auto count = r.get<std::uint32_t>();
  r.need(static_cast<std::size_t>(count) * 14);
  for (std::uint32_t i = 0; i < count; ++i) {
    SplitBasis s;
    s.split_index = r.get<std::uint16_t>();
    s.n = r.get<std::uint32_t>();
    s.m = r.get<std::uint32_t>();
    const auto rk = r.get<std::uint32_t>();
    require(rk <= std::min(s.m, s.n), Errc::ProtocolError, "basis rank exceeds min(m, n)");
    r.need((static_cast<std::size_t>(rk) + static_cast<std::size_t>(rk) * s.n) * 4);
    s.singular_values.resize(rk);
    for (auto& v : s.singular_values) v = r.get<float>();
    s.rows.resize(static_cast<std::size_t>(rk) * s.n);
    for (auto& v : s.rows) v = r.get<float>();
    hs.splits.push_back(std::move(s));
  }
  const auto nrows = r.get<std::uint32_t>();
  r.need(static_cast<std::size_t>(nrows) * 18);
  for (std::uint32_t i = 0; i < nrows; ++i) {
    eval::ProfileRow row;
    row.split_index = r.get<std::uint16_t>();
    row.keep_fraction = r.get<double>();
    row.drop = r.get<double>();
    hs.profile.rows.push_back(row);
  }
  r.finish();
  return hs;
}

/// Decodes a request, refusing to read coefficients past `max_m` (when given).
inline InferRequest decode_request(const Frame& f, std::optional<std::size_t> max_m = std::nullopt) {
  detail::expect_type(f, FrameType::InferRequest);
  Reader r(f.body);
  InferRequest q;
  q.split_index = r.get<std::uint16_t>();
  const auto m = r.get<std::uint32_t>();
  q.request_id = r.get<std::uint64_t>();
  require(r.remaining() == static_cast<std::size_t>(m) * 4, Errc::ProtocolError, "coefficient count does not match body");
  if (max_m && m > *max_m)
    fail(Errc::InvalidM, "m' = " + std::to_string(m) + " exceeds " + std::to_string(*max_m) + " for split " +
                             std::to_string(q.split_index));
  q.coefficients.resize(m);
  for (auto& v : q.coefficients) v = r.get<float>();
  return q;
}

inline InferResponse decode_response(const Frame& f) {
  detail::expect_type(f, FrameType::InferResponse);
  Reader r(f.body);
  InferResponse a;
  a.request_id = r.get<std::uint64_t>();
  a.predicted = r.get<std::uint32_t>();
  const auto k = r.get<std::uint32_t>();
  require(r.remaining() == static_cast<std::size_t>(k) * 4, Errc::ProtocolError, "probability count does not match body");
  a.probabilities.resize(k);
  for (auto& v : a.probabilities) v = r.get<float>();
  return a;
}

inline ErrorMsg decode_error(const Frame& f) {
  detail::expect_type(f, FrameType::Error);
  Reader r(f.body);
  ErrorMsg e;
  e.code = r.get<std::uint16_t>();
  const auto len = r.get<std::uint32_t>();
  e.message = std::string(r.bytes(len));
  r.finish();
  return e;
}

inline ErrorMsg error_of(const Error& e) { return {static_cast<std::uint16_t>(e.code()), e.what()}; }

[[noreturn]] inline void raise(const ErrorMsg& e) {
  const Errc code = e.code <= static_cast<std::uint16_t>(Errc::IoError) ? static_cast<Errc>(e.code) : Errc::ProtocolError;
  fail(code, "server: " + e.message);
}

/// Largest deviation of the transported basis rows from orthonormality.
inline double orthonormality_error(const SplitBasis& s) {
  double worst = 0.0;
  for (std::size_t a = 0; a < s.r(); ++a)
    for (std::size_t b = a; b < s.r(); ++b) {
      double d = 0.0;
      for (std::size_t i = 0; i < s.n; ++i)
        d += static_cast<double>(s.rows[a * s.n + i]) * static_cast<double>(s.rows[b * s.n + i]);
      worst = std::max(worst, std::abs(d - (a == b ? 1.0 : 0.0)));
    }
  return worst;
}

// ---------------------------------------------------------------------------
// Stream I/O

namespace io {

/// Reads exactly n bytes; false on orderly EOF before the first byte.
inline bool read_exact(int fd, char* buf, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t k = ::recv(fd, buf + got, n - got, 0);
    if (k == 0) {
      if (got == 0) return false;
      fail(Errc::ConnectionError, "connection closed mid-frame");
    }
    if (k < 0) {
      if (errno == EINTR) continue;
      fail(Errc::ConnectionError, std::string("recv: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(k);
  }
  return true;
}

inline void write_all(int fd, std::string_view data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const ssize_t k = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR) continue;
      fail(Errc::ConnectionError, std::string("send: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(k);
  }
}

/// Reads one frame; nullopt on clean EOF. Header errors raise ProtocolError before any
/// body byte is read.
inline std::optional<Frame> read_frame(int fd, std::uint32_t max_body) {
  char head[kHeaderSize];
  if (!read_exact(fd, head, kHeaderSize)) return std::nullopt;
  const FrameHeader h = decode_header(std::string_view(head, kHeaderSize), max_body);
  Frame f{static_cast<FrameType>(h.type), h.flags, h.version, std::string(h.body_len, '\0')};
  if (h.body_len > 0 && !read_exact(fd, f.body.data(), h.body_len))
    fail(Errc::ConnectionError, "connection closed before frame body");
  return f;
}

inline void write_frame(int fd, const Frame& f) { write_all(fd, encode_frame(f)); }

inline void close_fd(int& fd) {
  if (fd >= 0) ::close(fd);
  fd = -1;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Server

struct ServerOptions {
  std::vector<std::size_t> splits;  // empty: every block boundary whose block starts linear
  eval::AccuracyProfile profile;
  int recv_timeout_ms = 30000;
};

class Server {
 public:
  Server(const nn::SplitModel& model, ServerOptions opts) : opts_(std::move(opts)) {
    auto splits = opts_.splits;
    if (splits.empty())
      for (std::size_t b = 1; b <= model.num_blocks(); ++b)
        if (nn::is_linear(model.layers[model.block_starts[b - 1]])) splits.push_back(b);
    require(!splits.empty(), Errc::InvalidSplit, "server needs at least one split");
    classes_ = static_cast<std::uint32_t>(model.output_shape().size());
    Handshake hs;
    hs.classes = classes_;
    hs.profile = opts_.profile;
    for (std::size_t b : splits) {
      require(b <= std::numeric_limits<std::uint16_t>::max(), Errc::InvalidSplit, "split index too large");
      nn::SplitParts parts = nn::split(model, b);
      Hosted h{std::move(parts.server), linalg::svd(parts.w)};
      SplitBasis sb;
      sb.split_index = static_cast<std::uint16_t>(b);
      sb.n = static_cast<std::uint32_t>(h.basis.n);
      sb.m = static_cast<std::uint32_t>(h.basis.m);
      const std::size_t r = h.basis.rank_bound();
      sb.singular_values.resize(r);
      sb.rows.resize(r * h.basis.n);
      for (std::size_t k = 0; k < r; ++k) {
        sb.singular_values[k] = static_cast<float>(h.basis.s[k]);
        for (std::size_t i = 0; i < h.basis.n; ++i) sb.rows[k * h.basis.n + i] = static_cast<float>(h.basis.v(i, k));
      }
      hs.splits.push_back(std::move(sb));
      hosted_.emplace(b, std::move(h));
    }
    handshake_ = encode(hs);
    log::info("server: hosting ", hosted_.size(), " split(s)");
  }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;
  ~Server() { stop(); }

  /// Binds and starts accepting; port 0 picks an ephemeral port.
  void start(const std::string& host, std::uint16_t port) {
    require(listen_fd_ < 0, Errc::ConfigError, "server already started");
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string svc = std::to_string(port);
    if (::getaddrinfo(host.empty() ? nullptr : host.c_str(), svc.c_str(), &hints, &res) != 0 || !res)
      fail(Errc::ConnectionError, "cannot resolve bind address " + host);
    int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    const bool ok = fd >= 0 && ::bind(fd, res->ai_addr, res->ai_addrlen) == 0 && ::listen(fd, 64) == 0;
    ::freeaddrinfo(res);
    if (!ok) {
      const std::string why = std::strerror(errno);
      if (fd >= 0) ::close(fd);
      fail(Errc::ConnectionError, "cannot bind " + host + ":" + svc + ": " + why);
    }
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    listen_fd_ = fd;
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    log::info("server: listening on port ", port_);
  }

  std::uint16_t port() const { return port_; }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    io::close_fd(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard lk(mu_);
      for (int fd : open_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
  }

  /// Blocks until stop() is called from another thread.
  void wait() {
    while (running_) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }

  /// Serves one connection until EOF or a fatal protocol error; the fd stays owned by the caller.
  void handle_connection(int fd) const {
    bool greeted = false;
    for (;;) {
      std::optional<Frame> f;
      try {
        f = io::read_frame(fd, kMaxClientBody);
      } catch (const Error& e) {
        if (e.code() == Errc::ProtocolError) send_quietly(fd, encode(error_of(e)));
        log::debug("server: closing connection: ", e.what());
        return;
      }
      if (!f) return;
      const Reply rep = respond(*f, greeted);
      if (rep.frame && !send_quietly(fd, *rep.frame)) return;
      if (rep.close) return;
    }
  }

  struct Reply {
    std::optional<Frame> frame;
    bool close = false;
  };

  /// Protocol state machine for one frame; no I/O.
  Reply respond(const Frame& f, bool& greeted) const {
    try {
      if (f.version != kProtocolVersion)
        return {encode(ErrorMsg{static_cast<std::uint16_t>(Errc::Incompatible),
                                "protocol version " + std::to_string(f.version) + " unsupported"}),
                true};
      switch (f.type) {
        case FrameType::Hello: {
          const Hello h = decode_hello(f);
          if (h.version != kProtocolVersion)
            return {encode(ErrorMsg{static_cast<std::uint16_t>(Errc::Incompatible),
                                    "protocol version " + std::to_string(h.version) + " unsupported"}),
                    true};
          greeted = true;
          return {handshake_, false};
        }
        case FrameType::InferRequest: {
          if (!greeted) fail(Errc::ProtocolError, "inference before handshake");
          return {infer(f), false};
        }
        default:
          fail(Errc::ProtocolError, "unexpected frame type from client");
      }
    } catch (const Error& e) {
      // Bad m', unknown split or non-finite payload: report and keep the connection.
      const bool survivable = e.code() == Errc::InvalidM || e.code() == Errc::InvalidSplit || e.code() == Errc::DimensionError;
      return {encode(error_of(e)), !survivable};
    }
  }

  const Frame& handshake_frame() const { return handshake_; }

 private:
  struct Hosted {
    nn::SplitModel server;
    linalg::SvdBasis basis;
  };

  Frame infer(const Frame& f) const {
    const auto t0 = std::chrono::steady_clock::now();
    // Peek the split before the coefficients so the m' bound applies before they are read.
    require(f.body.size() >= kRequestBodyHeader, Errc::ProtocolError, "truncated inference request");
    std::uint16_t split = 0;
    std::memcpy(&split, f.body.data(), 2);
    const auto it = hosted_.find(split);
    if (it == hosted_.end()) fail(Errc::InvalidSplit, "split " + std::to_string(split) + " not served");
    const Hosted& h = it->second;
    const InferRequest q = decode_request(f, h.basis.rank_bound());
    std::vector<double> alpha(q.coefficients.size());
    for (std::size_t k = 0; k < alpha.size(); ++k) {
      require(std::isfinite(q.coefficients[k]), Errc::DimensionError, "non-finite coefficient");
      alpha[k] = q.coefficients[k];
    }
    const linalg::Vector z = obf::reconstruct(std::span<const double>(alpha), h.basis);
    nn::Batch zb(1, h.server.input_shape, z.values());
    const nn::Batch p = nn::predict(h.server, zb);
    InferResponse a;
    a.request_id = q.request_id;
    a.probabilities.assign(p.data.begin(), p.data.end());
    a.predicted = static_cast<std::uint32_t>(nn::argmax(p.example(0)));
    const auto us = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0).count();
    log::debug("server: infer m'=", alpha.size(), " took ", us, "us");
    return encode(a);
  }

  static bool send_quietly(int fd, const Frame& f) {
    try {
      io::write_frame(fd, f);
      return true;
    } catch (const Error&) {
      return false;
    }
  }

  void accept_loop() {
    while (running_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (!running_) return;
        if (errno == EINTR || errno == ECONNABORTED) continue;
        log::warn("server: accept failed: ", std::strerror(errno));
        return;
      }
      timeval tv{opts_.recv_timeout_ms / 1000, (opts_.recv_timeout_ms % 1000) * 1000};
      ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lk(mu_);
      open_.insert(fd);
      workers_.emplace_back([this, fd] {
        handle_connection(fd);
        std::lock_guard lk2(mu_);
        open_.erase(fd);
        ::close(fd);
      });
    }
  }

  ServerOptions opts_;
  std::uint32_t classes_ = 0;
  std::map<std::size_t, Hosted> hosted_;
  Frame handshake_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::set<int> open_;
  std::vector<std::thread> workers_;
};

// ---------------------------------------------------------------------------
// Client

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{100};
};

struct InferResult {
  std::uint32_t predicted = 0;
  std::vector<float> probabilities;
  std::size_t m_prime = 0;
  std::size_t n = 0;
  std::size_t request_bytes = 0;  // full frame size on the wire

  /// Transmitted floats relative to sending the raw feature.
  double comm_ratio() const { return n ? static_cast<double>(m_prime) / static_cast<double>(n) : 0.0; }
};

class Client {
 public:
  Client(std::string host, std::uint16_t port, RetryPolicy retry = {}, std::uint16_t version = kProtocolVersion)
      : host_(std::move(host)), port_(port), retry_(retry), version_(version) {
    with_retry([&] { connect_once(); });
  }
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;
  ~Client() { io::close_fd(fd_); }

  const Handshake& handshake() const { return hs_; }

  /// Sends a coefficient prefix and returns the server's answer.
  InferResult infer_coefficients(std::size_t split, std::span<const double> alpha_prime) {
    InferRequest q;
    q.split_index = static_cast<std::uint16_t>(split);
    q.request_id = next_id_++;
    q.coefficients.assign(alpha_prime.begin(), alpha_prime.end());
    const Frame req = encode(q);
    InferResult res;
    res.m_prime = alpha_prime.size();
    res.request_bytes = kHeaderSize + req.body.size();
    if (const SplitBasis* sb = hs_.find(split)) res.n = sb->n;
    InferResponse a;
    with_retry([&] {
      if (fd_ < 0) connect_once();
      io::write_frame(fd_, req);
      const auto f = io::read_frame(fd_, kMaxServerBody);
      if (!f) {
        io::close_fd(fd_);
        fail(Errc::ConnectionError, "server closed connection");
      }
      if (f->type == FrameType::Error) raise(decode_error(*f));
      a = decode_response(*f);
    });
    require(a.request_id == q.request_id, Errc::ProtocolError, "response id mismatch");
    res.predicted = a.predicted;
    res.probabilities = std::move(a.probabilities);
    return res;
  }

  /// Runs M_c on one example, obfuscates with the transported basis and queries the server.
  InferResult infer(const nn::SplitModel& client_model, const nn::Batch& x, std::size_t split, const obf::Mode& mode) {
    require(x.n == 1, Errc::ShapeError, "client_infer takes a single example");
    const SplitBasis* sb = hs_.find(split);
    require(sb != nullptr, Errc::InvalidSplit, "server does not offer split " + std::to_string(split));
    auto it = bases_.find(split);
    if (it == bases_.end()) it = bases_.emplace(split, sb->to_basis()).first;
    const nn::Batch z = eval::client_features(client_model, x);
    const obf::ObfuscationResult o = obf::obfuscate(z.example(0), it->second, mode);
    return infer_coefficients(split, std::span<const double>(o.alpha_prime.span().data(), o.m_prime));
  }

 private:
  template <class F>
  void with_retry(F&& f) {
    auto backoff = retry_.initial_backoff;
    for (int attempt = 1;; ++attempt) {
      try {
        f();
        return;
      } catch (const Error& e) {
        if (e.code() != Errc::ConnectionError || attempt >= retry_.attempts) throw;
        log::warn("client: attempt ", attempt, " failed (", e.what(), "); retrying");
        io::close_fd(fd_);
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
    }
  }

  void connect_once() {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string svc = std::to_string(port_);
    if (::getaddrinfo(host_.c_str(), svc.c_str(), &hints, &res) != 0 || !res)
      fail(Errc::ConnectionError, "cannot resolve " + host_);
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    const bool ok = fd >= 0 && ::connect(fd, res->ai_addr, res->ai_addrlen) == 0;
    ::freeaddrinfo(res);
    if (!ok) {
      const std::string why = std::strerror(errno);
      if (fd >= 0) ::close(fd);
      fail(Errc::ConnectionError, "cannot connect to " + host_ + ":" + svc + ": " + why);
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    fd_ = fd;
    io::write_frame(fd_, encode(Hello{version_}));
    const auto f = io::read_frame(fd_, kMaxServerBody);
    if (!f) fail(Errc::ConnectionError, "server closed connection during handshake");
    if (f->type == FrameType::Error) raise(decode_error(*f));
    hs_ = decode_handshake(*f);
    if (hs_.protocol_version != version_)
      fail(Errc::Incompatible, "server speaks protocol " + std::to_string(hs_.protocol_version));
    bases_.clear();
  }

  std::string host_;
  std::uint16_t port_;
  RetryPolicy retry_;
  std::uint16_t version_;
  int fd_ = -1;
  Handshake hs_;
  std::map<std::size_t, linalg::SvdBasis> bases_;
  std::uint64_t next_id_ = 1;
};

inline InferResult client_infer(Client& c, const nn::SplitModel& client_model, const nn::Batch& x, std::size_t split,
                                const obf::Mode& mode) {
  return c.infer(client_model, x, split, mode);
}

// ---------------------------------------------------------------------------
// Configuration choice

struct Choice {
  std::size_t split_index = 0;
  double keep_fraction = 1.0;
};

/// Deepest split the client can afford with a row whose drop <= max_drop, then the smallest
/// keep fraction there.
inline Choice client_choose(const eval::AccuracyProfile& profile, double max_drop,
                            std::size_t max_split = std::numeric_limits<std::size_t>::max()) {
  require(!profile.rows.empty(), Errc::NoFeasibleConfig, "empty accuracy profile");
  std::optional<Choice> best;
  for (const auto& row : profile.rows) {
    if (row.split_index > max_split || !(row.drop <= max_drop)) continue;
    if (!best || row.split_index > best->split_index ||
        (row.split_index == best->split_index && row.keep_fraction < best->keep_fraction))
      best = Choice{row.split_index, row.keep_fraction};
  }
  if (!best) fail(Errc::NoFeasibleConfig, "no profile row meets the accuracy-drop limit");
  return *best;
}

}  // namespace splitshield::splitwire
