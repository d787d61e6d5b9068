#pragma once

#include "pxseg/io.hpp"
#include "pxseg/networks.hpp"
#include "pxseg/warp.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cstdlib>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

namespace pxseg {

// Wire framing: u32 length LE | body, where body = u8 frame-type | payload.
// One request per frame; the server keeps no cross-request state.
namespace proto {

constexpr uint16_t kVersion = 1;
constexpr size_t kDefaultMaxPayload = 64ull << 20;

enum class FrameType : uint8_t {
  kRequest = 1,
  kResponse = 2,
  kError = 3,
};

enum class ErrorCode : uint8_t {
  kMalformedFrame = 1,
  kUnsupportedVersion = 2,
  kPayloadTooLarge = 3,
};

inline const char* error_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::kMalformedFrame: return "malformed-frame";
    case ErrorCode::kUnsupportedVersion: return "unsupported-version";
    case ErrorCode::kPayloadTooLarge: return "payload-too-large";
  }
  return "unknown";
}

/// Frame size cap; PXSG_MAX_PAYLOAD (bytes) overrides the 64 MiB default.
inline size_t max_payload() {
  if (const char* env = std::getenv("PXSG_MAX_PAYLOAD")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<size_t>(v);
  }
  return kDefaultMaxPayload;
}

}  // namespace proto

struct RequestId {
  std::array<uint8_t, 16> bytes{};

  static RequestId random() {
    std::random_device rd;
    RequestId id;
    for (size_t i = 0; i < id.bytes.size(); i += 4) {
      const uint32_t r = rd();
      std::memcpy(id.bytes.data() + i, &r, 4);
    }
    return id;
  }

  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (uint8_t b : bytes) {
      s.push_back(digits[b >> 4]);
      s.push_back(digits[b & 0xf]);
    }
    return s;
  }

  bool operator==(const RequestId&) const = default;
};

template <class S>
struct ClientEncoding;

/// Outbound request frame. Constructible only via client_encode, so the
/// payload is always the warped volume, never the raw input.
class ProxyRequest {
 public:
  uint16_t version() const { return version_; }
  const RequestId& id() const { return id_; }
  const std::vector<uint8_t>& payload() const { return payload_; }

  std::vector<uint8_t> frame() const {
    std::vector<uint8_t> body;
    body.push_back(static_cast<uint8_t>(proto::FrameType::kRequest));
    wire::put_u16(body, version_);
    body.insert(body.end(), id_.bytes.begin(), id_.bytes.end());
    body.insert(body.end(), payload_.begin(), payload_.end());
    std::vector<uint8_t> out;
    wire::put_u32(out, static_cast<uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
    return out;
  }

  /// Rebuilds a request from a proxy-volume file written by the encode step.
  /// Crossing the file boundary, provenance becomes the operator's
  /// responsibility; the payload is still validated as a parsable volume.
  static ProxyRequest from_proxy_volume_bytes(std::vector<uint8_t> bytes) {
    deserialize_volume<float>(bytes.data(), bytes.size());
    return ProxyRequest(RequestId::random(), std::move(bytes));
  }

 private:
  template <class S>
  friend ClientEncoding<S> client_encode(const GeneratorNet<S>&, const Volume<S>&,
                                         const PrivateKey<S>&);

  ProxyRequest(RequestId id, std::vector<uint8_t> payload)
      : id_(id), payload_(std::move(payload)) {}

  uint16_t version_ = proto::kVersion;
  RequestId id_;
  std::vector<uint8_t> payload_;
};

struct ProxyResponse {
  RequestId id;
  uint32_t model_version = 0;
  std::vector<uint8_t> payload;  // serialized soft SegMap

  std::vector<uint8_t> frame() const {
    std::vector<uint8_t> body;
    body.push_back(static_cast<uint8_t>(proto::FrameType::kResponse));
    body.insert(body.end(), id.bytes.begin(), id.bytes.end());
    wire::put_u32(body, model_version);
    body.insert(body.end(), payload.begin(), payload.end());
    std::vector<uint8_t> out;
    wire::put_u32(out, static_cast<uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
    return out;
  }
};

/// Everything the client keeps after keying a volume. The inverse flow stays
/// local; only `request` ever reaches the network.
template <class S>
struct ClientEncoding {
  Volume<S> deformed;
  FlowField<S> flow;          // forward flow, for diagnostics
  FlowField<S> inverse_flow;  // required to decode the response
  ProxyRequest request;
};

template <class S>
ClientEncoding<S> client_encode(const GeneratorNet<S>& gen, const Volume<S>& x,
                                const PrivateKey<S>& key) {
  const NetConfig& cfg = gen.config();
  require(x.dims == cfg.dims, "client_encode: volume dims " + x.dims.str() +
                                  " do not match generator dims " + cfg.dims.str());
  require(key.values.size() == cfg.key_length,
          "client_encode: key length " + std::to_string(key.values.size()) +
              " does not match generator key length " + std::to_string(cfg.key_length));
  auto [f, f_inv] = generate_flows(gen, x, key);
  Volume<S> x_d = warp(x, f);
  ProxyRequest req(RequestId::random(), serialize(x_d));
  return ClientEncoding<S>{std::move(x_d), std::move(f), std::move(f_inv), std::move(req)};
}

/// Pull the server's distorted prediction back into the original space.
template <class S>
SegMap<S> client_decode(const FlowField<S>& inverse_flow, const SegMap<S>& y_d) {
  require(y_d.dims == inverse_flow.dims, "client_decode: response dims " + y_d.dims.str() +
                                             " do not match flow dims " +
                                             inverse_flow.dims.str());
  return warp(y_d, inverse_flow);
}

// ---- blocking socket helpers ----

namespace proto {

inline bool read_exact(int fd, void* dst, size_t n) {
  auto* p = static_cast<uint8_t*>(dst);
  while (n > 0) {
    const ssize_t got = ::recv(fd, p, n, 0);
    if (got <= 0) return false;
    p += got;
    n -= static_cast<size_t>(got);
  }
  return true;
}

inline bool write_all(int fd, const std::vector<uint8_t>& bytes) {
  const uint8_t* p = bytes.data();
  size_t n = bytes.size();
  while (n > 0) {
    const ssize_t put = ::send(fd, p, n, MSG_NOSIGNAL);
    if (put <= 0) return false;
    p += put;
    n -= static_cast<size_t>(put);
  }
  return true;
}

/// Reads one length-prefixed body. Returns false on clean EOF or peer reset;
/// throws only when the declared length exceeds the payload cap (the stream
/// cannot be resynchronized after refusing to read the body).
inline bool read_frame(int fd, std::vector<uint8_t>& body) {
  uint8_t len_bytes[4];
  if (!read_exact(fd, len_bytes, 4)) return false;
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(len_bytes[i]) << (8 * i);
  if (len > max_payload())
    throw Error(std::string(error_name(ErrorCode::kPayloadTooLarge)) + ": frame of " +
                std::to_string(len) + " bytes exceeds cap " + std::to_string(max_payload()));
  body.resize(len);
  return read_exact(fd, body.data(), len);
}

inline std::vector<uint8_t> error_frame(ErrorCode code, const std::string& message) {
  std::vector<uint8_t> body;
  body.push_back(static_cast<uint8_t>(FrameType::kError));
  body.push_back(static_cast<uint8_t>(code));
  wire::put_u16(body, static_cast<uint16_t>(std::min<size_t>(message.size(), 0xffff)));
  body.insert(body.end(), message.begin(), message.begin() + std::min<size_t>(message.size(), 0xffff));
  std::vector<uint8_t> out;
  wire::put_u32(out, static_cast<uint32_t>(body.size()));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

struct ParsedError {
  ErrorCode code;
  std::string message;
};

}  // namespace proto

/// Stateless segmentation service: one thread per connection, the frozen model
/// shared read-only. Malformed frames are answered in-band and the connection
/// kept; only an oversized length prefix forces a disconnect.
template <class S = float>
class ProxyServer {
 public:
  ProxyServer(const SegmentationNet<S>& net, const std::string& address = "127.0.0.1",
              uint16_t port = 0, uint32_t model_version = 1)
      : net_(net), model_version_(model_version) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    require(listen_fd_ >= 0, "server: cannot create socket");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    require(::inet_pton(AF_INET, address.c_str(), &addr.sin_addr) == 1,
            "server: bad listen address " + address);
    require(::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0,
            "server: cannot bind " + address + ":" + std::to_string(port));
    require(::listen(listen_fd_, 64) == 0, "server: listen failed");
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~ProxyServer() { stop(); }
  ProxyServer(const ProxyServer&) = delete;
  ProxyServer& operator=(const ProxyServer&) = delete;

  uint16_t port() const { return port_; }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      for (int fd : connections_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& w : workers) w.join();
  }

 private:
  void accept_loop() {
    while (running_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) break;
      std::lock_guard<std::mutex> lock(mutex_);
      if (!running_) {
        ::close(fd);
        break;
      }
      connections_.push_back(fd);
      workers_.emplace_back([this, fd] { serve_connection(fd); });
    }
  }

  void serve_connection(int fd) {
    std::vector<uint8_t> body;
    while (running_) {
      try {
        if (!proto::read_frame(fd, body)) break;
      } catch (const Error&) {
        proto::write_all(fd, proto::error_frame(proto::ErrorCode::kPayloadTooLarge,
                                                "declared frame length exceeds cap"));
        break;
      }
      if (!proto::write_all(fd, handle(body))) break;
    }
    ::close(fd);
    std::lock_guard<std::mutex> lock(mutex_);
    std::erase(connections_, fd);
  }

  std::vector<uint8_t> handle(const std::vector<uint8_t>& body) const {
    using proto::ErrorCode;
    try {
      wire::Reader r(body.data(), body.size());
      const uint8_t type = r.u8();
      if (type != static_cast<uint8_t>(proto::FrameType::kRequest))
        return proto::error_frame(ErrorCode::kMalformedFrame,
                                  "unexpected frame type " + std::to_string(type));
      const uint16_t version = r.u16();
      if (version != proto::kVersion)
        return proto::error_frame(ErrorCode::kUnsupportedVersion,
                                  "protocol version " + std::to_string(version));
      RequestId id;
      r.bytes(id.bytes.data(), id.bytes.size());
      std::vector<uint8_t> payload(r.remaining());
      r.bytes(payload.data(), payload.size());
      Volume<S> x_d = deserialize_volume<S>(payload.data(), payload.size());
      if (!(x_d.dims == net_.config().dims))
        return proto::error_frame(ErrorCode::kMalformedFrame,
                                  "volume dims " + x_d.dims.str() + " do not match model dims " +
                                      net_.config().dims.str());
      ProxyResponse resp{id, model_version_, serialize(segment(net_, x_d))};
      return resp.frame();
    } catch (const std::exception& e) {
      return proto::error_frame(ErrorCode::kMalformedFrame, e.what());
    }
  }

  const SegmentationNet<S>& net_;
  uint32_t model_version_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::mutex mutex_;
  std::vector<std::thread> workers_;
  std::vector<int> connections_;
};

/// Blocking client connection; reusable for several requests.
class ProxyClient {
 public:
  ProxyClient(const std::string& address, uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    require(fd_ >= 0, "client: cannot create socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    require(::inet_pton(AF_INET, address.c_str(), &addr.sin_addr) == 1,
            "client: bad server address " + address);
    require(::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0,
            "client: cannot connect to " + address + ":" + std::to_string(port));
  }

  ~ProxyClient() { ::close(fd_); }
  ProxyClient(const ProxyClient&) = delete;
  ProxyClient& operator=(const ProxyClient&) = delete;

  /// Sends raw bytes and reads one reply frame body. Exposed for fuzzing.
  std::vector<uint8_t> exchange_raw(const std::vector<uint8_t>& frame) {
    require(proto::write_all(fd_, frame), "client: send failed");
    std::vector<uint8_t> body;
    require(proto::read_frame(fd_, body), "client: connection closed by server");
    return body;
  }

  ProxyResponse roundtrip(const ProxyRequest& request) {
    const std::vector<uint8_t> body = exchange_raw(request.frame());
    wire::Reader r(body.data(), body.size());
    const uint8_t type = r.u8();
    if (type == static_cast<uint8_t>(proto::FrameType::kError)) {
      const auto code = static_cast<proto::ErrorCode>(r.u8());
      const uint16_t len = r.u16();
      std::string msg(len, '\0');
      r.bytes(msg.data(), len);
      throw Error(std::string("server error: ") + proto::error_name(code) + ": " + msg);
    }
    require(type == static_cast<uint8_t>(proto::FrameType::kResponse),
            "client: unexpected frame type " + std::to_string(type));
    ProxyResponse resp;
    r.bytes(resp.id.bytes.data(), resp.id.bytes.size());
    resp.model_version = r.u32();
    resp.payload.resize(r.remaining());
    r.bytes(resp.payload.data(), resp.payload.size());
    require(resp.id == request.id(), "client: response id does not match request id");
    return resp;
  }

 private:
  int fd_;
};

/// One full round trip: send the keyed request, decode the reply locally.
template <class S>
SegMap<S> segment_remote(const std::string& address, uint16_t port,
                         const ClientEncoding<S>& enc) {
  ProxyClient client(address, port);
  ProxyResponse resp = client.roundtrip(enc.request);
  SegMap<S> y_d = deserialize_segmap<S>(resp.payload.data(), resp.payload.size());
  return client_decode(enc.inverse_flow, y_d);
}

}  // namespace pxseg
