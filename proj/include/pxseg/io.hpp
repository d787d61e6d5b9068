#pragma once

#include "pxseg/volume.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace pxseg {

// Raw grid container: "PXSG" | version u16 | kind u8 | H,W,D,C u32 LE |
// payload f32 LE (u16 LE labels for kind 2), w fastest.
namespace wire {

constexpr char kMagic[4] = {'P', 'X', 'S', 'G'};
constexpr uint16_t kVersion = 1;

enum class Kind : uint8_t {
  kVolume = 0,
  kSegSoft = 1,
  kSegDiscrete = 2,
  kFlow = 3,
};

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}
inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

  uint8_t u8() { need(1); return data_[pos_++]; }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  void bytes(void* dst, size_t n) {
    need(n);
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }
  size_t remaining() const { return size_ - pos_; }
  void expect_end() const {
    if (pos_ != size_)
      throw Error("length mismatch: " + std::to_string(size_ - pos_) + " trailing bytes");
  }

 private:
  void need(size_t n) const {
    if (pos_ + n > size_)
      throw Error("length mismatch: truncated payload (need " + std::to_string(n) +
                  " bytes at offset " + std::to_string(pos_) + ")");
  }
  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
};

struct Header {
  Kind kind;
  Dims3 dims;
  uint32_t classes;
};

inline void write_header(std::vector<uint8_t>& out, Kind kind, Dims3 dims, uint32_t classes) {
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kVersion);
  out.push_back(static_cast<uint8_t>(kind));
  put_u32(out, static_cast<uint32_t>(dims.H));
  put_u32(out, static_cast<uint32_t>(dims.W));
  put_u32(out, static_cast<uint32_t>(dims.D));
  put_u32(out, classes);
}

inline Header read_header(Reader& r) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw Error("format error: bad magic");
  const uint16_t version = r.u16();
  if (version != kVersion) throw Error("format error: unsupported version " + std::to_string(version));
  const uint8_t kind = r.u8();
  if (kind > 3) throw Error("format error: unknown kind " + std::to_string(kind));
  Header h;
  h.kind = static_cast<Kind>(kind);
  h.dims.H = static_cast<int>(r.u32());
  h.dims.W = static_cast<int>(r.u32());
  h.dims.D = static_cast<int>(r.u32());
  h.classes = r.u32();
  if (h.dims.H <= 0 || h.dims.W <= 0 || h.dims.D <= 0)
    throw Error("format error: zero dimension");
  return h;
}

template <class S>
void put_f32(std::vector<uint8_t>& out, const VecX<S>& v) {
  const size_t base = out.size();
  out.resize(base + v.size() * 4);
  if constexpr (std::is_same_v<S, float>) {
    std::memcpy(out.data() + base, v.data(), v.size() * 4);
  } else {
    VecX<float> tmp = v.template cast<float>();
    std::memcpy(out.data() + base, tmp.data(), tmp.size() * 4);
  }
}

template <class S>
VecX<S> get_f32(Reader& r, long count) {
  VecX<float> tmp(count);
  r.bytes(tmp.data(), static_cast<size_t>(count) * 4);
  if (!tmp.isFinite().all()) throw Error("format error: non-finite payload value");
  if constexpr (std::is_same_v<S, float>) return tmp;
  else return tmp.template cast<S>();
}

}  // namespace wire

template <class S>
std::vector<uint8_t> serialize(const Volume<S>& v) {
  std::vector<uint8_t> out;
  wire::write_header(out, wire::Kind::kVolume, v.dims, 1);
  wire::put_f32(out, v.data);
  return out;
}

template <class S>
std::vector<uint8_t> serialize(const SegMap<S>& s) {
  std::vector<uint8_t> out;
  wire::write_header(out, wire::Kind::kSegSoft, s.dims, static_cast<uint32_t>(s.classes));
  wire::put_f32(out, s.soft);
  return out;
}

template <class S>
std::vector<uint8_t> serialize(const FlowField<S>& f) {
  std::vector<uint8_t> out;
  wire::write_header(out, wire::Kind::kFlow, f.dims, 3);
  wire::put_f32(out, f.data);
  return out;
}

inline std::vector<uint8_t> serialize_labels(Dims3 dims, const std::vector<uint16_t>& labels,
                                             int classes) {
  require(static_cast<long>(labels.size()) == dims.voxels(), "serialize_labels: count mismatch");
  std::vector<uint8_t> out;
  wire::write_header(out, wire::Kind::kSegDiscrete, dims, static_cast<uint32_t>(classes));
  for (uint16_t l : labels) wire::put_u16(out, l);
  return out;
}

template <class S = float>
Volume<S> deserialize_volume(const uint8_t* data, size_t size) {
  wire::Reader r(data, size);
  auto h = wire::read_header(r);
  if (h.kind != wire::Kind::kVolume) throw Error("format error: expected volume payload");
  auto values = wire::get_f32<S>(r, h.dims.voxels());
  r.expect_end();
  return Volume<S>(h.dims, std::move(values));
}

template <class S = float>
SegMap<S> deserialize_segmap(const uint8_t* data, size_t size) {
  wire::Reader r(data, size);
  auto h = wire::read_header(r);
  if (h.kind != wire::Kind::kSegSoft) throw Error("format error: expected soft segmap payload");
  auto values = wire::get_f32<S>(r, static_cast<long>(h.classes) * h.dims.voxels());
  r.expect_end();
  return SegMap<S>(h.dims, static_cast<int>(h.classes), std::move(values));
}

template <class S = float>
FlowField<S> deserialize_flow(const uint8_t* data, size_t size) {
  wire::Reader r(data, size);
  auto h = wire::read_header(r);
  if (h.kind != wire::Kind::kFlow) throw Error("format error: expected flow payload");
  auto values = wire::get_f32<S>(r, 3 * h.dims.voxels());
  r.expect_end();
  return FlowField<S>(h.dims, std::move(values));
}

struct DiscreteSeg {
  Dims3 dims;
  int classes;
  std::vector<uint16_t> labels;
};

inline DiscreteSeg deserialize_labels(const uint8_t* data, size_t size) {
  wire::Reader r(data, size);
  auto h = wire::read_header(r);
  if (h.kind != wire::Kind::kSegDiscrete) throw Error("format error: expected discrete segmap");
  DiscreteSeg out{h.dims, static_cast<int>(h.classes), {}};
  out.labels.resize(h.dims.voxels());
  for (auto& l : out.labels) l = r.u16();
  r.expect_end();
  for (uint16_t l : out.labels)
    if (l >= out.classes) throw Error("format error: label out of range");
  return out;
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  require(f.good(), "write failed: " + path);
}

inline std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  require(f.good(), "cannot open: " + path);
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  require(f.good(), "read failed: " + path);
  return bytes;
}

}  // namespace pxseg
