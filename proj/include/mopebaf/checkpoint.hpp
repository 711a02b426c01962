#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <boost/crc.hpp>

#include "mopebaf/config.hpp"
#include "mopebaf/errors.hpp"
#include "mopebaf/model.hpp"
#include "mopebaf/training.hpp"

namespace mopebaf {

// Binary layout (all integers little-endian):
//   magic    8 bytes  "MOPEBAF\0"
//   version  u32
//   crc32    u32      over every byte that follows
//   config   u64 length + INI text (the full run configuration)
//   seeds    u64 model, u64 train, u64 data
//   step     u64      training step the parameters belong to
//   tensors  u32 count, then per tensor:
//              u32 name length, name, u32 rank, rank x u64 extent,
//              numel x f64 values
//   adam     u8 present; if 1: u64 step, then per tensor (same order)
//              u32 name length, name, numel x f64 m, numel x f64 v
inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'P', 'E', 'B', 'A', 'F', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  Params params;
  std::size_t step = 0;
  std::optional<OptimizerState> optimizer;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void str64(const std::string& s) {
    u64(s.size());
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    const std::uint8_t* b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const std::uint8_t* b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str32() { return str(u32()); }
  std::string str64() { return str(u64()); }
  bool done() const { return p_ == end_; }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (static_cast<std::size_t>(end_ - p_) < n) throw FormatError("checkpoint truncated");
    const std::uint8_t* at = p_;
    p_ += n;
    return at;
  }
  std::string str(std::uint64_t n) {
    const std::uint8_t* b = take(n);
    return std::string(reinterpret_cast<const char*>(b), n);
  }

  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter body;
  body.str64(config_to_string(ck.config));
  body.u64(ck.config.model.seed);
  body.u64(ck.config.train.seed);
  body.u64(ck.config.data.data_seed);
  body.u64(ck.step);
  const std::vector<NamedTensor> params = named_parameters(ck.params);
  body.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    body.str32(p.name);
    body.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) body.u64(e);
    for (double v : p.tensor.data()) body.f64(v);
  }
  body.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const OptimizerState& o = *ck.optimizer;
    if (o.names.size() != o.moments.size()) throw InternalError("optimizer state is inconsistent");
    body.u64(o.step);
    body.u32(static_cast<std::uint32_t>(o.names.size()));
    for (std::size_t i = 0; i < o.names.size(); ++i) {
      body.str32(o.names[i]);
      body.u64(o.moments[i].m.size());
      for (double v : o.moments[i].m) body.f64(v);
      for (double v : o.moments[i].v) body.f64(v);
    }
  }

  detail::ByteWriter out;
  for (char c : kCheckpointMagic) out.u8(static_cast<std::uint8_t>(c));
  out.u32(kCheckpointVersion);
  out.u32(detail::crc32(body.bytes().data(), body.bytes().size()));
  auto& bytes = out.bytes();
  bytes.insert(bytes.end(), body.bytes().begin(), body.bytes().end());
  return bytes;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  detail::ByteReader head(bytes.data() + 8, 8);
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format version " + std::to_string(version) +
                      " is not supported; this build reads version " +
                      std::to_string(kCheckpointVersion));
  }
  const std::uint32_t stored_crc = head.u32();
  const std::uint32_t actual_crc = detail::crc32(bytes.data() + 16, bytes.size() - 16);
  if (stored_crc != actual_crc) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "checkpoint checksum mismatch (stored %08x, computed %08x)",
                  stored_crc, actual_crc);
    throw ChecksumError(buf);
  }

  detail::ByteReader r(bytes.data() + 16, bytes.size() - 16);
  Checkpoint ck;
  ck.config = parse_config_string(r.str64());
  ck.config.model.seed = r.u64();
  ck.config.train.seed = r.u64();
  ck.config.data.data_seed = r.u64();
  ck.step = r.u64();

  ck.params = init_params(ck.config.model);
  const std::vector<NamedTensor> params = named_parameters(ck.params);
  std::map<std::string, Tensor> by_name;
  for (const auto& p : params) by_name.emplace(p.name, p.tensor);
  std::map<std::string, bool> seen;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str32();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint holds unknown parameter '" + name + "'");
    if (seen[name]) throw FormatError("checkpoint repeats parameter '" + name + "'");
    seen[name] = true;
    Shape shape(r.u32());
    for (auto& e : shape) e = r.u64();
    Tensor t = it->second;
    if (shape != t.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + shape_str(shape) + ", config expects " +
                        shape_str(t.shape()));
    }
    for (double& v : t.data()) v = r.f64();
  }
  for (const auto& p : params) {
    if (!seen[p.name]) throw FormatError("checkpoint lacks parameter '" + p.name + "'");
  }

  if (r.u8() == 1) {
    OptimizerState o;
    o.step = r.u64();
    const std::uint32_t n = r.u32();
    if (n != params.size()) throw FormatError("optimizer state does not cover every parameter");
    for (std::uint32_t i = 0; i < n; ++i) {
      o.names.push_back(r.str32());
      if (o.names.back() != params[i].name) {
        throw FormatError("optimizer state entry '" + o.names.back() + "' out of order");
      }
      const std::uint64_t len = r.u64();
      if (len != params[i].tensor.numel()) throw FormatError("optimizer moment size mismatch");
      AdamMoments m{std::vector<double>(len), std::vector<double>(len)};
      for (double& v : m.m) v = r.f64();
      for (double& v : m.v) v = r.f64();
      o.moments.push_back(std::move(m));
    }
    ck.optimizer = std::move(o);
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace mopebaf
