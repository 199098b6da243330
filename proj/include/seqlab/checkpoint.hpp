#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqlab/model.hpp"
#include "seqlab/vocab.hpp"

namespace seqlab {

// Checkpoint byte layout, version 1. All integers little-endian.
//
//   offset  size  field
//   0       8     magic "SEQLABCK"
//   8       4     format version (u32) = 1
//   12      8     run seed (u64)
//   20      4     embedding dim (u32)
//   24      4     hidden dim (u32)
//   28      4     eos index (u32)
//   32      4     pad index (u32)
//   36      4     vocabulary size V (u32)
//   40      ...   V tokens, each: u32 byte length + UTF-8 bytes
//   ...     8     parameter count N (u64)
//   ...     8N    parameters, IEEE-754 f64, canonical flat order
//
// The layout is frozen: readers must reject other magics/versions rather
// than guess.

struct Checkpoint {
  std::uint64_t seed = 0;
  Vocabulary vocab;
  ModelParams params;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, const std::string& what)
      : buf_(buf), what_(what) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(std::uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= std::uint64_t(std::uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  double f64() {
    std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool exhausted() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;

  void need(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw std::runtime_error(what_ + ": truncated file");
  }
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out;
  out += "SEQLABCK";
  detail::put_u32(out, 1);
  detail::put_u64(out, ck.seed);
  detail::put_u32(out, std::uint32_t(ck.params.emb));
  detail::put_u32(out, std::uint32_t(ck.params.hidden));
  detail::put_u32(out, std::uint32_t(ck.vocab.eos_index));
  detail::put_u32(out, std::uint32_t(ck.vocab.pad_index));
  detail::put_u32(out, std::uint32_t(ck.vocab.size()));
  for (const std::string& tok : ck.vocab.tokens) {
    detail::put_u32(out, std::uint32_t(tok.size()));
    out += tok;
  }
  std::vector<double> flat = ck.params.flat_view();
  detail::put_u64(out, flat.size());
  for (double v : flat) detail::put_f64(out, v);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf,
                                         const std::string& what) {
  detail::ByteReader r(buf, what);
  if (r.bytes(8) != "SEQLABCK")
    throw std::runtime_error(what + ": not a checkpoint file (bad magic)");
  std::uint32_t version = r.u32();
  if (version != 1)
    throw std::runtime_error(what + ": unsupported checkpoint version " +
                             std::to_string(version));
  Checkpoint ck;
  ck.seed = r.u64();
  std::uint32_t emb = r.u32();
  std::uint32_t hidden = r.u32();
  std::uint32_t eos = r.u32();
  std::uint32_t pad = r.u32();
  std::uint32_t vsize = r.u32();
  std::vector<std::string> toks;
  toks.reserve(vsize);
  for (std::uint32_t i = 0; i < vsize; ++i) toks.push_back(r.bytes(r.u32()));
  ck.vocab = Vocabulary(std::move(toks), eos, pad);

  ck.params = ModelParams::sized(vsize, emb, hidden);
  std::uint64_t n = r.u64();
  if (n != ck.params.param_count())
    throw std::runtime_error(what + ": parameter count mismatch");
  std::vector<double> flat(n);
  for (std::uint64_t i = 0; i < n; ++i) flat[i] = r.f64();
  ck.params.set_flat(flat);
  if (!r.exhausted())
    throw std::runtime_error(what + ": trailing bytes after parameters");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  std::string buf = serialize_checkpoint(ck);
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf, path);
}

}  // namespace seqlab
