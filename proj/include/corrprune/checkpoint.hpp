#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <corrprune/common.hpp>
#include <corrprune/tensor.hpp>

namespace corrprune {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

// Ordered name -> tensor registry. Insertion order is the canonical parameter
// order (optimizer state and checkpoints both key off it).
struct ParamMap {
  std::vector<std::pair<std::string, Tensor>> items;
  std::unordered_map<std::string, size_t> index;

  void add(const std::string& name, const Tensor& t) {
    CP_CHECK(!index.count(name), "duplicate parameter name '" << name << "'");
    index[name] = items.size();
    items.emplace_back(name, t);
  }
  Tensor* find(const std::string& name) {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &items[it->second].second;
  }
  size_t size() const { return items.size(); }
};

// Single-file format: magic "CPKT", version byte 0x01, u32 entry count, then
// per entry u16 name length + bytes, u8 rank, u32 dims, f64 data. All LE.
namespace detail {

inline void put_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(uint8_t(v & 0xff));
  b.push_back(uint8_t(v >> 8));
}
inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const uint8_t* p;
  size_t n;
  size_t off = 0;
  void need(size_t k, const char* what) {
    CP_CHECK(off + k <= n, "checkpoint truncated while reading " << what);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return p[off++];
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = uint16_t(p[off]) | uint16_t(p[off + 1]) << 8;
    off += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[off + size_t(i)]) << (8 * i);
    off += 4;
    return v;
  }
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamMap& pm) {
  std::vector<uint8_t> buf;
  buf.push_back('C'); buf.push_back('P'); buf.push_back('K'); buf.push_back('T');
  buf.push_back(0x01);
  detail::put_u32(buf, uint32_t(pm.items.size()));
  for (const auto& [name, t] : pm.items) {
    CP_CHECK(name.size() <= 0xffff, "parameter name too long");
    detail::put_u16(buf, uint16_t(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    buf.push_back(uint8_t(t.rank()));
    for (int64_t d : t.shape()) detail::put_u32(buf, uint32_t(d));
    const uint8_t* raw = reinterpret_cast<const uint8_t*>(t.data());
    buf.insert(buf.end(), raw, raw + size_t(t.numel()) * 8);
  }
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  CP_CHECK(fp != nullptr, "cannot open '" << path << "' for writing");
  size_t wrote = std::fwrite(buf.data(), 1, buf.size(), fp);
  std::fclose(fp);
  CP_CHECK(wrote == buf.size(), "short write to '" << path << "'");
}

inline ParamMap load_checkpoint(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  CP_CHECK(fp != nullptr, "cannot open checkpoint '" << path << "'");
  std::fseek(fp, 0, SEEK_END);
  long sz = std::ftell(fp);
  std::fseek(fp, 0, SEEK_SET);
  std::vector<uint8_t> buf(static_cast<size_t>(sz));
  size_t got = std::fread(buf.data(), 1, buf.size(), fp);
  std::fclose(fp);
  CP_CHECK(got == buf.size(), "short read from '" << path << "'");

  detail::ByteReader r{buf.data(), buf.size()};
  r.need(5, "header");
  CP_CHECK(buf[0] == 'C' && buf[1] == 'P' && buf[2] == 'K' && buf[3] == 'T',
           "bad checkpoint magic in '" << path << "'");
  r.off = 4;
  uint8_t ver = r.u8("version");
  CP_CHECK(ver == 0x01, "unsupported checkpoint version " << int(ver));
  uint32_t count = r.u32("entry count");
  ParamMap pm;
  for (uint32_t e = 0; e < count; ++e) {
    uint16_t nl = r.u16("name length");
    r.need(nl, "name");
    std::string name(reinterpret_cast<const char*>(buf.data() + r.off), nl);
    r.off += nl;
    uint8_t rank = r.u8("rank");
    CP_CHECK(rank >= 1 && rank <= 4, "bad tensor rank " << int(rank));
    std::vector<int64_t> shape(rank);
    int64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      shape[size_t(i)] = int64_t(r.u32("dim"));
      numel *= shape[size_t(i)];
    }
    r.need(size_t(numel) * 8, "tensor data");
    std::vector<double> data(static_cast<size_t>(numel));
    std::memcpy(data.data(), buf.data() + r.off, size_t(numel) * 8);
    r.off += size_t(numel) * 8;
    pm.add(name, Tensor::from(std::move(data), std::move(shape)));
  }
  CP_CHECK(r.off == buf.size(), "trailing bytes in checkpoint '" << path << "'");
  return pm;
}

// Copy values from a loaded checkpoint into live parameters; names and shapes
// must match exactly in both directions.
inline void load_into(const std::string& path, ParamMap& dst) {
  ParamMap src = load_checkpoint(path);
  CP_CHECK(src.size() == dst.size(),
           "checkpoint has " << src.size() << " entries, model expects " << dst.size());
  for (auto& [name, t] : dst.items) {
    Tensor* s = src.find(name);
    CP_CHECK(s != nullptr, "checkpoint missing parameter '" << name << "'");
    CP_CHECK(s->shape() == t.shape(), "shape mismatch for '" << name << "'");
    std::copy(s->data(), s->data() + s->numel(), t.data());
  }
}

}  // namespace corrprune
