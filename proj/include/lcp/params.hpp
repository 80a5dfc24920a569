#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lcp/common.hpp"
#include "lcp/tensor.hpp"

namespace lcp {

// Ordered, named tensor collection.  Order is the archive order and the
// optimizer-state order, so it must be deterministic (insertion order).
template <typename T>
struct ParamStore {
  std::vector<std::pair<std::string, Tensor<T>>> items;

  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    require(find(name) == nullptr, ErrorKind::State,
            "params: duplicate tensor name '" + name + "'");
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
  const Tensor<T>* find(const std::string& name) const {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }

  Tensor<T>& get(const std::string& name) {
    Tensor<T>* t = find(name);
    require(t != nullptr, ErrorKind::State,
            "params: missing tensor '" + name + "'");
    return *t;
  }
  const Tensor<T>& get(const std::string& name) const {
    const Tensor<T>* t = find(name);
    require(t != nullptr, ErrorKind::State,
            "params: missing tensor '" + name + "'");
    return *t;
  }

  std::size_t size() const { return items.size(); }
};

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& in) {
  ParamStore<To> out;
  for (const auto& [name, t] : in.items) out.add(name, tensor_cast<To>(t));
  return out;
}

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float v) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i)
    buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::filesystem::path& path) : path_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path_);
    buf_.assign(std::istreambuf_iterator<char>(in),
                std::istreambuf_iterator<char>());
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(
               static_cast<unsigned char>(buf_[pos_ + static_cast<std::size_t>(
                                                          i)]))
           << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(
               static_cast<unsigned char>(buf_[pos_ + static_cast<std::size_t>(
                                                          i)]))
           << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(v);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) {
    require(pos_ + n <= buf_.size(), ErrorKind::Schema,
            path_ + ": truncated parameter archive");
  }
  std::string path_;
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Archive layout (little-endian): u64 tensor count; per tensor: u64 name
// length, UTF-8 name, u64 rank, u64 extents..., raw 32-bit float payload.
inline void save_params(const ParamStore<float>& params,
                        const std::filesystem::path& path) {
  std::string buf;
  detail::put_u64(buf, params.items.size());
  for (const auto& [name, t] : params.items) {
    detail::put_u64(buf, name.size());
    buf += name;
    detail::put_u64(buf, t.rank());
    for (std::size_t e : t.shape) detail::put_u64(buf, e);
    for (float v : t.data) detail::put_f32(buf, v);
  }
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  out.flush();
  require(out.good(), ErrorKind::Io, "write failed: " + path.string());
}

inline ParamStore<float> load_params(const std::filesystem::path& path) {
  detail::ByteReader r(path);
  const std::uint64_t count = r.u64();
  ParamStore<float> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = r.u64();
    const std::string name = r.bytes(name_len);
    const std::uint64_t rank = r.u64();
    std::vector<std::size_t> shape;
    for (std::uint64_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<std::size_t>(r.u64()));
    Tensor<float> t(shape);
    for (float& v : t.data) v = r.f32();
    out.add(name, std::move(t));
  }
  require(r.at_end(), ErrorKind::Schema,
          path.string() + ": trailing bytes in parameter archive");
  return out;
}

}  // namespace lcp
