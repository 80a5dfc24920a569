#pragma once

#include <array>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "lcp/common.hpp"

namespace lcp {

// Dense row-major tensor.  Rank is dynamic but small (<= 4 in practice);
// hot code indexes .data directly and treats shape as metadata.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T{})
      : shape(std::move(s)),
        data(std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                             std::multiplies<>()),
             fill) {}

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // Bounds-checked accessor for tests and cold paths.
  template <typename... Ix>
  T& at(Ix... ix) {
    return data[offset({static_cast<std::size_t>(ix)...})];
  }
  template <typename... Ix>
  const T& at(Ix... ix) const {
    return data[offset({static_cast<std::size_t>(ix)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> ix) const {
    require(ix.size() == shape.size(), ErrorKind::State,
            "tensor index rank mismatch");
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : ix) {
      require(i < shape[d], ErrorKind::State, "tensor index out of range");
      off = off * shape[d] + i;
      ++d;
    }
    return off;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& a) {
  Tensor<To> out(a.shape);
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.data[i] = static_cast<To>(a.data[i]);
  return out;
}

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

}  // namespace lcp
