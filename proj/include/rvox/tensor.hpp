#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "rvox/error.hpp"

namespace rvox::net {

// Dense row-major tensor, last axis fastest. Activations use 5 axes
// (n, c, z, y, x); conv weights (out, in, kz, ky, kx); biases 1 axis.
// T is float for training and double for gradient-check mode.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(std::size_t(numel_of(shape)), fill);
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d < 1) throw DomainError("shape error: tensor axis < 1");
      n *= d;
    }
    return n;
  }

  std::int64_t numel() const { return std::int64_t(data.size()); }

  void fill(T v) { data.assign(data.size(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  Tensor<T> out;
  out.shape = t.shape;
  out.data.assign(t.data.size(), T(0));
  return out;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.data.size() != b.data.size())
    throw DomainError("shape error: dot operands differ in size");
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    s += double(a.data[i]) * double(b.data[i]);
  return s;
}

}  // namespace rvox::net
