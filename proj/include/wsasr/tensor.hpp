// wsasr: dense row-major tensor. float is the training dtype; double
// instantiations exist for finite-difference verification.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "wsasr/common.hpp"

namespace wsasr {

template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(size_t(numel_of(shape)), T(0));
  }

  Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    require(int64_t(data.size()) == numel_of(shape), "tensor: data length does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      require(d >= 0, "tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int64_t> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  int64_t numel() const { return int64_t(data.size()); }
  int ndim() const { return int(shape.size()); }
  int64_t dim(int i) const { return shape[size_t(i)]; }

  // 2-D accessors (row-major).
  int64_t rows() const { return shape.at(0); }
  int64_t cols() const { return shape.at(1); }
  T& at(int64_t i, int64_t j) { return data[size_t(i * cols() + j)]; }
  const T& at(int64_t i, int64_t j) const { return data[size_t(i * cols() + j)]; }

  // 3-D accessor.
  T& at(int64_t i, int64_t j, int64_t k) {
    return data[size_t((i * shape[1] + j) * shape[2] + k)];
  }
  const T& at(int64_t i, int64_t j, int64_t k) const {
    return data[size_t((i * shape[1] + j) * shape[2] + k)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(double(v))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

template <typename T>
Tensor<T> make_matrix(int64_t r, int64_t c, std::initializer_list<T> vals) {
  return Tensor<T>({r, c}, std::vector<T>(vals));
}

template <typename T>
double l2_norm(const Tensor<T>& t) {
  double s = 0;
  for (T v : t.data) s += double(v) * double(v);
  return std::sqrt(s);
}

}  // namespace wsasr
