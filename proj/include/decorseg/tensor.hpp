#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <utility>
#include <vector>

#include "decorseg/common.hpp"

namespace decorseg {

/// Dense row-major tensor of doubles with a dynamic shape (rank 1..4 in practice).
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(element_count(shape_), 0.0);
  }

  Tensor(std::initializer_list<std::size_t> shape)
      : Tensor(std::vector<std::size_t>(shape)) {}

  static Tensor from(std::vector<std::size_t> shape, std::vector<real> values) {
    Tensor t;
    assert(element_count(shape) == values.size());
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  real& operator()(std::size_t i) { return data_[i]; }
  real operator()(std::size_t i) const { return data_[i]; }

  real& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  real operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  real& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  real operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  real& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  real operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(real v) {
    for (auto& x : data_) x = v;
  }

  void zero() { fill(0.0); }

  Tensor& operator+=(const Tensor& other) {
    assert(same_shape(other));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(real s) {
    for (auto& x : data_) x *= s;
    return *this;
  }

  /// this += s * other
  void axpy(real s, const Tensor& other) {
    assert(same_shape(other));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
  }

private:
  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = shape.empty() ? 0 : 1;
    for (auto d : shape) n *= d;
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<real> data_;
};

inline bool all_finite(const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) return false;
  }
  return true;
}

/// True when every element is exactly 0.0 or 1.0.
inline bool is_binary(const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] != 0.0 && t[i] != 1.0) return false;
  }
  return true;
}

}  // namespace decorseg
