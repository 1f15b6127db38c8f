#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <vector>

#include "hsalab/check.hpp"

namespace hsalab {

// Dense row-major array. The whole stack is templated on the element type:
// float for training and benchmarking, double for gradient checks.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), T(0));
  }

  Tensor(std::initializer_list<std::size_t> shape)
      : Tensor(std::vector<std::size_t>(shape)) {}

  static Tensor zeros(std::initializer_list<std::size_t> shape) { return Tensor(shape); }

  static Tensor full(std::initializer_list<std::size_t> shape, T v) {
    Tensor t(shape);
    t.fill(v);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  std::span<T> flat() { return std::span<T>(data_.data(), data_.size()); }
  std::span<const T> flat() const { return std::span<const T>(data_.data(), data_.size()); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(T(0)); }

  void resize(std::vector<std::size_t> shape) {
    shape_ = std::move(shape);
    data_.assign(numel_of(shape_), T(0));
  }

  // Reinterprets the extents without touching the (row-major) data.
  void reshape(std::vector<std::size_t> shape) {
    HSALAB_CHECK_DIM(numel_of(shape) == data_.size(), "reshape: element count mismatch");
    shape_ = std::move(shape);
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i) { return data_[i]; }
  const T& at(std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t m) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + m];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k, std::size_t m) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + m];
  }

  // Row i of a rank-2 tensor (or the i-th slab of the leading dimension).
  std::span<T> row(std::size_t i) {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<T>(data_.data() + i * stride, stride);
  }
  std::span<const T> row(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<const T>(data_.data() + i * stride, stride);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t(1),
                           [](std::size_t a, std::size_t b) { return a * b; });
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> xs) {
  for (const T& x : xs) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* what) {
  if (!all_finite(t.flat())) {
    throw ContractError(std::string("non-finite values in ") + what);
  }
}

}  // namespace hsalab
