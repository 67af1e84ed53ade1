#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vfa/errors.hpp"

namespace vfa {

using Shape = std::vector<std::size_t>;

// Element precision used by tests and gradient checks.
using HighPrecision = double;
// Element precision used for training and inference.
using DefaultPrecision = float;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major tensor. A value type; copies are deep.
//
// Most kernels view a tensor as a matrix of rows() x cols(), where cols() is
// the last dimension and rows() the product of all leading dimensions.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept {
    const std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T* row(std::size_t r) noexcept { return data_.data() + r * cols(); }
  const T* row(std::size_t r) const noexcept { return data_.data() + r * cols(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  // Same data, new shape with the same element count.
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Additive-mask sentinel: the most negative finite value of the precision.
template <typename T>
constexpr T mask_sentinel() {
  return std::numeric_limits<T>::lowest();
}

template <typename T>
bool is_masked(T v) {
  return v <= std::numeric_limits<T>::lowest() / 2;
}

// Plain (non-differentiable) kernels. The autograd ops in autograd.hpp share
// these for their forward passes.
namespace kernels {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Tensor<T>* mask);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T epsilon = T(1e-5));

template <typename T>
Tensor<T> conv1d_depthwise(const Tensor<T>& x, const Tensor<T>& kernels);

template <typename T>
Tensor<T> conv1d_pointwise(const Tensor<T>& x, const Tensor<T>& w);

}  // namespace kernels

// VFT1 tensor files: magic "VFT1", u32 rank, u32 dims, float32 payload, all
// little-endian. Higher precisions are narrowed to float32 on write.
template <typename T>
void write_vft(std::ostream& out, const Tensor<T>& t);
template <typename T>
void write_vft_file(const std::string& path, const Tensor<T>& t);
Tensor<float> read_vft(std::istream& in);
Tensor<float> read_vft_file(const std::string& path);

}  // namespace vfa
