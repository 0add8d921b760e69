#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "mccl/common.hpp"

namespace mccl {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    check(e > 0, "tensor extents must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

/// Dense n-dimensional array in row-major order. Values are immutable by
/// convention once handed to another component; mutation happens only on
/// freshly constructed tensors owned by the producer.
template <typename T>
class Tensor {
 public:
  using ArrayType = Eigen::Array<T, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = ArrayType::Zero(numel(shape_));
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    check(static_cast<std::int64_t>(values.size()) == numel(shape_),
          "tensor: data length does not match shape " + shape_str(shape_));
    data_ = Eigen::Map<const ArrayType>(values.data(), values.size());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T value) { return full(Shape{}, value); }

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t extent(std::int64_t axis) const { return shape_[axis]; }
  std::int64_t size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0 && shape_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  ArrayType& array() { return data_; }
  const ArrayType& array() const { return data_; }

  T& operator[](std::int64_t i) { return data_[i]; }
  const T& operator[](std::int64_t i) const { return data_[i]; }

  /// Scalar read for rank-0 / single-element tensors.
  T item() const {
    check(size() == 1, "item(): tensor has " + std::to_string(size()) + " elements");
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (std::int64_t i = 0; i < data_.size(); ++i)
      if (!std::isfinite(static_cast<double>(data_[i]))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  Tensor reshaped(Shape shape) const {
    check(numel(shape) == size(), "reshape: element count mismatch");
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

 private:
  Shape shape_;
  ArrayType data_;
};

/// Row-major offset helpers for the small fixed ranks used throughout.
inline std::int64_t offset3(const Shape& s, std::int64_t a, std::int64_t b, std::int64_t c) {
  return (a * s[1] + b) * s[2] + c;
}
inline std::int64_t offset4(const Shape& s, std::int64_t a, std::int64_t b, std::int64_t c,
                            std::int64_t d) {
  return ((a * s[1] + b) * s[2] + c) * s[3] + d;
}

}  // namespace mccl
