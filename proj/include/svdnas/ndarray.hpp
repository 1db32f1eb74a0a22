#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "svdnas/errors.hpp"

namespace svdnas {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename T>
using VectorX = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
using RowMatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// Dense row-major array of rank 0-4. Plain value type; no gradient state.
template <typename T>
class NdArray {
 public:
  using Scalar = T;

  NdArray() : shape_{0}, data_() {}
  explicit NdArray(Shape shape) : shape_(std::move(shape)), data_(VectorX<T>::Zero(shape_numel(shape_))) {}
  NdArray(Shape shape, VectorX<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("NdArray: data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }
  NdArray(Shape shape, const std::vector<T>& values)
      : NdArray(std::move(shape), VectorX<T>(Eigen::Map<const VectorX<T>>(values.data(), values.size()))) {}

  static NdArray constant(Shape shape, T value) {
    NdArray a(std::move(shape));
    a.data_.setConstant(value);
    return a;
  }
  static NdArray scalar(T value) { return constant(Shape{1}, value); }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  Index numel() const { return data_.size(); }

  VectorX<T>& data() { return data_; }
  const VectorX<T>& data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](Index i) { return data_[i]; }
  T operator[](Index i) const { return data_[i]; }

  T& at(Index a, Index b, Index c, Index d) { return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d]; }
  T at(Index a, Index b, Index c, Index d) const {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  T& at(Index r, Index c) { return data_[r * shape_[1] + c]; }
  T at(Index r, Index c) const { return data_[r * shape_[1] + c]; }

  NdArray reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw DimensionError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    return NdArray(std::move(shape), data_);
  }

  template <typename U>
  NdArray<U> cast() const {
    return NdArray<U>(shape_, data_.template cast<U>().eval());
  }

  Eigen::Map<const RowMatrixX<T>> matrix() const {
    if (rank() != 2) throw DimensionError("matrix(): rank-2 array required, got " + shape_str(shape_));
    return {ptr(), shape_[0], shape_[1]};
  }
  Eigen::Map<RowMatrixX<T>> matrix() {
    if (rank() != 2) throw DimensionError("matrix(): rank-2 array required, got " + shape_str(shape_));
    return {ptr(), shape_[0], shape_[1]};
  }

  bool operator==(const NdArray& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  Shape shape_;
  VectorX<T> data_;
};

template <typename T>
NdArray<T> from_matrix(const Eigen::Ref<const MatrixX<T>>& m) {
  NdArray<T> out(Shape{m.rows(), m.cols()});
  out.matrix() = m;
  return out;
}

}  // namespace svdnas
