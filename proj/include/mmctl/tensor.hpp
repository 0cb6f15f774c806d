#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mmctl/error.hpp"

namespace mmctl {

using Index = Eigen::Index;

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major n-d array. Storage is a 2-d Eigen matrix whose column count
// is the last extent, so every tensor is also a [rows x last] matrix view.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)) {
    check_shape();
    data_ = Matrix<S>::Constant(rows_of(shape_), cols_of(shape_), fill);
  }

  Tensor(Shape shape, Matrix<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
    data_.resize(rows_of(shape_), cols_of(shape_));
  }

  static Tensor from_matrix(Matrix<S> m) {
    Shape shape{m.rows(), m.cols()};
    return Tensor(std::move(shape), std::move(m));
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index size() const noexcept { return data_.size(); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  Matrix<S>& matrix() noexcept { return data_; }
  const Matrix<S>& matrix() const noexcept { return data_; }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }

  S& operator[](Index i) { return data_.data()[i]; }
  const S& operator[](Index i) const { return data_.data()[i]; }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, Matrix<T>(data_.template cast<T>()));
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static Index rows_of(const Shape& s) {
    return s.empty() ? 1 : numel(Shape(s.begin(), s.end() - 1));
  }
  static Index cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

  void check_shape() const {
    for (Index e : shape_) {
      if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  Matrix<S> data_;
};

}  // namespace mmctl
