#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "earshot/errors.hpp"

namespace earshot {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
/// Per-position validity flags; nonzero means the position takes part.
using Mask = std::vector<std::uint8_t>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Dense row-major tensor of arbitrary rank. Rank 0 holds a single scalar.
template <typename Scalar>
class BasicTensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector::Zero(shape_size(shape_));
  }

  BasicTensor(Shape shape, Vector data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  static BasicTensor constant(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static BasicTensor scalar(Scalar value) { return constant({}, value); }

  static BasicTensor from(Shape shape, std::initializer_list<Scalar> values) {
    Vector data(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) data[i++] = v;
    return BasicTensor(std::move(shape), std::move(data));
  }

  /// Copies a row-major matrix into a rank-2 tensor.
  template <typename Derived>
  static BasicTensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    BasicTensor t({m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.size() == 0 && shape_.empty(); }

  /// Extent of axis `axis`; negative values count from the back.
  Index extent(Index axis) const {
    const Index r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
      throw DimensionError("axis " + std::to_string(axis) +
                           " out of range for shape " + shape_string(shape_));
    }
    return shape_[static_cast<std::size_t>(axis)];
  }

  Vector& data() noexcept { return data_; }
  const Vector& data() const noexcept { return data_; }
  Scalar* raw() noexcept { return data_.data(); }
  const Scalar* raw() const noexcept { return data_.data(); }

  /// View as a matrix whose columns are the last axis.
  MatrixMap matrix() {
    const auto [rows, cols] = matrix_extents();
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix() const {
    const auto [rows, cols] = matrix_extents();
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& operator()(Index i, Index j) { return data_[i * shape_.back() + j]; }
  Scalar operator()(Index i, Index j) const {
    return data_[i * shape_.back() + j];
  }

  Scalar item() const {
    if (size() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  bool all_finite() const { return data_.allFinite(); }

  void reshape(Shape shape) {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                           shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  void set_zero() { data_.setZero(); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (Index e : shape_) {
      if (e <= 0) {
        throw DimensionError("non-positive extent in shape " +
                             shape_string(shape_));
      }
    }
  }

  std::pair<Index, Index> matrix_extents() const {
    if (shape_.empty()) return {1, 1};
    const Index cols = shape_.back();
    return {data_.size() / cols, cols};
  }

  Shape shape_;
  Vector data_;
};

using Tensor = BasicTensor<double>;

}  // namespace earshot
