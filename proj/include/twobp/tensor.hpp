// Copyright 2026 The twobp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace twobp {

/// Raised when operand shapes violate an operation's shape law.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Immutable in spirit: ops return new tensors, and
/// mutable access is only used by layer kernels while building a result.
template <typename Scalar>
class Tensor {
 public:
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  /// Zero-filled tensor of the given shape.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar value);
  /// Rank-2 tensor from nested rows, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows);
  static Tensor vector(std::initializer_list<Scalar> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  /// Leading (batch) dimension.
  std::size_t rows() const { return shape_.front(); }
  /// Elements per leading-dimension slice.
  std::size_t row_size() const { return data_.size() / shape_.front(); }
  /// Size of the innermost dimension.
  std::size_t features() const { return shape_.back(); }

  std::span<const Scalar> data() const { return data_; }
  std::span<Scalar> data() { return data_; }
  Scalar operator[](std::size_t i) const { return data_[i]; }
  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  Scalar& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

  ConstArrayMap array() const { return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// a · bᵀ for a [m×k], b [n×k].
template <typename Scalar>
Tensor<Scalar> matmul_nt(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// aᵀ · b for a [k×m], b [k×n]; the reduction runs over rows in order.
template <typename Scalar>
Tensor<Scalar> matmul_tn(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> transpose2d(const Tensor<Scalar>& a);

/// Stacks parts along the leading dimension, preserving list order.
template <typename Scalar>
Tensor<Scalar> concat_batch(std::span<const Tensor<Scalar>> parts);
/// Inverse of concat_batch: cuts `t` into consecutive leading-dim slices.
template <typename Scalar>
std::vector<Tensor<Scalar>> split_batch(const Tensor<Scalar>& t, std::span<const std::size_t> rows_per_part);
/// Equal split into `parts` slices; leading dim must be divisible.
template <typename Scalar>
std::vector<Tensor<Scalar>> split_batch(const Tensor<Scalar>& t, std::size_t parts);

enum class ElementwiseOp { Add, Sub, Mul, Scale, Relu, ReluMask };

template <typename Scalar>
Tensor<Scalar> elementwise(ElementwiseOp op, const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> elementwise(ElementwiseOp op, const Tensor<Scalar>& a, Scalar s = Scalar(0));

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(ElementwiseOp::Add, a, b);
}
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(ElementwiseOp::Sub, a, b);
}
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return elementwise(ElementwiseOp::Mul, a, b);
}
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  return elementwise(ElementwiseOp::Scale, a, s);
}
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return elementwise(ElementwiseOp::Relu, a);
}
template <typename Scalar>
Tensor<Scalar> relu_mask(const Tensor<Scalar>& a) {
  return elementwise(ElementwiseOp::ReluMask, a);
}

/// In-place `acc += x`; shapes must match.
template <typename Scalar>
void accumulate(Tensor<Scalar>& acc, const Tensor<Scalar>& x);

/// max|a-b| / max(max|b|, floor). Zero when both are zero.
template <typename Scalar>
double max_relative_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b, double floor = 1e-300);

}  // namespace twobp
