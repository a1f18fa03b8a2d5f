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

#include "twobp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace twobp {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

std::size_t element_count(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be >= 1, got " + shape_string(shape));
  }
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename Scalar>
void require_rank2(const Tensor<Scalar>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_string(t.shape()));
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape) : shape_(std::move(shape)), data_(element_count(shape_), Scalar(0)) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<Scalar> data;
  data.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw ShapeError("Tensor::matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({m, n}, std::move(data));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::vector(std::initializer_list<Scalar> values) {
  return Tensor({values.size()}, std::vector<Scalar>(values));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <typename Scalar>
bool Tensor<Scalar>::all_finite() const {
  return array().isFinite().all();
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  // Transposing b keeps both operands contiguous along k without changing the
  // summation order.
  return matmul_nt(a, transpose2d(b));
}

template <typename Scalar>
Tensor<Scalar> matmul_nt(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions differ for " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  }
  Tensor<Scalar> c({m, n});
  const Scalar* pa = a.data().data();
  const Scalar* pb = b.data().data();
  Scalar* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Scalar acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
      pc[i * n + j] = acc;
    }
  }
  return c;
}

template <typename Scalar>
Tensor<Scalar> matmul_tn(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_tn: row counts differ for " + shape_string(a.shape()) + "^T x " +
                     shape_string(b.shape()));
  }
  return matmul_nt(transpose2d(a), transpose2d(b));
}

template <typename Scalar>
Tensor<Scalar> transpose2d(const Tensor<Scalar>& a) {
  require_rank2(a, "transpose2d");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<Scalar> t({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
  }
  return t;
}

template <typename Scalar>
Tensor<Scalar> concat_batch(std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_batch: empty list");
  const Shape& first = parts.front().shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat_batch: trailing shape mismatch " + shape_string(first) + " vs " +
                       shape_string(p.shape()));
    }
    rows += p.rows();
  }
  Shape shape = first;
  shape[0] = rows;
  std::vector<Scalar> data;
  data.reserve(rows * parts.front().row_size());
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

template <typename Scalar>
std::vector<Tensor<Scalar>> split_batch(const Tensor<Scalar>& t, std::span<const std::size_t> rows_per_part) {
  const std::size_t total = std::accumulate(rows_per_part.begin(), rows_per_part.end(), std::size_t{0});
  if (total != t.rows()) {
    throw ShapeError("split_batch: row counts sum to " + std::to_string(total) + " but tensor is " +
                     shape_string(t.shape()));
  }
  std::vector<Tensor<Scalar>> out;
  out.reserve(rows_per_part.size());
  const std::size_t stride = t.row_size();
  auto it = t.data().begin();
  for (std::size_t rows : rows_per_part) {
    Shape shape = t.shape();
    shape[0] = rows;
    out.emplace_back(std::move(shape), std::vector<Scalar>(it, it + static_cast<std::ptrdiff_t>(rows * stride)));
    it += static_cast<std::ptrdiff_t>(rows * stride);
  }
  return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> split_batch(const Tensor<Scalar>& t, std::size_t parts) {
  if (parts == 0 || t.rows() % parts != 0) {
    throw ShapeError("split_batch: " + std::to_string(t.rows()) + " rows not divisible into " +
                     std::to_string(parts) + " equal parts");
  }
  std::vector<std::size_t> rows(parts, t.rows() / parts);
  return split_batch(t, std::span<const std::size_t>(rows));
}

template <typename Scalar>
Tensor<Scalar> elementwise(ElementwiseOp op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "elementwise");
  Tensor<Scalar> out(a.shape());
  switch (op) {
    case ElementwiseOp::Add: out.array() = a.array() + b.array(); break;
    case ElementwiseOp::Sub: out.array() = a.array() - b.array(); break;
    case ElementwiseOp::Mul: out.array() = a.array() * b.array(); break;
    default: throw std::invalid_argument("elementwise: op is not binary");
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> elementwise(ElementwiseOp op, const Tensor<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape());
  switch (op) {
    case ElementwiseOp::Add: out.array() = a.array() + s; break;
    case ElementwiseOp::Sub: out.array() = a.array() - s; break;
    case ElementwiseOp::Mul:
    case ElementwiseOp::Scale: out.array() = a.array() * s; break;
    case ElementwiseOp::Relu: out.array() = a.array().max(Scalar(0)); break;
    case ElementwiseOp::ReluMask: out.array() = (a.array() > Scalar(0)).template cast<Scalar>(); break;
  }
  return out;
}

template <typename Scalar>
void accumulate(Tensor<Scalar>& acc, const Tensor<Scalar>& x) {
  require_same_shape(acc, x, "accumulate");
  acc.array() += x.array();
}

template <typename Scalar>
double max_relative_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b, double floor) {
  require_same_shape(a, b, "max_relative_error");
  const double diff = static_cast<double>((a.array() - b.array()).abs().maxCoeff());
  const double ref = static_cast<double>(b.array().abs().maxCoeff());
  if (diff == 0.0) return 0.0;
  return diff / std::max(ref, floor);
}

#define TWOBP_INSTANTIATE_TENSOR(S)                                                                  \
  template class Tensor<S>;                                                                          \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> matmul_nt(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> matmul_tn(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> transpose2d(const Tensor<S>&);                                                  \
  template Tensor<S> concat_batch(std::span<const Tensor<S>>);                                       \
  template std::vector<Tensor<S>> split_batch(const Tensor<S>&, std::span<const std::size_t>);       \
  template std::vector<Tensor<S>> split_batch(const Tensor<S>&, std::size_t);                        \
  template Tensor<S> elementwise(ElementwiseOp, const Tensor<S>&, const Tensor<S>&);                 \
  template Tensor<S> elementwise(ElementwiseOp, const Tensor<S>&, S);                                \
  template void accumulate(Tensor<S>&, const Tensor<S>&);                                            \
  template double max_relative_error(const Tensor<S>&, const Tensor<S>&, double);

TWOBP_INSTANTIATE_TENSOR(float)
TWOBP_INSTANTIATE_TENSOR(double)

#undef TWOBP_INSTANTIATE_TENSOR

}  // namespace twobp
