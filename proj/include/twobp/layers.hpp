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
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "twobp/tensor.hpp"

namespace twobp {

using MicroBatchId = int;

enum class LayerKind { Linear, ReLU, RMSNorm, Attention, SoftmaxCrossEntropy };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

/// Static description of one layer. Widths refer to the innermost (feature)
/// dimension; leading dimensions pass through untouched.
struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  bool bias = true;    // Linear
  double eps = 1e-5;   // RMSNorm

  static LayerSpec linear(std::size_t in, std::size_t out, bool bias = true);
  static LayerSpec relu(std::size_t width);
  static LayerSpec rms_norm(std::size_t width, double eps = 1e-5);
  static LayerSpec attention(std::size_t width);
  static LayerSpec softmax_cross_entropy(std::size_t classes);

  bool has_params() const { return kind == LayerKind::Linear || kind == LayerKind::RMSNorm; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // accumulation buffer, same shape as value
};

/// Learnable tensors of one layer plus their gradient buffers. Empty for
/// parameter-free kinds.
template <typename Scalar>
struct ParamSet {
  std::vector<Parameter<Scalar>> tensors;
  /// Micro-batches accumulated into the buffers since the last zero_grad().
  std::size_t contributions = 0;

  bool empty() const { return tensors.empty(); }
  Parameter<Scalar>& get(std::string_view name);
  const Parameter<Scalar>& get(std::string_view name) const;
  void zero_grad();
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases for Linear,
/// unit gain for RMSNorm.
template <typename Scalar>
ParamSet<Scalar> init_params(const LayerSpec& spec, std::uint64_t seed);

/// Values retained by a forward pass for the matching backward-p1.
template <typename Scalar>
struct ForwardCache {
  struct Linear { Tensor<Scalar> x; };
  struct Relu { Tensor<Scalar> mask; };
  struct Norm { Tensor<Scalar> x_hat; Tensor<Scalar> inv_rms; };  // x_hat is [rows x d]
  struct Attn { Tensor<Scalar> x; Tensor<Scalar> weights; };       // weights is [b x s x s]

  MicroBatchId mb = 0;
  std::variant<std::monostate, Linear, Relu, Norm, Attn> state;

  bool released() const { return std::holds_alternative<std::monostate>(state); }
};

/// What a deferred backward-p2 needs: the layer input (normalized input for
/// RMSNorm) and the output gradient, both flattened to [rows x features].
template <typename Scalar>
struct P2Saved {
  LayerKind kind = LayerKind::Linear;
  std::vector<MicroBatchId> mbs;
  Tensor<Scalar> input;
  Tensor<Scalar> output_grad;
  bool consumed = false;
};

template <typename Scalar>
struct LayerForward {
  Tensor<Scalar> y;
  ForwardCache<Scalar> cache;
};

template <typename Scalar>
struct LayerBackwardP1 {
  Tensor<Scalar> dx;
  std::optional<P2Saved<Scalar>> saved;
};

/// Thrown on protocol misuse: consuming a cache twice, mismatched micro-batch,
/// running p2 on a parameter-free layer.
class LayerStateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename Scalar>
LayerForward<Scalar> layer_forward(const LayerSpec& spec, const ParamSet<Scalar>* params, const Tensor<Scalar>& x,
                                   MicroBatchId mb = 0);

/// Input gradient. Releases the cache; parameterized layers hand back what
/// their backward-p2 needs.
template <typename Scalar>
LayerBackwardP1<Scalar> layer_backward_p1(const LayerSpec& spec, const ParamSet<Scalar>* params,
                                          const Tensor<Scalar>& dy, ForwardCache<Scalar>& cache,
                                          MicroBatchId mb = 0);

/// Parameter gradient. Adds the contribution of every micro-batch covered by
/// `saved` to the buffers in `params` and marks `saved` consumed.
template <typename Scalar>
void layer_backward_p2(const LayerSpec& spec, ParamSet<Scalar>& params, P2Saved<Scalar>& saved);

/// Merges several P2Saved along the batch dimension (in list order), consuming
/// the parts.
template <typename Scalar>
P2Saved<Scalar> concat_saved(std::span<P2Saved<Scalar>> parts);

/// backward-p1 immediately followed by backward-p2: the conventional combined
/// backward pass.
template <typename Scalar>
Tensor<Scalar> layer_backward_full(const LayerSpec& spec, ParamSet<Scalar>* params, const Tensor<Scalar>& dy,
                                   ForwardCache<Scalar>& cache, MicroBatchId mb = 0);

template <typename Scalar>
struct LossResult {
  double loss = 0;
  Tensor<Scalar> dlogits;
};

/// Softmax cross-entropy over the rows of `logits` (leading dims flattened).
/// Loss and gradient are divided by `normalizer`, which defaults to the row
/// count (mean over the batch).
template <typename Scalar>
LossResult<Scalar> loss_forward_backward(const Tensor<Scalar>& logits, std::span<const std::size_t> targets,
                                         double normalizer = 0);

/// Central differences (f(v+eps) - f(v-eps)) / 2eps for every entry of
/// `values`, which `objective` must read through.
template <typename Scalar>
std::vector<double> finite_diff_grad(const std::function<double()>& objective, std::span<Scalar> values,
                                     double eps = 1e-5);

namespace testing {

enum class Fault { None, RmsNormP2WrongSign };

/// Deliberately corrupts a kernel so verification tooling can be checked.
void set_fault(Fault fault);
Fault current_fault();

}  // namespace testing

}  // namespace twobp
