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
#include <span>
#include <vector>

#include "twobp/layers.hpp"

namespace twobp {

/// Blocks in order plus cumulative stage end indices; {10, 24, 38, 50} puts
/// blocks [0,10) on stage 0, [10,24) on stage 1 and so on. Empty boundaries
/// mean a single stage.
struct ModelConfig {
  std::vector<LayerSpec> blocks;
  std::vector<std::size_t> stage_boundaries;
};

struct StagePlan {
  std::size_t first_block = 0;
  std::vector<LayerSpec> layers;
};

/// Partitions the block list into contiguous stages and checks that adjacent
/// widths agree. A trailing SoftmaxCrossEntropy block is treated as the loss
/// head and dropped from the layer list.
std::vector<StagePlan> build_model(const ModelConfig& config);

/// Boundaries that spread `blocks` as evenly as possible, earlier stages
/// taking the remainder.
std::vector<std::size_t> uniform_boundaries(std::size_t blocks, std::size_t stages);

/// Layers with their parameters. Used both for one pipeline stage and for the
/// whole model on the reference path.
template <typename Scalar>
struct Model {
  std::vector<LayerSpec> layers;
  std::vector<ParamSet<Scalar>> params;  // one per layer, empty when parameter-free

  void zero_grad();
  std::size_t parameter_count() const;
};

/// Parameters are seeded per global block index, so the same block gets the
/// same weights however the model is partitioned.
template <typename Scalar>
Model<Scalar> instantiate(std::span<const LayerSpec> layers, std::uint64_t seed, std::size_t first_block = 0);

template <typename Scalar>
std::vector<Model<Scalar>> instantiate_stages(std::span<const StagePlan> plan, std::uint64_t seed);

/// Concatenates stage models back into one sequential model.
template <typename Scalar>
Model<Scalar> merge_stages(std::span<const Model<Scalar>> stages);

/// Repeating [Linear, ReLU, RMSNorm, Attention] pattern whose last block is a
/// Linear projection to `classes`. Needs blocks >= 1.
std::vector<LayerSpec> toy_transformer_blocks(std::size_t blocks, std::size_t width, std::size_t classes);

/// Linear/ReLU stack ending in a projection to `classes`.
std::vector<LayerSpec> toy_mlp_blocks(std::size_t blocks, std::size_t width, std::size_t classes);

/// Mini-batch: inputs are [batch x seq x features] (or [batch x features]);
/// one target per row of the final logits, in row-major order.
template <typename Scalar>
struct Batch {
  Tensor<Scalar> inputs;
  std::vector<std::size_t> targets;
};

/// Seeded uniform(-1, 1) inputs. When `teacher` is set, targets are the
/// argmax of a fixed random linear map of each input row (a learnable task);
/// otherwise they are uniform random classes.
template <typename Scalar>
Batch<Scalar> synthetic_batch(std::size_t batch, std::size_t seq, std::size_t features, std::size_t classes,
                              std::uint64_t seed, bool teacher = false);

/// Per-layer gradient tensors in model order; empty entries for
/// parameter-free layers.
template <typename Scalar>
using GradSnapshot = std::vector<std::vector<Tensor<Scalar>>>;

template <typename Scalar>
GradSnapshot<Scalar> snapshot_grads(const Model<Scalar>& model);

/// Largest max_relative_error over matching tensors; throws on layout mismatch.
template <typename Scalar>
double max_relative_error(const GradSnapshot<Scalar>& a, const GradSnapshot<Scalar>& b);

/// Bitwise equality of every gradient tensor.
template <typename Scalar>
bool bit_identical(const GradSnapshot<Scalar>& a, const GradSnapshot<Scalar>& b);

}  // namespace twobp
