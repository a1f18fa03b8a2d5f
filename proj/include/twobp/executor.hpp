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
#include <stdexcept>
#include <string>
#include <vector>

#include "twobp/model.hpp"
#include "twobp/schedule.hpp"
#include "twobp/trace.hpp"

namespace twobp {

enum class OptimizerKind { SGD, Adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::SGD;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Optimizer state for one model (or stage). Adam moments are created on the
/// first step, one per parameter tensor in model order.
template <typename Scalar>
struct OptimizerState {
  OptimizerConfig config;
  std::int64_t step = 0;
  std::vector<Tensor<Scalar>> m;
  std::vector<Tensor<Scalar>> v;
};

/// Applies one update from the accumulated gradient buffers. SGD:
/// w -= lr * g. Adam: bias-corrected first/second moments,
/// w -= lr * m_hat / (sqrt(v_hat) + eps).
template <typename Scalar>
void optimizer_step(OptimizerState<Scalar>& state, Model<Scalar>& model);

/// All workers ended up blocked on each other.
class DeadlockError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineOptions {
  /// Messages a channel holds before SendAct/SendGrad blocks. 0 means M.
  std::size_t channel_capacity = 0;
  /// Reject streams that fail validate_schedule before starting any worker.
  bool validate = true;
};

template <typename Scalar>
struct StepResult {
  /// Accumulated gradients at the flush, before the optimizer consumed them.
  GradSnapshot<Scalar> grads;
  /// Sum of micro-batch losses, each normalized by the mini-batch row count.
  double loss = 0;
  Trace trace;
  double wall_seconds = 0;
};

/// Runs one synchronous training step: P worker threads each execute their
/// rank's stream against their stage, exchanging activations and gradients
/// over FIFO channels with their neighbours. `stages[r]` and `optimizers[r]`
/// belong to rank r and are updated in place by the OptimizerStep.
template <typename Scalar>
StepResult<Scalar> run_pipeline(std::vector<Model<Scalar>>& stages, std::vector<OptimizerState<Scalar>>& optimizers,
                                 std::span<const InstructionStream> streams, const Batch<Scalar>& batch,
                                 const PipelineOptions& options = {});

template <typename Scalar>
struct ReferenceResult {
  GradSnapshot<Scalar> grads;
  double loss = 0;
};

/// Single-process ground truth: forward and combined backward per
/// micro-batch, in micro-batch order, accumulating into fresh buffers.
template <typename Scalar>
ReferenceResult<Scalar> run_reference(const Model<Scalar>& model, const Batch<Scalar>& batch,
                                      std::size_t micro_batches);

/// Loss of the whole model on the batch with the same normalization as the
/// pipeline.
template <typename Scalar>
double evaluate_loss(const Model<Scalar>& model, const Batch<Scalar>& batch);

/// Central-difference gradient of evaluate_loss for every parameter scalar.
template <typename Scalar>
GradSnapshot<Scalar> finite_diff_model_grads(Model<Scalar>& model, const Batch<Scalar>& batch, double eps = 1e-5);

}  // namespace twobp
