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

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "twobp/layers.hpp"

namespace twobp {

enum class OpKind {
  LoadInput,
  Forward,
  SendAct,
  RecvAct,
  ComputeLoss,
  SendGrad,
  RecvGrad,
  BackwardP1,
  BackwardP2,
  BackwardFull,
  OptimizerStep,
};

std::string_view to_string(OpKind kind);
OpKind parse_op_kind(std::string_view name);
/// Forward, BackwardP1, BackwardP2 and BackwardFull occupy the device; the
/// rest is bookkeeping or communication.
bool is_compute(OpKind kind);

enum class B2Mode { Concat, Loop };

std::string_view to_string(B2Mode mode);
B2Mode parse_b2_mode(std::string_view name);

struct Instruction {
  OpKind kind = OpKind::OptimizerStep;
  std::vector<MicroBatchId> mbs;  // one id, an ordered set for BackwardP2, empty for OptimizerStep
  B2Mode mode = B2Mode::Concat;   // BackwardP2 only

  static Instruction op(OpKind kind, MicroBatchId mb) { return {kind, {mb}, B2Mode::Concat}; }
  static Instruction backward_p2(std::vector<MicroBatchId> mbs, B2Mode mode) {
    return {OpKind::BackwardP2, std::move(mbs), mode};
  }
  static Instruction optimizer_step() { return {OpKind::OptimizerStep, {}, B2Mode::Concat}; }

  MicroBatchId mb() const { return mbs.at(0); }

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct InstructionStream {
  int rank = 0;
  std::vector<Instruction> ops;

  friend bool operator==(const InstructionStream&, const InstructionStream&) = default;
};

using Schedule = std::vector<InstructionStream>;

enum class ScheduleKind { Naive, GPipe, OneFOneB1, OneFOneB2, OneFOneB2MemEff };

std::string_view to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);

class ScheduleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::GPipe;
  int ranks = 1;
  /// 0 picks the kind's natural count: 1 for Naive, P for GPipe/1F1B-1, 2P
  /// for the 1F1B-2 variants.
  int micro_batches = 0;
  bool two_bp = false;
  B2Mode b2_mode = B2Mode::Concat;

  int resolved_micro_batches() const;
  /// Throws ScheduleError for an invalid (kind, P, M, two_bp) combination.
  void validate() const;
};

/// Static per-rank instruction streams for the configured pipeline schedule.
///
/// 2BP GPipe and Naive defer every backward-p2 into one trailing
/// BackwardP2 over all micro-batches. 2BP 1F1B fills each slot in which a
/// rank would otherwise wait on a receive with BackwardP2({m}) for its oldest
/// pending micro-batch, judged under equal unit costs for forward,
/// backward-p1 and backward-p2; whatever is left runs as one trailing
/// BackwardP2. Forward and backward-p1 always take priority.
Schedule generate_schedule(const ScheduleConfig& config);

/// 1F1B-2 with 2BP where each rank additionally drains all pending
/// backward-p2 for micro-batches [0, P) right after its BackwardP1(P-1).
Schedule generate_memeff_1f1b2(const ScheduleConfig& config);

struct Violation {
  std::string rule;
  int rank = 0;
  std::size_t index = 0;
  std::string detail;

  std::string describe() const;
};

/// Symbolic execution of the streams under blocking receives and FIFO
/// channels between neighbouring ranks. Returns the first broken rule, or
/// nothing when the schedule is sound. `micro_batches` defaults to the number
/// of forwards rank 0 performs.
std::optional<Violation> validate_schedule(std::span<const InstructionStream> streams,
                                           std::optional<int> micro_batches = std::nullopt);

/// One stream per line: `rank 1: RA0 F0 LS0 B1:0 SG0 ... B2:{0,1}c OPT`.
std::string format_stream(const InstructionStream& stream);
std::string format_schedule(std::span<const InstructionStream> streams);
Schedule parse_schedule(std::string_view text);

}  // namespace twobp
