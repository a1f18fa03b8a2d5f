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

#include <span>
#include <vector>

#include "twobp/rational.hpp"
#include "twobp/schedule.hpp"
#include "twobp/trace.hpp"

namespace twobp {

struct RankCosts {
  Rational forward{1};
  Rational backward_p1{1};
  Rational backward_p2{1};
};

/// Durations used by the simulator. BackwardFull costs backward_p1 +
/// backward_p2; BackwardP2 over k micro-batches costs k * backward_p2;
/// bookkeeping instructions are free. Every receive completes no earlier than
/// the matching send plus `comm`.
struct CostModel {
  RankCosts defaults;
  std::vector<RankCosts> per_rank;  // overrides `defaults` where present
  Rational comm{0};

  const RankCosts& rank(int r) const;
  Rational cost(int rank, const Instruction& ins) const;
  void validate() const;
};

struct SimEvent {
  int rank = 0;
  OpKind op = OpKind::Forward;
  std::vector<MicroBatchId> mbs;
  Rational start;
  Rational end;
};

using Timeline = std::vector<SimEvent>;

/// Discrete-event replay of validated streams: each rank runs its stream in
/// order, and a receive waits for its matching send plus the communication
/// cost. One event per instruction.
Timeline simulate_timeline(std::span<const InstructionStream> streams, const CostModel& costs);

Trace to_trace(const Timeline& timeline);

struct BubbleReport {
  int ranks = 0;
  Rational makespan;
  std::vector<Rational> busy;
  std::vector<Rational> idle;
  /// 1 - sum(busy) / (ranks * makespan)
  Rational bubble_ratio;
};

BubbleReport bubble_report(const Timeline& timeline);
Rational bubble_ratio_from_timeline(const Timeline& timeline);
/// Measured counterpart for wall-clock traces: every event except sends and
/// receives counts as busy, so time spent blocked on a channel is idle.
double bubble_ratio_from_trace(std::span<const TraceEvent> trace);

/// Closed-form bubble ratio under equal forward/backward-p1/backward-p2
/// costs, with N ranks and N (2N for 1F1B-2) micro-batches.
Rational bubble_ratio_analytic(ScheduleKind kind, int n, bool two_bp);

/// (1 - with) / (1 - without)
Rational throughput_gain(Rational ratio_without, Rational ratio_with);

/// Unit-based memory replay. One unit is one micro-batch's worth of a stage's
/// activations (or intermediate derivatives). `release_fraction` is the share
/// of activation units freed at BackwardP1; the rest waits for BackwardP2.
struct MemoryModel {
  Rational default_release{0};
  std::vector<Rational> release_fraction;  // per rank, overrides the default

  Rational release(int rank) const;
};

struct MemoryPeaks {
  std::vector<Rational> activation;
  std::vector<Rational> interm_deriv;
  std::vector<Rational> combined;
};

/// Throws std::logic_error if a counter would go negative.
MemoryPeaks peak_memory(std::span<const InstructionStream> streams, const MemoryModel& model = {});

}  // namespace twobp
