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

#include "twobp/schedule.hpp"

#include <algorithm>

#include <gtest/gtest.h>

namespace twobp {
namespace {

constexpr ScheduleKind kPlainKinds[] = {ScheduleKind::Naive, ScheduleKind::GPipe, ScheduleKind::OneFOneB1,
                                        ScheduleKind::OneFOneB2};

Schedule make(ScheduleKind kind, int ranks, bool two_bp, int micro_batches = 0, B2Mode mode = B2Mode::Concat) {
  return generate_schedule({kind, ranks, micro_batches, two_bp, mode});
}

std::vector<OpKind> kinds_of(const InstructionStream& s) {
  std::vector<OpKind> out;
  for (const auto& ins : s.ops) out.push_back(ins.kind);
  return out;
}

std::size_t index_of(const InstructionStream& s, const Instruction& target) {
  auto it = std::find(s.ops.begin(), s.ops.end(), target);
  return it == s.ops.end() ? s.ops.size() : static_cast<std::size_t>(it - s.ops.begin());
}

// Forward and communication sub-sequence; 2BP must leave it untouched.
std::vector<Instruction> non_backward(const InstructionStream& s) {
  std::vector<Instruction> out;
  for (const auto& ins : s.ops) {
    if (ins.kind != OpKind::BackwardP1 && ins.kind != OpKind::BackwardP2 && ins.kind != OpKind::BackwardFull) {
      out.push_back(ins);
    }
  }
  return out;
}

TEST(ScheduleConfig, MicroBatchRules) {
  EXPECT_EQ((ScheduleConfig{ScheduleKind::Naive, 4}).resolved_micro_batches(), 1);
  EXPECT_EQ((ScheduleConfig{ScheduleKind::GPipe, 4}).resolved_micro_batches(), 4);
  EXPECT_EQ((ScheduleConfig{ScheduleKind::OneFOneB1, 4}).resolved_micro_batches(), 4);
  EXPECT_EQ((ScheduleConfig{ScheduleKind::OneFOneB2, 4}).resolved_micro_batches(), 8);
  EXPECT_THROW((ScheduleConfig{ScheduleKind::OneFOneB1, 4, 3}).validate(), ScheduleError);
  EXPECT_THROW((ScheduleConfig{ScheduleKind::OneFOneB2, 2, 2}).validate(), ScheduleError);
  EXPECT_THROW((ScheduleConfig{ScheduleKind::Naive, 2, 2}).validate(), ScheduleError);
  EXPECT_THROW((ScheduleConfig{ScheduleKind::GPipe, 0}).validate(), ScheduleError);
  EXPECT_THROW((ScheduleConfig{ScheduleKind::OneFOneB2MemEff, 2, 4, false}).validate(), ScheduleError);
  EXPECT_NO_THROW((ScheduleConfig{ScheduleKind::GPipe, 2, 6}).validate());
}

TEST(ScheduleKind, NamesRoundTrip) {
  for (auto kind : {ScheduleKind::Naive, ScheduleKind::GPipe, ScheduleKind::OneFOneB1, ScheduleKind::OneFOneB2,
                    ScheduleKind::OneFOneB2MemEff}) {
    EXPECT_EQ(parse_schedule_kind(to_string(kind)), kind);
  }
  EXPECT_THROW(parse_schedule_kind("interleaved"), std::invalid_argument);
}

TEST(GenerateSchedule, NaiveSingleRank) {
  const auto s = make(ScheduleKind::Naive, 1, false);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(kinds_of(s[0]), (std::vector<OpKind>{OpKind::LoadInput, OpKind::Forward, OpKind::ComputeLoss,
                                                   OpKind::BackwardFull, OpKind::OptimizerStep}));
}

TEST(GenerateSchedule, OneFOneB1TwoRanksPlacesOneSlotB2OnRankZero) {
  const auto s = make(ScheduleKind::OneFOneB1, 2, true);
  EXPECT_EQ(format_schedule(s),
            "rank 0: L0 F0 SA0 L1 F1 SA1 RG0 B1:0 B2:{0}c RG1 B1:1 B2:{1}c OPT\n"
            "rank 1: RA0 F0 LS0 B1:0 SG0 RA1 F1 LS1 B1:1 SG1 B2:{0,1}c OPT\n");
  // Last rank: B1(0) follows F(0) directly and no B2 precedes its last B1.
  const auto& last = s[1];
  EXPECT_EQ(index_of(last, Instruction::op(OpKind::BackwardP1, 0)),
            index_of(last, Instruction::op(OpKind::ComputeLoss, 0)) + 1);
  EXPECT_GT(index_of(last, Instruction::backward_p2({0, 1}, B2Mode::Concat)),
            index_of(last, Instruction::op(OpKind::BackwardP1, 1)));
}

TEST(GenerateSchedule, GPipeTwoBpDefersAllP2ToOneTrailingCall) {
  for (const auto& stream : make(ScheduleKind::GPipe, 4, true)) {
    ASSERT_GE(stream.ops.size(), 3u);
    const auto n = stream.ops.size();
    const auto& tail_p1 = stream.ops[n - 3].kind == OpKind::BackwardP1 ? stream.ops[n - 3] : stream.ops[n - 4];
    EXPECT_EQ(tail_p1, Instruction::op(OpKind::BackwardP1, 3));
    EXPECT_EQ(stream.ops[n - 2], Instruction::backward_p2({0, 1, 2, 3}, B2Mode::Concat));
    EXPECT_EQ(stream.ops[n - 1], Instruction::optimizer_step());
  }
}

TEST(GenerateSchedule, MemoryEfficientDrainsFirstHalfEarly) {
  const auto s = generate_memeff_1f1b2({ScheduleKind::OneFOneB2MemEff, 2, 4, true});
  const auto& last = s[1];
  const auto drain = index_of(last, Instruction::backward_p2({0, 1}, B2Mode::Concat));
  ASSERT_LT(drain, last.ops.size());
  EXPECT_LT(drain, index_of(last, Instruction::op(OpKind::BackwardP1, 2)));
  EXPECT_EQ(last.ops[last.ops.size() - 2], Instruction::backward_p2({2, 3}, B2Mode::Concat));
  EXPECT_THROW(generate_memeff_1f1b2({ScheduleKind::OneFOneB2, 2, 4, true}), ScheduleError);
}

TEST(GenerateSchedule, LoopModeIsCarriedOnEveryP2) {
  for (const auto& stream : make(ScheduleKind::OneFOneB2, 3, true, 0, B2Mode::Loop)) {
    for (const auto& ins : stream.ops) {
      if (ins.kind == OpKind::BackwardP2) EXPECT_EQ(ins.mode, B2Mode::Loop);
    }
  }
}

struct GridPoint {
  ScheduleKind kind;
  int ranks;
  bool two_bp;
};

std::vector<GridPoint> grid() {
  std::vector<GridPoint> out;
  for (auto kind : kPlainKinds) {
    for (int p : {1, 2, 3, 4, 8}) {
      for (bool two_bp : {false, true}) out.push_back({kind, p, two_bp});
    }
  }
  for (int p : {1, 2, 3, 4, 8}) out.push_back({ScheduleKind::OneFOneB2MemEff, p, true});
  return out;
}

TEST(GenerateSchedule, EveryGridPointValidates) {
  for (const auto& g : grid()) {
    const auto s = make(g.kind, g.ranks, g.two_bp);
    const auto v = validate_schedule(s);
    EXPECT_FALSE(v.has_value()) << to_string(g.kind) << " P=" << g.ranks << " 2bp=" << g.two_bp << ": "
                                << (v ? v->describe() : "");
  }
}

TEST(GenerateSchedule, WorkIsConservedPerRank) {
  for (const auto& g : grid()) {
    const auto s = make(g.kind, g.ranks, g.two_bp);
    const int m = ScheduleConfig{g.kind, g.ranks, 0, g.two_bp}.resolved_micro_batches();
    for (const auto& stream : s) {
      std::vector<int> forwards(static_cast<std::size_t>(m)), p1(static_cast<std::size_t>(m)),
          p2(static_cast<std::size_t>(m));
      int optimizer_steps = 0;
      for (const auto& ins : stream.ops) {
        switch (ins.kind) {
          case OpKind::Forward: ++forwards[static_cast<std::size_t>(ins.mb())]; break;
          case OpKind::BackwardP1:
          case OpKind::BackwardFull: ++p1[static_cast<std::size_t>(ins.mb())]; break;
          case OpKind::BackwardP2:
            for (auto mb : ins.mbs) ++p2[static_cast<std::size_t>(mb)];
            break;
          case OpKind::OptimizerStep: ++optimizer_steps; break;
          default: break;
        }
      }
      EXPECT_EQ(optimizer_steps, 1);
      EXPECT_EQ(stream.ops.back(), Instruction::optimizer_step());
      for (int mb = 0; mb < m; ++mb) {
        EXPECT_EQ(forwards[static_cast<std::size_t>(mb)], 1);
        EXPECT_EQ(p1[static_cast<std::size_t>(mb)], 1);
        EXPECT_EQ(p2[static_cast<std::size_t>(mb)], g.two_bp ? 1 : 0);
      }
    }
  }
}

TEST(GenerateSchedule, TwoBpOnlyRearrangesBackwardWork) {
  for (auto kind : kPlainKinds) {
    for (int p : {1, 2, 4}) {
      const auto plain = make(kind, p, false);
      const auto split = make(kind, p, true);
      for (int r = 0; r < p; ++r) {
        EXPECT_EQ(non_backward(plain[static_cast<std::size_t>(r)]), non_backward(split[static_cast<std::size_t>(r)]))
            << to_string(kind) << " P=" << p << " rank " << r;
      }
    }
  }
}

TEST(GenerateSchedule, GPipeAcceptsOtherMicroBatchCounts) {
  for (int m : {1, 3, 7}) EXPECT_FALSE(validate_schedule(make(ScheduleKind::GPipe, 3, true, m)).has_value());
}

TEST(ValidateSchedule, SwappedSendsBreakFifoOrder) {
  auto s = make(ScheduleKind::GPipe, 4, false);
  auto& ops = s[0].ops;
  const auto a = index_of(s[0], Instruction::op(OpKind::SendAct, 0));
  const auto b = index_of(s[0], Instruction::op(OpKind::SendAct, 1));
  std::swap(ops[a], ops[b]);
  const auto v = validate_schedule(s);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->rule, "fifo-order") << v->describe();
}

TEST(ValidateSchedule, PrematureBackwardP2IsADependencyViolation) {
  auto s = make(ScheduleKind::OneFOneB1, 4, true);
  auto& ops = s[1].ops;
  const auto p1 = index_of(s[1], Instruction::op(OpKind::BackwardP1, 0));
  ops.insert(ops.begin() + static_cast<std::ptrdiff_t>(p1), Instruction::backward_p2({0}, B2Mode::Concat));
  // Drop the later call that covered micro-batch 0 so only the placement is wrong.
  for (auto it = ops.begin() + static_cast<std::ptrdiff_t>(p1) + 1; it != ops.end(); ++it) {
    if (it->kind == OpKind::BackwardP2 && std::find(it->mbs.begin(), it->mbs.end(), 0) != it->mbs.end()) {
      it->mbs.erase(std::find(it->mbs.begin(), it->mbs.end(), 0));
      if (it->mbs.empty()) ops.erase(it);
      break;
    }
  }
  const auto v = validate_schedule(s);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->rule, "p2-before-p1") << v->describe();
  EXPECT_EQ(v->rank, 1);
  EXPECT_EQ(v->index, p1);
}

TEST(ValidateSchedule, MissingFlushIsReported) {
  auto s = make(ScheduleKind::OneFOneB2, 2, true);
  s[1].ops.pop_back();
  const auto v = validate_schedule(s);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->rule, "missing-flush");
  EXPECT_EQ(v->rank, 1);
}

TEST(ValidateSchedule, DetectsDeadlockAndBadTopology) {
  // Both ranks wait for each other's gradient/activation first.
  auto deadlock = parse_schedule(
      "rank 0: RG0 L0 F0 SA0 BF:0 OPT\n"
      "rank 1: RA0 F0 LS0 BF:0 SG0 OPT\n");
  auto v = validate_schedule(deadlock);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->rule, "deadlock") << v->describe();

  auto loss_on_first = parse_schedule("rank 0: L0 F0 LS0 BF:0 OPT\nrank 1: OPT\n");
  v = validate_schedule(loss_on_first);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->rank, 0);
}

TEST(ValidateSchedule, MixedBackwardKindsAreRejected) {
  auto s = make(ScheduleKind::GPipe, 1, true, 2);
  auto& ops = s[0].ops;
  const auto p1 = index_of(s[0], Instruction::op(OpKind::BackwardP1, 1));
  ops[p1] = Instruction::op(OpKind::BackwardFull, 1);
  auto& p2 = ops[ops.size() - 2];
  p2.mbs = {0};
  const auto v = validate_schedule(s);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->rule, "mixed-backward");
}

TEST(ScheduleText, FormatParseRoundTripOverGrid) {
  for (const auto& g : grid()) {
    for (auto mode : {B2Mode::Concat, B2Mode::Loop}) {
      const auto s = make(g.kind, g.ranks, g.two_bp, 0, mode);
      EXPECT_EQ(parse_schedule(format_schedule(s)), s);
    }
  }
  EXPECT_THROW(parse_schedule("rank 0: F0 XYZ OPT\n"), std::invalid_argument);
}

}  // namespace
}  // namespace twobp
