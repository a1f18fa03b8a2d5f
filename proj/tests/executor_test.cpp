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

#include "twobp/executor.hpp"

#include <cmath>

#include <gtest/gtest.h>

namespace twobp {
namespace {

constexpr ScheduleKind kAllKinds[] = {ScheduleKind::Naive, ScheduleKind::GPipe, ScheduleKind::OneFOneB1,
                                      ScheduleKind::OneFOneB2, ScheduleKind::OneFOneB2MemEff};

struct Setup {
  std::vector<Model<double>> stages;
  Model<double> full;
  Batch<double> batch;
  Schedule schedule;
  std::size_t micro_batches;
};

Setup make_setup(const std::vector<LayerSpec>& blocks, const ScheduleConfig& cfg, std::size_t seq,
                 std::uint64_t seed = 5) {
  const auto plan = build_model({blocks, uniform_boundaries(blocks.size(), static_cast<std::size_t>(cfg.ranks))});
  auto stages = instantiate_stages<double>(plan, seed);
  auto full = merge_stages<double>(stages);
  const auto m = static_cast<std::size_t>(cfg.resolved_micro_batches());
  auto batch =
      synthetic_batch<double>(2 * m, seq, blocks.front().in_features, blocks.back().out_features, seed + 1);
  return Setup{std::move(stages), std::move(full), std::move(batch), generate_schedule(cfg), m};
}

StepResult<double> run(Setup& s, const PipelineOptions& options = {}) {
  std::vector<OptimizerState<double>> optimizers(s.stages.size());
  return run_pipeline(s.stages, optimizers, std::span<const InstructionStream>(s.schedule), s.batch, options);
}

TEST(Optimizer, SgdByHand) {
  Model<double> model;
  model.layers = {LayerSpec::rms_norm(1)};
  model.params.resize(1);
  model.params[0].tensors.push_back({"gain", TensorD::vector({1}), TensorD::vector({0.5})});
  OptimizerState<double> state;
  state.config.lr = 1;
  optimizer_step(state, model);
  EXPECT_EQ(model.params[0].tensors[0].value, TensorD::vector({0.5}));
}

TEST(Optimizer, AdamFirstStepUsesUnitBiasCorrectedMoments) {
  Model<double> model;
  model.layers = {LayerSpec::rms_norm(2)};
  model.params.resize(1);
  model.params[0].tensors.push_back({"gain", TensorD::vector({1, 1}), TensorD::vector({0.3, -2})});
  OptimizerState<double> state;
  state.config.kind = OptimizerKind::Adam;
  state.config.lr = 0.1;
  optimizer_step(state, model);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  const auto& w = model.params[0].tensors[0].value;
  EXPECT_NEAR(w[0], 1 - 0.1 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(w[1], 1 + 0.1 * 2 / (2 + 1e-8), 1e-15);
  EXPECT_EQ(state.step, 1);
  EXPECT_EQ(state.m.at(0).shape(), w.shape());
}

TEST(Optimizer, ZeroGradientIsAFixedPoint) {
  for (auto kind : {OptimizerKind::SGD, OptimizerKind::Adam}) {
    auto model = instantiate<double>(toy_mlp_blocks(3, 4, 2), 1);
    const auto before = model;
    OptimizerState<double> state;
    state.config.kind = kind;
    optimizer_step(state, model);
    for (std::size_t l = 0; l < model.params.size(); ++l) {
      for (std::size_t t = 0; t < model.params[l].tensors.size(); ++t) {
        EXPECT_EQ(model.params[l].tensors[t].value, before.params[l].tensors[t].value);
      }
    }
  }
  EXPECT_EQ(parse_optimizer_kind("adam"), OptimizerKind::Adam);
  EXPECT_THROW(parse_optimizer_kind("lamb"), std::invalid_argument);
}

TEST(Reference, MatchesFiniteDifferencesOnThreeLayerModel) {
  const std::vector<LayerSpec> layers{LayerSpec::linear(4, 5), LayerSpec::rms_norm(5), LayerSpec::linear(5, 3)};
  auto model = instantiate<double>(layers, 2);
  const auto batch = synthetic_batch<double>(4, 0, 4, 3, 3);
  const auto ref = run_reference(model, batch, 2);
  EXPECT_LE(max_relative_error(ref.grads, finite_diff_model_grads(model, batch)), 1e-5);
  EXPECT_NEAR(ref.loss, evaluate_loss(model, batch), 1e-12);
}

TEST(Reference, MicroBatchCountOnlyChangesSummationOrder) {
  auto model = instantiate<double>(toy_transformer_blocks(8, 4, 3), 4);
  const auto batch = synthetic_batch<double>(4, 3, 4, 3, 5);
  const auto one = run_reference(model, batch, 1);
  const auto two = run_reference(model, batch, 2);
  EXPECT_LE(max_relative_error(one.grads, two.grads), 1e-12);
  EXPECT_TRUE(bit_identical(two.grads, run_reference(model, batch, 2).grads));
}

TEST(RunPipeline, SingleRankEqualsReferenceExactly) {
  for (auto kind : kAllKinds) {
    for (bool two_bp : {false, true}) {
      if (kind == ScheduleKind::OneFOneB2MemEff && !two_bp) continue;
      auto s = make_setup(toy_transformer_blocks(8, 4, 3), {kind, 1, 0, two_bp, B2Mode::Loop}, 3);
      const auto ref = run_reference(s.full, s.batch, s.micro_batches);
      const auto result = run(s);
      EXPECT_TRUE(bit_identical(result.grads, ref.grads)) << to_string(kind) << " 2bp=" << two_bp;
      EXPECT_EQ(result.loss, ref.loss);
    }
  }
}

TEST(RunPipeline, OneFOneB1FourRanksOnMlpMatchesReference) {
  for (auto mode : {B2Mode::Loop, B2Mode::Concat}) {
    auto s = make_setup(toy_mlp_blocks(8, 6, 3), {ScheduleKind::OneFOneB1, 4, 0, true, mode}, 0);
    const auto ref = run_reference(s.full, s.batch, s.micro_batches);
    const auto result = run(s);
    if (mode == B2Mode::Loop) {
      EXPECT_TRUE(bit_identical(result.grads, ref.grads));
    } else {
      EXPECT_LE(max_relative_error(result.grads, ref.grads), 1e-12);
    }
  }
}

TEST(RunPipeline, EveryScheduleMatchesReference) {
  for (auto kind : kAllKinds) {
    for (int p : {2, 4}) {
      for (bool two_bp : {false, true}) {
        if (kind == ScheduleKind::OneFOneB2MemEff && !two_bp) continue;
        for (auto mode : {B2Mode::Loop, B2Mode::Concat}) {
          auto s = make_setup(toy_transformer_blocks(8, 4, 3), {kind, p, 0, two_bp, mode}, 3);
          const auto ref = run_reference(s.full, s.batch, s.micro_batches);
          const auto result = run(s);
          SCOPED_TRACE(std::string(to_string(kind)) + " P=" + std::to_string(p) + " 2bp=" + std::to_string(two_bp) +
                       " " + std::string(to_string(mode)));
          if (!two_bp || mode == B2Mode::Loop) {
            EXPECT_TRUE(bit_identical(result.grads, ref.grads));
          } else {
            EXPECT_LE(max_relative_error(result.grads, ref.grads), 1e-12);
          }
          EXPECT_EQ(result.loss, ref.loss);
        }
      }
    }
  }
}

TEST(RunPipeline, TraceHasOneOrderedEventPerInstruction) {
  auto s = make_setup(toy_transformer_blocks(8, 4, 3), {ScheduleKind::OneFOneB2, 4, 0, true}, 3);
  const auto result = run(s);
  std::size_t count = 0;
  for (const auto& stream : s.schedule) count += stream.ops.size();
  ASSERT_EQ(result.trace.size(), count);
  std::size_t i = 0;
  for (const auto& stream : s.schedule) {
    double clock = 0;
    for (const auto& ins : stream.ops) {
      const auto& e = result.trace[i++];
      EXPECT_EQ(e.rank, stream.rank);
      EXPECT_EQ(e.op, ins.kind);
      EXPECT_EQ(e.mbs, ins.mbs);
      EXPECT_GE(e.end, e.start);
      EXPECT_GE(e.start, clock);
      clock = e.end;
    }
  }
}

TEST(RunPipeline, RepeatedStepsFromSameStateAreIdentical) {
  auto a = make_setup(toy_transformer_blocks(8, 4, 3), {ScheduleKind::OneFOneB1, 4, 0, true}, 3);
  auto b = make_setup(toy_transformer_blocks(8, 4, 3), {ScheduleKind::OneFOneB1, 4, 0, true}, 3);
  const auto ra = run(a);
  const auto rb = run(b);
  EXPECT_TRUE(bit_identical(ra.grads, rb.grads));
  ASSERT_EQ(ra.trace.size(), rb.trace.size());
  for (std::size_t i = 0; i < ra.trace.size(); ++i) {
    EXPECT_EQ(ra.trace[i].op, rb.trace[i].op);
    EXPECT_EQ(ra.trace[i].mbs, rb.trace[i].mbs);
  }
}

TEST(RunPipeline, FlushAppliesAccumulatedGradientsOnceAndZeroesBuffers) {
  auto s = make_setup(toy_transformer_blocks(8, 4, 3), {ScheduleKind::GPipe, 2, 0, true}, 3);
  const auto before = merge_stages<double>(s.stages);
  std::vector<OptimizerState<double>> optimizers(2);
  for (auto& o : optimizers) o.config.lr = 0.5;
  const auto result =
      run_pipeline(s.stages, optimizers, std::span<const InstructionStream>(s.schedule), s.batch);
  const auto after = merge_stages<double>(s.stages);
  for (std::size_t l = 0; l < after.params.size(); ++l) {
    for (std::size_t t = 0; t < after.params[l].tensors.size(); ++t) {
      const auto expected =
          sub(before.params[l].tensors[t].value, scale(result.grads[l][t], 0.5));
      EXPECT_EQ(after.params[l].tensors[t].value, expected);
      EXPECT_EQ(after.params[l].tensors[t].grad, TensorD(expected.shape()));
    }
    EXPECT_EQ(after.params[l].contributions, 0u);
  }
}

TEST(RunPipeline, SmokeTrainingLossDecreases) {
  // Golden values recorded from this implementation: 20 SGD steps, lr 0.05.
  const auto blocks = toy_mlp_blocks(8, 8, 4);
  const auto plan = build_model({blocks, uniform_boundaries(8, 4)});
  auto stages = instantiate_stages<double>(plan, 3);
  const auto batch = synthetic_batch<double>(16, 0, 8, 4, 4, true);
  OptimizerState<double> sgd;
  sgd.config.lr = 0.05;
  std::vector<OptimizerState<double>> optimizers(4, sgd);
  const auto schedule = generate_schedule({ScheduleKind::OneFOneB1, 4, 0, true, B2Mode::Loop});
  std::vector<double> losses;
  for (int step = 0; step < 20; ++step) {
    losses.push_back(run_pipeline(stages, optimizers, std::span<const InstructionStream>(schedule), batch).loss);
  }
  for (std::size_t i = 3; i + 1 < losses.size(); ++i) EXPECT_LT(losses[i + 1], losses[i]) << "step " << i;
  EXPECT_NEAR(losses.front(), 1.3878480734137062, 1e-12);
  EXPECT_NEAR(losses.back(), 1.3569073029781085, 1e-12);
}

TEST(RunPipeline, SinglePrecisionRuns) {
  const auto blocks = toy_transformer_blocks(8, 4, 3);
  const auto plan = build_model({blocks, uniform_boundaries(8, 2)});
  auto stages = instantiate_stages<float>(plan, 1);
  const auto batch = synthetic_batch<float>(4, 3, 4, 3, 2);
  std::vector<OptimizerState<float>> optimizers(2);
  const auto schedule = generate_schedule({ScheduleKind::OneFOneB1, 2, 0, true});
  const auto result = run_pipeline(stages, optimizers, std::span<const InstructionStream>(schedule), batch);
  const auto ref = run_reference(merge_stages<float>(instantiate_stages<float>(plan, 1)), batch, 2);
  EXPECT_LE(max_relative_error(result.grads, ref.grads), 1e-5);
}

TEST(RunPipeline, SmallChannelsStillComplete) {
  auto s = make_setup(toy_transformer_blocks(8, 4, 3), {ScheduleKind::GPipe, 4, 0, true, B2Mode::Loop}, 3);
  const auto ref = run_reference(s.full, s.batch, s.micro_batches);
  PipelineOptions options;
  options.channel_capacity = 1;
  EXPECT_TRUE(bit_identical(run(s, options).grads, ref.grads));
}

TEST(RunPipeline, DeadlockIsReportedWithBlockedInstructions) {
  auto s = make_setup(toy_mlp_blocks(2, 4, 3), {ScheduleKind::Naive, 2, 0, false}, 0);
  s.schedule = parse_schedule(
      "rank 0: RG0 L0 F0 SA0 BF:0 OPT\n"
      "rank 1: RA0 F0 LS0 BF:0 SG0 OPT\n");
  PipelineOptions options;
  options.validate = false;
  try {
    run(s, options);
    FAIL() << "expected DeadlockError";
  } catch (const DeadlockError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("rank 0 blocked on RecvGrad(0)"), std::string::npos) << what;
    EXPECT_NE(what.find("rank 1 blocked on RecvAct(0)"), std::string::npos) << what;
  }
}

TEST(RunPipeline, InvalidStreamsAreRejectedUpFront) {
  auto s = make_setup(toy_mlp_blocks(2, 4, 3), {ScheduleKind::Naive, 2, 0, false}, 0);
  s.schedule[1].ops.pop_back();
  EXPECT_THROW(run(s), ScheduleError);
}

TEST(RunPipeline, UnflushedIntermediatesAreAnError) {
  auto s = make_setup(toy_mlp_blocks(1, 4, 3), {ScheduleKind::GPipe, 1, 2, true}, 0);
  s.schedule = parse_schedule("rank 0: L0 F0 LS0 B1:0 L1 F1 LS1 B1:1 B2:{0}c OPT\n");
  PipelineOptions options;
  options.validate = false;
  EXPECT_THROW(run(s, options), std::logic_error);
}

TEST(RunPipeline, StageBoundaryShapeMismatchPropagates) {
  auto s = make_setup(toy_mlp_blocks(4, 4, 3), {ScheduleKind::GPipe, 2, 0, false}, 0);
  s.stages[1] = instantiate<double>(std::vector<LayerSpec>{LayerSpec::linear(5, 4), LayerSpec::linear(4, 3)}, 1);
  EXPECT_THROW(run(s), ShapeError);
}

TEST(RunPipeline, BatchMustSplitEvenly) {
  auto s = make_setup(toy_mlp_blocks(2, 4, 3), {ScheduleKind::GPipe, 2, 0, false}, 0);
  s.batch = synthetic_batch<double>(3, 0, 4, 3, 1);
  EXPECT_THROW(run(s), std::invalid_argument);
}

}  // namespace
}  // namespace twobp
