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

#include "twobp/layers.hpp"

#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace twobp {
namespace {

using test::random_tensor;

ParamSet<double> identity_linear(std::size_t n) {
  auto params = init_params<double>(LayerSpec::linear(n, n), 0);
  auto& w = params.get("weight").value;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) w.at(i, j) = i == j ? 1 : 0;
  }
  for (auto& b : params.get("bias").value.data()) b = 0;
  return params;
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

TensorD as_tensor(const Shape& shape, const std::vector<double>& v) { return TensorD(shape, v); }

std::vector<LayerSpec> every_layer_kind() {
  return {LayerSpec::linear(4, 3), LayerSpec::relu(4), LayerSpec::rms_norm(4), LayerSpec::attention(4)};
}

TEST(LayerSpec, ParametersOnlyForLinearAndRmsNorm) {
  EXPECT_TRUE(LayerSpec::linear(2, 3).has_params());
  EXPECT_TRUE(LayerSpec::rms_norm(2).has_params());
  EXPECT_FALSE(LayerSpec::relu(2).has_params());
  EXPECT_FALSE(LayerSpec::attention(2).has_params());
  EXPECT_FALSE(LayerSpec::softmax_cross_entropy(2).has_params());
  EXPECT_EQ(parse_layer_kind(to_string(LayerKind::RMSNorm)), LayerKind::RMSNorm);
}

TEST(InitParams, UniformWithinFanInBoundAndSeeded) {
  const auto spec = LayerSpec::linear(16, 8);
  const auto a = init_params<double>(spec, 42);
  const auto b = init_params<double>(spec, 42);
  const double bound = 1.0 / std::sqrt(16.0);
  for (const auto& p : a.tensors) {
    for (double v : p.value.data()) EXPECT_LE(std::abs(v), bound);
    for (double g : p.grad.data()) EXPECT_EQ(g, 0.0);
    EXPECT_EQ(p.grad.shape(), p.value.shape());
  }
  EXPECT_EQ(a.get("weight").value, b.get("weight").value);
  EXPECT_EQ(a.get("weight").value.shape(), (Shape{8, 16}));
  EXPECT_EQ(a.get("bias").value.shape(), (Shape{8}));
  const auto norm = init_params<double>(LayerSpec::rms_norm(5), 1);
  EXPECT_EQ(norm.get("gain").value, TensorD::full({5}, 1.0));
}

TEST(Linear, IdentityWeightForwardAndBackwardP1) {
  const auto spec = LayerSpec::linear(2, 2);
  auto params = identity_linear(2);
  auto fwd = layer_forward(spec, &params, TensorD::matrix({{1, 2}}));
  EXPECT_EQ(fwd.y, TensorD::matrix({{1, 2}}));
  const auto dy = TensorD::matrix({{0.5, -3}});
  EXPECT_EQ(layer_backward_p1(spec, &params, dy, fwd.cache).dx, dy);
}

TEST(Linear, BackwardP2OuterProductByHand) {
  const auto spec = LayerSpec::linear(2, 2);
  auto params = identity_linear(2);
  auto fwd = layer_forward(spec, &params, TensorD::matrix({{1, 0}}));
  auto p1 = layer_backward_p1(spec, &params, TensorD::matrix({{2, 3}}), fwd.cache);
  ASSERT_TRUE(p1.saved.has_value());
  layer_backward_p2(spec, params, *p1.saved);
  EXPECT_EQ(params.get("weight").grad, TensorD::matrix({{2, 0}, {3, 0}}));
  EXPECT_EQ(params.get("bias").grad, TensorD::vector({2, 3}));
  EXPECT_EQ(params.contributions, 1u);
  EXPECT_TRUE(p1.saved->consumed);
}

TEST(Linear, ZeroOutputGradientLeavesBuffersUnchanged) {
  const auto spec = LayerSpec::linear(3, 2);
  auto params = init_params<double>(spec, 5);
  auto fwd = layer_forward(spec, &params, random_tensor({4, 3}, 6));
  auto p1 = layer_backward_p1(spec, &params, TensorD({4, 2}), fwd.cache);
  layer_backward_p2(spec, params, *p1.saved);
  for (const auto& p : params.tensors) EXPECT_EQ(p.grad, TensorD(p.value.shape()));
}

TEST(Linear, WeightGradientMatchesFiniteDifferences) {
  const auto spec = LayerSpec::linear(5, 3);
  auto params = init_params<double>(spec, 7);
  const auto x = random_tensor({4, 5}, 8);
  const auto probe = random_tensor({4, 3}, 9);
  auto fwd = layer_forward(spec, &params, x);
  auto p1 = layer_backward_p1(spec, &params, probe, fwd.cache);
  layer_backward_p2(spec, params, *p1.saved);
  auto& w = params.get("weight");
  const auto fd = finite_diff_grad<double>([&] { return dot(layer_forward(spec, &params, x).y, probe); },
                                           w.value.data());
  EXPECT_LE(max_relative_error(w.grad, as_tensor(w.value.shape(), fd)), 1e-6);
}

TEST(Relu, ForwardMaskAndBackward) {
  const auto spec = LayerSpec::relu(2);
  auto fwd = layer_forward<double>(spec, nullptr, TensorD::matrix({{-1, 3}}));
  EXPECT_EQ(fwd.y, TensorD::matrix({{0, 3}}));
  const auto* cache = std::get_if<ForwardCache<double>::Relu>(&fwd.cache.state);
  ASSERT_NE(cache, nullptr);
  EXPECT_EQ(cache->mask, TensorD::matrix({{0, 1}}));
  auto p1 = layer_backward_p1<double>(spec, nullptr, TensorD::matrix({{5, 5}}), fwd.cache);
  EXPECT_EQ(p1.dx, TensorD::matrix({{0, 5}}));
  EXPECT_FALSE(p1.saved.has_value());
  EXPECT_TRUE(fwd.cache.released());
}

TEST(RmsNorm, UnitGainNormalizesByRootMeanSquare) {
  const auto spec = LayerSpec::rms_norm(2, 0.0);
  auto params = init_params<double>(spec, 0);
  auto fwd = layer_forward(spec, &params, TensorD::matrix({{3, 4}}));
  const double rms = std::sqrt(12.5);
  EXPECT_DOUBLE_EQ(fwd.y[0], 3 / rms);
  EXPECT_DOUBLE_EQ(fwd.y[1], 4 / rms);
}

TEST(RmsNorm, InputGradientMatchesFiniteDifferences) {
  const auto spec = LayerSpec::rms_norm(8);
  auto params = init_params<double>(spec, 0);
  params.get("gain").value = random_tensor({8}, 10);
  auto x = random_tensor({2, 8}, 11);
  const auto probe = random_tensor({2, 8}, 12);
  auto fwd = layer_forward(spec, &params, x);
  const auto dx = layer_backward_p1(spec, &params, probe, fwd.cache).dx;
  const auto fd =
      finite_diff_grad<double>([&] { return dot(layer_forward(spec, &params, x).y, probe); }, x.data());
  EXPECT_LE(max_relative_error(dx, as_tensor(x.shape(), fd)), 1e-6);
}

TEST(Attention, RequiresSequenceInputAndHasNoParameters) {
  const auto spec = LayerSpec::attention(4);
  EXPECT_THROW(layer_forward<double>(spec, nullptr, random_tensor({2, 4}, 13)), ShapeError);
  auto fwd = layer_forward<double>(spec, nullptr, random_tensor({2, 3, 4}, 14));
  EXPECT_EQ(fwd.y.shape(), (Shape{2, 3, 4}));
  auto p1 = layer_backward_p1<double>(spec, nullptr, random_tensor({2, 3, 4}, 15), fwd.cache);
  EXPECT_FALSE(p1.saved.has_value());
  EXPECT_TRUE(fwd.cache.released());
}

TEST(Attention, SingleTokenPassesInputThrough) {
  // softmax over one key is 1, so the output equals V = x.
  const auto x = random_tensor({3, 1, 4}, 16);
  EXPECT_EQ(layer_forward<double>(LayerSpec::attention(4), nullptr, x).y, x);
}

TEST(Layers, ForwardRejectsWrongWidthAndMissingParams) {
  const auto spec = LayerSpec::linear(3, 2);
  auto params = init_params<double>(spec, 1);
  EXPECT_THROW(layer_forward(spec, &params, TensorD({2, 4})), ShapeError);
  EXPECT_THROW(layer_forward<double>(spec, nullptr, TensorD({2, 3})), std::invalid_argument);
}

TEST(Layers, CacheCannotBeConsumedTwiceOrByAnotherMicroBatch) {
  const auto spec = LayerSpec::linear(3, 2);
  auto params = init_params<double>(spec, 1);
  auto fwd = layer_forward(spec, &params, random_tensor({2, 3}, 2), 4);
  EXPECT_THROW(layer_backward_p1(spec, &params, TensorD({2, 2}), fwd.cache, 5), LayerStateError);
  layer_backward_p1(spec, &params, TensorD({2, 2}), fwd.cache, 4);
  EXPECT_THROW(layer_backward_p1(spec, &params, TensorD({2, 2}), fwd.cache, 4), LayerStateError);
}

TEST(Layers, BackwardP2RejectsConsumedSavedAndParameterFreeLayers) {
  const auto spec = LayerSpec::linear(3, 2);
  auto params = init_params<double>(spec, 1);
  auto fwd = layer_forward(spec, &params, random_tensor({2, 3}, 2));
  auto p1 = layer_backward_p1(spec, &params, random_tensor({2, 2}, 3), fwd.cache);
  layer_backward_p2(spec, params, *p1.saved);
  EXPECT_THROW(layer_backward_p2(spec, params, *p1.saved), LayerStateError);
  ParamSet<double> none;
  P2Saved<double> saved{LayerKind::ReLU, {0}, TensorD({1, 1}), TensorD({1, 1})};
  EXPECT_THROW(layer_backward_p2(LayerSpec::relu(1), none, saved), LayerStateError);
}

// Deferred p2 must reproduce the combined backward bit for bit.
TEST(Layers, SplitBackwardEqualsCombinedBackwardBitExactly) {
  for (const auto& spec : every_layer_kind()) {
    SCOPED_TRACE(std::string(to_string(spec.kind)));
    auto split = init_params<double>(spec, 20);
    auto full = split;
    ParamSet<double>* sp = spec.has_params() ? &split : nullptr;
    ParamSet<double>* fp = spec.has_params() ? &full : nullptr;
    std::vector<P2Saved<double>> pending;
    for (int mb = 0; mb < 3; ++mb) {
      const auto x = random_tensor({2, 3, 4}, 30 + static_cast<std::uint64_t>(mb));
      auto fwd_split = layer_forward(spec, sp, x, mb);
      auto fwd_full = layer_forward(spec, fp, x, mb);
      const auto dy = random_tensor(fwd_split.y.shape(), 40 + static_cast<std::uint64_t>(mb));
      auto p1 = layer_backward_p1(spec, sp, dy, fwd_split.cache, mb);
      const auto dx_full = layer_backward_full(spec, fp, dy, fwd_full.cache, mb);
      EXPECT_EQ(p1.dx, dx_full);
      EXPECT_EQ(p1.saved.has_value(), spec.has_params());
      if (p1.saved) pending.push_back(std::move(*p1.saved));
    }
    for (auto& saved : pending) layer_backward_p2(spec, split, saved);
    for (std::size_t i = 0; i < split.tensors.size(); ++i) {
      EXPECT_EQ(split.tensors[i].grad, full.tensors[i].grad);
    }
    EXPECT_EQ(split.contributions, full.contributions);
  }
}

TEST(Layers, ConcatenatedBackwardP2MatchesPerMicroBatchSum) {
  for (const auto& spec : {LayerSpec::linear(4, 3), LayerSpec::rms_norm(4)}) {
    SCOPED_TRACE(std::string(to_string(spec.kind)));
    auto looped = init_params<double>(spec, 50);
    auto merged = looped;
    std::vector<P2Saved<double>> loop_parts, concat_parts;
    for (int mb = 0; mb < 4; ++mb) {
      const auto x = random_tensor({3, 2, 4}, 60 + static_cast<std::uint64_t>(mb));
      auto fwd = layer_forward(spec, &looped, x, mb);
      const auto dy = random_tensor(fwd.y.shape(), 70 + static_cast<std::uint64_t>(mb));
      auto p1 = layer_backward_p1(spec, &looped, dy, fwd.cache, mb);
      loop_parts.push_back(*p1.saved);
      concat_parts.push_back(std::move(*p1.saved));
    }
    for (auto& s : loop_parts) layer_backward_p2(spec, looped, s);
    auto joined = concat_saved<double>(concat_parts);
    EXPECT_EQ(joined.mbs, (std::vector<MicroBatchId>{0, 1, 2, 3}));
    layer_backward_p2(spec, merged, joined);
    EXPECT_EQ(merged.contributions, 4u);
    for (std::size_t i = 0; i < looped.tensors.size(); ++i) {
      EXPECT_LE(max_relative_error(merged.tensors[i].grad, looped.tensors[i].grad), 1e-12);
    }
    for (const auto& part : concat_parts) EXPECT_TRUE(part.consumed);
  }
}

TEST(Layers, EveryKindMatchesFiniteDifferences) {
  for (const auto& spec : every_layer_kind()) {
    SCOPED_TRACE(std::string(to_string(spec.kind)));
    auto params = init_params<double>(spec, 80);
    ParamSet<double>* p = spec.has_params() ? &params : nullptr;
    auto x = random_tensor({2, 3, 4}, 81);
    auto fwd = layer_forward(spec, p, x);
    const auto probe = random_tensor(fwd.y.shape(), 82);
    auto objective = [&] { return dot(layer_forward(spec, p, x).y, probe); };
    auto p1 = layer_backward_p1(spec, p, probe, fwd.cache);
    EXPECT_LE(max_relative_error(p1.dx, as_tensor(x.shape(), finite_diff_grad<double>(objective, x.data()))), 1e-5);
    if (!p) continue;
    layer_backward_p2(spec, params, *p1.saved);
    for (auto& param : params.tensors) {
      const auto fd = finite_diff_grad<double>(objective, param.value.data());
      EXPECT_LE(max_relative_error(param.grad, as_tensor(param.value.shape(), fd)), 1e-5) << param.name;
    }
  }
}

TEST(Loss, UniformLogitsGiveLogClasses) {
  const std::vector<std::size_t> targets{2};
  const auto r = loss_forward_backward(TensorD({1, 4}), std::span<const std::size_t>(targets));
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-15);
}

TEST(Loss, GradientRowsSumToZeroAndMatchFiniteDifferences) {
  auto logits = random_tensor({5, 3}, 90);
  const std::vector<std::size_t> targets{0, 2, 1, 1, 0};
  const auto r = loss_forward_backward(logits, std::span<const std::size_t>(targets));
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(r.dlogits.at(i, 0) + r.dlogits.at(i, 1) + r.dlogits.at(i, 2), 0.0, 1e-15);
  }
  const auto fd = finite_diff_grad<double>(
      [&] { return loss_forward_backward(logits, std::span<const std::size_t>(targets)).loss; }, logits.data());
  EXPECT_LE(max_relative_error(r.dlogits, as_tensor(logits.shape(), fd)), 1e-6);
}

TEST(Loss, NormalizerDividesSumOfRowLosses) {
  const auto logits = random_tensor({4, 3}, 91);
  const std::vector<std::size_t> targets{0, 1, 2, 0};
  const auto mean = loss_forward_backward(logits, std::span<const std::size_t>(targets));
  const auto scaled = loss_forward_backward(logits, std::span<const std::size_t>(targets), 8.0);
  EXPECT_NEAR(scaled.loss, mean.loss / 2, 1e-15);
}

TEST(Loss, RejectsBadTargets) {
  const std::vector<std::size_t> out_of_range{4};
  EXPECT_THROW(loss_forward_backward(TensorD({1, 4}), std::span<const std::size_t>(out_of_range)), std::out_of_range);
  const std::vector<std::size_t> too_many{0, 1};
  EXPECT_THROW(loss_forward_backward(TensorD({1, 4}), std::span<const std::size_t>(too_many)), ShapeError);
}

TEST(FiniteDiff, QuadraticHasDerivativeTwoW) {
  std::vector<double> w{3.0};
  const auto g = finite_diff_grad<double>([&] { return w[0] * w[0]; }, std::span<double>(w));
  EXPECT_NEAR(g[0], 6.0, 1e-8);
  EXPECT_EQ(w[0], 3.0);
}

TEST(FiniteDiff, ZeroInputGivesZeroWeightGradient) {
  const auto spec = LayerSpec::linear(3, 2);
  auto params = init_params<double>(spec, 3);
  const TensorD x({2, 3});
  const auto probe = random_tensor({2, 2}, 4);
  const auto g = finite_diff_grad<double>([&] { return dot(layer_forward(spec, &params, x).y, probe); },
                                          params.get("weight").value.data());
  for (double v : g) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(FaultInjection, RmsNormWrongSignIsCaughtByFiniteDifferences) {
  const auto spec = LayerSpec::rms_norm(4);
  auto params = init_params<double>(spec, 5);
  const auto x = random_tensor({3, 4}, 6);
  const auto probe = random_tensor({3, 4}, 7);
  testing::set_fault(testing::Fault::RmsNormP2WrongSign);
  auto fwd = layer_forward(spec, &params, x);
  auto p1 = layer_backward_p1(spec, &params, probe, fwd.cache);
  layer_backward_p2(spec, params, *p1.saved);
  testing::set_fault(testing::Fault::None);
  auto& gain = params.get("gain");
  const auto fd = finite_diff_grad<double>([&] { return dot(layer_forward(spec, &params, x).y, probe); },
                                           gain.value.data());
  EXPECT_GT(max_relative_error(gain.grad, as_tensor(gain.value.shape(), fd)), 1.0);
}

}  // namespace
}  // namespace twobp
