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

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <stdexcept>

namespace twobp {

namespace {

std::atomic<testing::Fault> g_fault{testing::Fault::None};

template <typename Scalar>
Tensor<Scalar> flatten_rows(const Tensor<Scalar>& t) {
  return t.reshaped({t.size() / t.features(), t.features()});
}

Shape with_features(Shape shape, std::size_t features) {
  shape.back() = features;
  return shape;
}

void require_features(const LayerSpec& spec, std::size_t got, const char* what) {
  if (got != spec.in_features) {
    throw ShapeError(std::string(to_string(spec.kind)) + " " + what + ": expected " +
                     std::to_string(spec.in_features) + " input features, got " + std::to_string(got));
  }
}

template <typename Scalar>
const ParamSet<Scalar>& require_params(const LayerSpec& spec, const ParamSet<Scalar>* params) {
  if (params == nullptr || params->empty()) {
    throw std::invalid_argument(std::string(to_string(spec.kind)) + ": layer requires parameters");
  }
  return *params;
}

template <typename Scalar>
void check_cache(ForwardCache<Scalar>& cache, MicroBatchId mb) {
  if (cache.released()) throw LayerStateError("backward-p1: forward cache already consumed");
  if (cache.mb != mb) {
    throw LayerStateError("backward-p1: cache belongs to micro-batch " + std::to_string(cache.mb) +
                          ", not " + std::to_string(mb));
  }
}

// Row-wise softmax of a [rows x cols] block, in place.
template <typename Scalar>
void softmax_rows(Scalar* data, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    Scalar* row = data + i * cols;
    const Scalar mx = *std::max_element(row, row + cols);
    Scalar total = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= total;
  }
}

template <typename Scalar>
Tensor<Scalar> slice_sample(const Tensor<Scalar>& t, std::size_t sample) {
  const std::size_t rows = t.dim(1), cols = t.dim(2);
  auto begin = t.data().begin() + static_cast<std::ptrdiff_t>(sample * rows * cols);
  return Tensor<Scalar>({rows, cols}, std::vector<Scalar>(begin, begin + static_cast<std::ptrdiff_t>(rows * cols)));
}

template <typename Scalar>
void store_sample(Tensor<Scalar>& t, std::size_t sample, const Tensor<Scalar>& block) {
  std::copy(block.data().begin(), block.data().end(), t.data().begin() + static_cast<std::ptrdiff_t>(sample * block.size()));
}

// --- Linear ---------------------------------------------------------------

template <typename Scalar>
LayerForward<Scalar> linear_forward(const LayerSpec& spec, const ParamSet<Scalar>& params, const Tensor<Scalar>& x,
                                    MicroBatchId mb) {
  require_features(spec, x.features(), "forward");
  auto x2 = flatten_rows(x);
  auto y2 = matmul_nt(x2, params.get("weight").value);
  if (spec.bias) {
    const auto& b = params.get("bias").value;
    for (std::size_t r = 0; r < y2.dim(0); ++r) {
      for (std::size_t o = 0; o < y2.dim(1); ++o) y2.at(r, o) += b[o];
    }
  }
  auto y = std::move(y2).reshaped(with_features(x.shape(), spec.out_features));
  return {std::move(y), ForwardCache<Scalar>{mb, typename ForwardCache<Scalar>::Linear{std::move(x2)}}};
}

template <typename Scalar>
void linear_p2(const LayerSpec& spec, ParamSet<Scalar>& params, const P2Saved<Scalar>& saved) {
  accumulate(params.get("weight").grad, matmul_tn(saved.output_grad, saved.input));
  if (spec.bias) {
    const auto& dy = saved.output_grad;
    Tensor<Scalar> db({dy.dim(1)});
    for (std::size_t r = 0; r < dy.dim(0); ++r) {
      for (std::size_t o = 0; o < dy.dim(1); ++o) db[o] += dy.at(r, o);
    }
    accumulate(params.get("bias").grad, db);
  }
}

// --- RMSNorm --------------------------------------------------------------

template <typename Scalar>
LayerForward<Scalar> rms_forward(const LayerSpec& spec, const ParamSet<Scalar>& params, const Tensor<Scalar>& x,
                                 MicroBatchId mb) {
  require_features(spec, x.features(), "forward");
  const auto& gain = params.get("gain").value;
  auto x_hat = flatten_rows(x);
  const std::size_t rows = x_hat.dim(0), d = x_hat.dim(1);
  Tensor<Scalar> inv_rms({rows});
  Tensor<Scalar> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar ms = 0;
    for (std::size_t j = 0; j < d; ++j) ms += x_hat.at(r, j) * x_hat.at(r, j);
    ms /= static_cast<Scalar>(d);
    const Scalar inv = Scalar(1) / std::sqrt(ms + static_cast<Scalar>(spec.eps));
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      x_hat.at(r, j) *= inv;
      y[r * d + j] = x_hat.at(r, j) * gain[j];
    }
  }
  return {std::move(y), ForwardCache<Scalar>{mb, typename ForwardCache<Scalar>::Norm{std::move(x_hat), std::move(inv_rms)}}};
}

template <typename Scalar>
Tensor<Scalar> rms_p1(const ParamSet<Scalar>& params, const Tensor<Scalar>& dy2,
                      const typename ForwardCache<Scalar>::Norm& c) {
  const auto& gain = params.get("gain").value;
  const std::size_t rows = c.x_hat.dim(0), d = c.x_hat.dim(1);
  Tensor<Scalar> dx({rows, d});
  std::vector<Scalar> g_hat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar dot = 0;
    for (std::size_t j = 0; j < d; ++j) {
      g_hat[j] = dy2.at(r, j) * gain[j];
      dot += g_hat[j] * c.x_hat.at(r, j);
    }
    dot /= static_cast<Scalar>(d);
    for (std::size_t j = 0; j < d; ++j) dx.at(r, j) = c.inv_rms[r] * (g_hat[j] - c.x_hat.at(r, j) * dot);
  }
  return dx;
}

template <typename Scalar>
void rms_p2(ParamSet<Scalar>& params, const P2Saved<Scalar>& saved) {
  const auto& dy = saved.output_grad;
  const auto& x_hat = saved.input;
  Tensor<Scalar> dg({dy.dim(1)});
  for (std::size_t r = 0; r < dy.dim(0); ++r) {
    for (std::size_t j = 0; j < dy.dim(1); ++j) dg[j] += dy.at(r, j) * x_hat.at(r, j);
  }
  if (g_fault.load() == testing::Fault::RmsNormP2WrongSign) dg = scale(dg, Scalar(-1));
  accumulate(params.get("gain").grad, dg);
}

// --- Self-attention (Q = K = V = x, single head, no projections) -----------

template <typename Scalar>
LayerForward<Scalar> attention_forward(const LayerSpec& spec, const Tensor<Scalar>& x, MicroBatchId mb) {
  if (x.rank() != 3) throw ShapeError("Attention forward: expected [batch x seq x features], got " + shape_string(x.shape()));
  require_features(spec, x.features(), "forward");
  const std::size_t batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  Tensor<Scalar> y(x.shape());
  Tensor<Scalar> weights({batch, seq, seq});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto xs = slice_sample(x, b);
    auto scores = scale(matmul_nt(xs, xs), inv_sqrt_d);
    softmax_rows(scores.data().data(), seq, seq);
    store_sample(y, b, matmul(scores, xs));
    store_sample(weights, b, scores);
  }
  return {std::move(y), ForwardCache<Scalar>{mb, typename ForwardCache<Scalar>::Attn{x, std::move(weights)}}};
}

template <typename Scalar>
Tensor<Scalar> attention_p1(const Tensor<Scalar>& dy, const typename ForwardCache<Scalar>::Attn& c) {
  const std::size_t batch = c.x.dim(0), seq = c.x.dim(1), d = c.x.dim(2);
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  Tensor<Scalar> dx(c.x.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto xs = slice_sample(c.x, b);
    const auto a = slice_sample(c.weights, b);
    const auto dys = slice_sample(dy, b);
    auto da = matmul_nt(dys, xs);        // dL/dA = dY V^T
    auto dv = matmul_tn(a, dys);         // dL/dV = A^T dY
    Tensor<Scalar> ds({seq, seq});
    for (std::size_t i = 0; i < seq; ++i) {
      Scalar row_dot = 0;
      for (std::size_t k = 0; k < seq; ++k) row_dot += da.at(i, k) * a.at(i, k);
      for (std::size_t j = 0; j < seq; ++j) ds.at(i, j) = a.at(i, j) * (da.at(i, j) - row_dot) * inv_sqrt_d;
    }
    auto dq = matmul(ds, xs);
    auto dk = matmul_tn(ds, xs);
    store_sample(dx, b, add(add(dq, dk), dv));
  }
  return dx;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Linear: return "Linear";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::RMSNorm: return "RMSNorm";
    case LayerKind::Attention: return "Attention";
    case LayerKind::SoftmaxCrossEntropy: return "SoftmaxCrossEntropy";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (auto k : {LayerKind::Linear, LayerKind::ReLU, LayerKind::RMSNorm, LayerKind::Attention,
                 LayerKind::SoftmaxCrossEntropy}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out, bool bias) {
  return {LayerKind::Linear, in, out, bias, 1e-5};
}
LayerSpec LayerSpec::relu(std::size_t width) { return {LayerKind::ReLU, width, width, false, 1e-5}; }
LayerSpec LayerSpec::rms_norm(std::size_t width, double eps) { return {LayerKind::RMSNorm, width, width, false, eps}; }
LayerSpec LayerSpec::attention(std::size_t width) { return {LayerKind::Attention, width, width, false, 1e-5}; }
LayerSpec LayerSpec::softmax_cross_entropy(std::size_t classes) {
  return {LayerKind::SoftmaxCrossEntropy, classes, classes, false, 1e-5};
}

template <typename Scalar>
Parameter<Scalar>& ParamSet<Scalar>::get(std::string_view name) {
  for (auto& p : tensors) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

template <typename Scalar>
const Parameter<Scalar>& ParamSet<Scalar>::get(std::string_view name) const {
  return const_cast<ParamSet*>(this)->get(name);
}

template <typename Scalar>
void ParamSet<Scalar>::zero_grad() {
  for (auto& p : tensors) p.grad.array().setZero();
  contributions = 0;
}

template <typename Scalar>
ParamSet<Scalar> init_params(const LayerSpec& spec, std::uint64_t seed) {
  ParamSet<Scalar> params;
  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<Scalar> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<Scalar>(dist(rng));
    return t;
  };
  switch (spec.kind) {
    case LayerKind::Linear: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in_features));
      params.tensors.push_back({"weight", uniform({spec.out_features, spec.in_features}, bound),
                                Tensor<Scalar>({spec.out_features, spec.in_features})});
      if (spec.bias) {
        params.tensors.push_back({"bias", uniform({spec.out_features}, bound), Tensor<Scalar>({spec.out_features})});
      }
      break;
    }
    case LayerKind::RMSNorm:
      params.tensors.push_back({"gain", Tensor<Scalar>::full({spec.in_features}, Scalar(1)),
                                Tensor<Scalar>({spec.in_features})});
      break;
    default:
      break;
  }
  return params;
}

template <typename Scalar>
LayerForward<Scalar> layer_forward(const LayerSpec& spec, const ParamSet<Scalar>* params, const Tensor<Scalar>& x,
                                   MicroBatchId mb) {
  switch (spec.kind) {
    case LayerKind::Linear: return linear_forward(spec, require_params(spec, params), x, mb);
    case LayerKind::RMSNorm: return rms_forward(spec, require_params(spec, params), x, mb);
    case LayerKind::ReLU:
      require_features(spec, x.features(), "forward");
      return {relu(x), ForwardCache<Scalar>{mb, typename ForwardCache<Scalar>::Relu{relu_mask(x)}}};
    case LayerKind::Attention: return attention_forward(spec, x, mb);
    case LayerKind::SoftmaxCrossEntropy:
      throw std::invalid_argument("SoftmaxCrossEntropy is a loss head; use loss_forward_backward");
  }
  throw std::logic_error("unreachable");
}

template <typename Scalar>
LayerBackwardP1<Scalar> layer_backward_p1(const LayerSpec& spec, const ParamSet<Scalar>* params,
                                          const Tensor<Scalar>& dy, ForwardCache<Scalar>& cache, MicroBatchId mb) {
  check_cache(cache, mb);
  if (dy.features() != spec.out_features) {
    throw ShapeError(std::string(to_string(spec.kind)) + " backward-p1: output gradient has " +
                     std::to_string(dy.features()) + " features, expected " + std::to_string(spec.out_features));
  }
  auto state = std::exchange(cache.state, std::monostate{});
  LayerBackwardP1<Scalar> out{dy, std::nullopt};
  switch (spec.kind) {
    case LayerKind::Linear: {
      auto& c = std::get<typename ForwardCache<Scalar>::Linear>(state);
      const auto& p = require_params(spec, params);
      auto dy2 = flatten_rows(dy);
      out.dx = matmul(dy2, p.get("weight").value).reshaped(with_features(dy.shape(), spec.in_features));
      out.saved = P2Saved<Scalar>{spec.kind, {mb}, std::move(c.x), std::move(dy2)};
      break;
    }
    case LayerKind::RMSNorm: {
      auto& c = std::get<typename ForwardCache<Scalar>::Norm>(state);
      auto dy2 = flatten_rows(dy);
      out.dx = rms_p1(require_params(spec, params), dy2, c).reshaped(dy.shape());
      out.saved = P2Saved<Scalar>{spec.kind, {mb}, std::move(c.x_hat), std::move(dy2)};
      break;
    }
    case LayerKind::ReLU:
      out.dx = mul(dy, std::get<typename ForwardCache<Scalar>::Relu>(state).mask);
      break;
    case LayerKind::Attention:
      out.dx = attention_p1(dy, std::get<typename ForwardCache<Scalar>::Attn>(state));
      break;
    case LayerKind::SoftmaxCrossEntropy:
      throw std::invalid_argument("SoftmaxCrossEntropy is a loss head; use loss_forward_backward");
  }
  return out;
}

template <typename Scalar>
void layer_backward_p2(const LayerSpec& spec, ParamSet<Scalar>& params, P2Saved<Scalar>& saved) {
  if (!spec.has_params()) {
    throw LayerStateError(std::string(to_string(spec.kind)) + " has no parameters and no backward-p2");
  }
  if (saved.consumed) throw LayerStateError("backward-p2: saved intermediates already consumed");
  if (saved.kind != spec.kind) throw LayerStateError("backward-p2: saved intermediates belong to another layer kind");
  switch (spec.kind) {
    case LayerKind::Linear: linear_p2(spec, params, saved); break;
    case LayerKind::RMSNorm: rms_p2(params, saved); break;
    default: break;
  }
  params.contributions += saved.mbs.size();
  saved.consumed = true;
}

template <typename Scalar>
P2Saved<Scalar> concat_saved(std::span<P2Saved<Scalar>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_saved: empty list");
  std::vector<Tensor<Scalar>> inputs, grads;
  P2Saved<Scalar> merged{parts.front().kind, {}, parts.front().input, parts.front().output_grad};
  for (auto& p : parts) {
    if (p.consumed) throw LayerStateError("concat_saved: part already consumed");
    if (p.kind != merged.kind) throw LayerStateError("concat_saved: mixed layer kinds");
    merged.mbs.insert(merged.mbs.end(), p.mbs.begin(), p.mbs.end());
    inputs.push_back(std::move(p.input));
    grads.push_back(std::move(p.output_grad));
    p.consumed = true;
  }
  merged.input = concat_batch(std::span<const Tensor<Scalar>>(inputs));
  merged.output_grad = concat_batch(std::span<const Tensor<Scalar>>(grads));
  return merged;
}

template <typename Scalar>
Tensor<Scalar> layer_backward_full(const LayerSpec& spec, ParamSet<Scalar>* params, const Tensor<Scalar>& dy,
                                   ForwardCache<Scalar>& cache, MicroBatchId mb) {
  auto r = layer_backward_p1(spec, params, dy, cache, mb);
  if (r.saved) layer_backward_p2(spec, *params, *r.saved);
  return std::move(r.dx);
}

template <typename Scalar>
LossResult<Scalar> loss_forward_backward(const Tensor<Scalar>& logits, std::span<const std::size_t> targets,
                                         double normalizer) {
  auto probs = flatten_rows(logits);
  const std::size_t rows = probs.dim(0), classes = probs.dim(1);
  if (targets.size() != rows) {
    throw ShapeError("loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  if (normalizer <= 0) normalizer = static_cast<double>(rows);
  softmax_rows(probs.data().data(), rows, classes);
  double loss = 0;
  const Scalar inv = static_cast<Scalar>(1.0 / normalizer);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = targets[r];
    if (t >= classes) {
      throw std::out_of_range("loss: target " + std::to_string(t) + " outside [0, " + std::to_string(classes) + ")");
    }
    loss -= std::log(static_cast<double>(probs.at(r, t)));
    probs.at(r, t) -= Scalar(1);
    for (std::size_t c = 0; c < classes; ++c) probs.at(r, c) *= inv;
  }
  return {loss / normalizer, std::move(probs).reshaped(logits.shape())};
}

template <typename Scalar>
std::vector<double> finite_diff_grad(const std::function<double()>& objective, std::span<Scalar> values, double eps) {
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Scalar saved = values[i];
    values[i] = static_cast<Scalar>(static_cast<double>(saved) + eps);
    const double plus = objective();
    values[i] = static_cast<Scalar>(static_cast<double>(saved) - eps);
    const double minus = objective();
    values[i] = saved;
    grad[i] = (plus - minus) / (2 * eps);
  }
  return grad;
}

namespace testing {

void set_fault(Fault fault) { g_fault.store(fault); }
Fault current_fault() { return g_fault.load(); }

}  // namespace testing

#define TWOBP_INSTANTIATE_LAYERS(S)                                                                             \
  template struct ParamSet<S>;                                                                                  \
  template ParamSet<S> init_params(const LayerSpec&, std::uint64_t);                                            \
  template LayerForward<S> layer_forward(const LayerSpec&, const ParamSet<S>*, const Tensor<S>&, MicroBatchId); \
  template LayerBackwardP1<S> layer_backward_p1(const LayerSpec&, const ParamSet<S>*, const Tensor<S>&,        \
                                                ForwardCache<S>&, MicroBatchId);                                \
  template void layer_backward_p2(const LayerSpec&, ParamSet<S>&, P2Saved<S>&);                                 \
  template P2Saved<S> concat_saved(std::span<P2Saved<S>>);                                                      \
  template Tensor<S> layer_backward_full(const LayerSpec&, ParamSet<S>*, const Tensor<S>&, ForwardCache<S>&,   \
                                         MicroBatchId);                                                         \
  template LossResult<S> loss_forward_backward(const Tensor<S>&, std::span<const std::size_t>, double);         \
  template std::vector<double> finite_diff_grad(const std::function<double()>&, std::span<S>, double);

TWOBP_INSTANTIATE_LAYERS(float)
TWOBP_INSTANTIATE_LAYERS(double)

#undef TWOBP_INSTANTIATE_LAYERS

}  // namespace twobp
