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

#include "twobp/model.hpp"

#include <algorithm>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>

namespace twobp {

namespace {

std::uint64_t block_seed(std::uint64_t seed, std::size_t block) {
  // splitmix64 step keeps neighbouring blocks decorrelated.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (block + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<std::size_t> uniform_boundaries(std::size_t blocks, std::size_t stages) {
  if (stages == 0 || stages > blocks) {
    throw std::invalid_argument("cannot split " + std::to_string(blocks) + " blocks into " + std::to_string(stages) +
                                " stages");
  }
  std::vector<std::size_t> bounds;
  std::size_t end = 0;
  for (std::size_t s = 0; s < stages; ++s) {
    end += blocks / stages + (s < blocks % stages ? 1 : 0);
    bounds.push_back(end);
  }
  return bounds;
}

std::vector<StagePlan> build_model(const ModelConfig& config) {
  std::vector<LayerSpec> blocks = config.blocks;
  if (!blocks.empty() && blocks.back().kind == LayerKind::SoftmaxCrossEntropy) {
    if (blocks.size() > 1 && blocks[blocks.size() - 2].out_features != blocks.back().in_features) {
      throw std::invalid_argument("loss head expects " + std::to_string(blocks.back().in_features) + " classes");
    }
    blocks.pop_back();
  }
  if (blocks.empty()) throw std::invalid_argument("model has no blocks");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].kind == LayerKind::SoftmaxCrossEntropy) {
      throw std::invalid_argument("SoftmaxCrossEntropy may only appear as the final block");
    }
    if (i > 0 && blocks[i - 1].out_features != blocks[i].in_features) {
      throw std::invalid_argument("block " + std::to_string(i - 1) + " outputs " +
                                  std::to_string(blocks[i - 1].out_features) + " features but block " +
                                  std::to_string(i) + " expects " + std::to_string(blocks[i].in_features));
    }
  }
  std::vector<std::size_t> bounds = config.stage_boundaries;
  if (bounds.empty()) bounds.push_back(blocks.size());
  std::vector<StagePlan> plan;
  std::size_t begin = 0;
  for (std::size_t s = 0; s < bounds.size(); ++s) {
    if (bounds[s] <= begin || bounds[s] > blocks.size()) {
      throw std::invalid_argument("stage boundaries must be strictly increasing within [1, " +
                                  std::to_string(blocks.size()) + "]");
    }
    plan.push_back({begin, std::vector<LayerSpec>(blocks.begin() + static_cast<std::ptrdiff_t>(begin),
                                                  blocks.begin() + static_cast<std::ptrdiff_t>(bounds[s]))});
    begin = bounds[s];
  }
  if (begin != blocks.size()) {
    throw std::invalid_argument("stage boundaries cover " + std::to_string(begin) + " of " +
                                std::to_string(blocks.size()) + " blocks");
  }
  return plan;
}

template <typename Scalar>
void Model<Scalar>::zero_grad() {
  for (auto& p : params) p.zero_grad();
}

template <typename Scalar>
std::size_t Model<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) {
    for (const auto& t : p.tensors) n += t.value.size();
  }
  return n;
}

template <typename Scalar>
Model<Scalar> instantiate(std::span<const LayerSpec> layers, std::uint64_t seed, std::size_t first_block) {
  Model<Scalar> model;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    model.layers.push_back(layers[i]);
    model.params.push_back(init_params<Scalar>(layers[i], block_seed(seed, first_block + i)));
  }
  return model;
}

template <typename Scalar>
std::vector<Model<Scalar>> instantiate_stages(std::span<const StagePlan> plan, std::uint64_t seed) {
  std::vector<Model<Scalar>> stages;
  for (const auto& stage : plan) stages.push_back(instantiate<Scalar>(stage.layers, seed, stage.first_block));
  return stages;
}

template <typename Scalar>
Model<Scalar> merge_stages(std::span<const Model<Scalar>> stages) {
  Model<Scalar> model;
  for (const auto& s : stages) {
    model.layers.insert(model.layers.end(), s.layers.begin(), s.layers.end());
    model.params.insert(model.params.end(), s.params.begin(), s.params.end());
  }
  return model;
}

std::vector<LayerSpec> toy_transformer_blocks(std::size_t blocks, std::size_t width, std::size_t classes) {
  if (blocks == 0) throw std::invalid_argument("toy model needs at least one block");
  std::vector<LayerSpec> out;
  for (std::size_t i = 0; i + 1 < blocks; ++i) {
    switch (i % 4) {
      case 0: out.push_back(LayerSpec::linear(width, width)); break;
      case 1: out.push_back(LayerSpec::relu(width)); break;
      case 2: out.push_back(LayerSpec::rms_norm(width)); break;
      case 3: out.push_back(LayerSpec::attention(width)); break;
    }
  }
  out.push_back(LayerSpec::linear(width, classes));
  return out;
}

std::vector<LayerSpec> toy_mlp_blocks(std::size_t blocks, std::size_t width, std::size_t classes) {
  if (blocks == 0) throw std::invalid_argument("toy model needs at least one block");
  std::vector<LayerSpec> out;
  for (std::size_t i = 0; i + 1 < blocks; ++i) {
    out.push_back(i % 2 == 0 ? LayerSpec::linear(width, width) : LayerSpec::relu(width));
  }
  out.push_back(LayerSpec::linear(width, classes));
  return out;
}

template <typename Scalar>
Batch<Scalar> synthetic_batch(std::size_t batch, std::size_t seq, std::size_t features, std::size_t classes,
                              std::uint64_t seed, bool teacher) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> value(-1.0, 1.0);
  Shape shape = seq > 0 ? Shape{batch, seq, features} : Shape{batch, features};
  Tensor<Scalar> inputs(shape);
  for (auto& v : inputs.data()) v = static_cast<Scalar>(value(rng));
  const std::size_t rows = inputs.size() / features;
  std::vector<std::size_t> targets(rows);
  if (teacher) {
    std::vector<double> map(classes * features);
    for (auto& w : map) w = value(rng);
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t best = 0;
      double best_score = -1e300;
      for (std::size_t c = 0; c < classes; ++c) {
        double score = 0;
        for (std::size_t j = 0; j < features; ++j) score += map[c * features + j] * inputs[r * features + j];
        if (score > best_score) {
          best_score = score;
          best = c;
        }
      }
      targets[r] = best;
    }
  } else {
    std::uniform_int_distribution<std::size_t> cls(0, classes - 1);
    for (auto& t : targets) t = cls(rng);
  }
  return {std::move(inputs), std::move(targets)};
}

template <typename Scalar>
GradSnapshot<Scalar> snapshot_grads(const Model<Scalar>& model) {
  GradSnapshot<Scalar> snap;
  for (const auto& p : model.params) {
    auto& layer = snap.emplace_back();
    for (const auto& t : p.tensors) layer.push_back(t.grad);
  }
  return snap;
}

template <typename Scalar>
double max_relative_error(const GradSnapshot<Scalar>& a, const GradSnapshot<Scalar>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("gradient snapshots have different layer counts");
  double worst = 0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].size() != b[l].size()) throw std::invalid_argument("gradient snapshots differ at layer " + std::to_string(l));
    for (std::size_t i = 0; i < a[l].size(); ++i) worst = std::max(worst, max_relative_error(a[l][i], b[l][i]));
  }
  return worst;
}

template <typename Scalar>
bool bit_identical(const GradSnapshot<Scalar>& a, const GradSnapshot<Scalar>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].size() != b[l].size()) return false;
    for (std::size_t i = 0; i < a[l].size(); ++i) {
      const auto& x = a[l][i];
      const auto& y = b[l][i];
      if (x.shape() != y.shape() || std::memcmp(x.data().data(), y.data().data(), x.size() * sizeof(Scalar)) != 0) {
        return false;
      }
    }
  }
  return true;
}

#define TWOBP_INSTANTIATE_MODEL(S)                                                                 \
  template struct Model<S>;                                                                        \
  template Model<S> instantiate(std::span<const LayerSpec>, std::uint64_t, std::size_t);           \
  template std::vector<Model<S>> instantiate_stages(std::span<const StagePlan>, std::uint64_t);    \
  template Model<S> merge_stages(std::span<const Model<S>>);                                       \
  template Batch<S> synthetic_batch(std::size_t, std::size_t, std::size_t, std::size_t,            \
                                    std::uint64_t, bool);                                          \
  template GradSnapshot<S> snapshot_grads(const Model<S>&);                                        \
  template double max_relative_error(const GradSnapshot<S>&, const GradSnapshot<S>&);              \
  template bool bit_identical(const GradSnapshot<S>&, const GradSnapshot<S>&);

TWOBP_INSTANTIATE_MODEL(float)
TWOBP_INSTANTIATE_MODEL(double)

#undef TWOBP_INSTANTIATE_MODEL

}  // namespace twobp
