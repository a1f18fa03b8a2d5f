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

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

namespace twobp {

namespace {

using Clock = std::chrono::steady_clock;

// Unwinds a worker after another worker failed or a deadlock was declared.
struct PipelineAborted {};

template <typename Scalar>
struct Message {
  MicroBatchId mb;
  Tensor<Scalar> payload;
};

int act_channel(int sender) { return 2 * sender; }
int grad_channel(int receiver) { return 2 * receiver + 1; }

std::string describe(const Instruction& ins) {
  std::string out(to_string(ins.kind));
  if (!ins.mbs.empty()) out += "(" + std::to_string(ins.mb()) + ")";
  return out;
}

/// Point-to-point FIFO channels between neighbouring ranks with an
/// all-blocked watchdog. A single lock covers every queue.
template <typename Scalar>
class Fabric {
 public:
  Fabric(int ranks, std::size_t capacity)
      : queues_(2 * static_cast<std::size_t>(ranks)),
        capacity_(capacity),
        waits_(static_cast<std::size_t>(ranks)),
        finished_(static_cast<std::size_t>(ranks), false) {}

  void send(int channel, int rank, Message<Scalar> msg, const std::string& what) {
    std::unique_lock lk(mu_);
    block_until(lk, rank, {true, channel, true, what},
                [&] { return queues_[static_cast<std::size_t>(channel)].size() < capacity_; });
    queues_[static_cast<std::size_t>(channel)].push_back(std::move(msg));
    cv_.notify_all();
  }

  Message<Scalar> recv(int channel, int rank, const std::string& what) {
    std::unique_lock lk(mu_);
    block_until(lk, rank, {true, channel, false, what},
                [&] { return !queues_[static_cast<std::size_t>(channel)].empty(); });
    auto& q = queues_[static_cast<std::size_t>(channel)];
    Message<Scalar> msg = std::move(q.front());
    q.pop_front();
    cv_.notify_all();
    return msg;
  }

  void finish(int rank) {
    std::lock_guard lk(mu_);
    finished_[static_cast<std::size_t>(rank)] = true;
    check_deadlock();
  }

  void fail(std::exception_ptr error) {
    std::lock_guard lk(mu_);
    if (!error_) error_ = std::move(error);
    aborted_ = true;
    cv_.notify_all();
  }

  std::exception_ptr error() const {
    std::lock_guard lk(mu_);
    return error_;
  }

 private:
  struct Wait {
    bool active = false;
    int channel = 0;
    bool sending = false;
    std::string what;
  };

  template <typename Ready>
  void block_until(std::unique_lock<std::mutex>& lk, int rank, Wait wait, Ready ready) {
    auto& slot = waits_[static_cast<std::size_t>(rank)];
    slot = std::move(wait);
    while (!aborted_ && !ready()) {
      check_deadlock();
      if (aborted_) break;
      cv_.wait(lk);
    }
    slot.active = false;
    if (aborted_) throw PipelineAborted{};
  }

  bool satisfiable(const Wait& w) const {
    const auto& q = queues_[static_cast<std::size_t>(w.channel)];
    return w.sending ? q.size() < capacity_ : !q.empty();
  }

  // Caller holds mu_.
  void check_deadlock() {
    if (aborted_) return;
    std::string report;
    bool any_waiting = false;
    for (std::size_t r = 0; r < waits_.size(); ++r) {
      if (finished_[r]) continue;
      if (!waits_[r].active || satisfiable(waits_[r])) return;
      any_waiting = true;
      report += (report.empty() ? "" : "; ") + std::string("rank ") + std::to_string(r) + " blocked on " +
                waits_[r].what;
    }
    if (!any_waiting) return;
    error_ = std::make_exception_ptr(DeadlockError("pipeline deadlock: " + report));
    aborted_ = true;
    cv_.notify_all();
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::deque<Message<Scalar>>> queues_;
  std::size_t capacity_;
  std::vector<Wait> waits_;
  std::vector<bool> finished_;
  std::exception_ptr error_;
  bool aborted_ = false;
};

template <typename Scalar>
ParamSet<Scalar>* params_of(Model<Scalar>& model, std::size_t layer) {
  return model.layers[layer].has_params() ? &model.params[layer] : nullptr;
}

template <typename Scalar>
Tensor<Scalar> take(std::map<MicroBatchId, Tensor<Scalar>>& store, MicroBatchId mb, const char* what) {
  auto it = store.find(mb);
  if (it == store.end()) throw std::logic_error(std::string(what) + " for micro-batch " + std::to_string(mb) + " missing");
  Tensor<Scalar> t = std::move(it->second);
  store.erase(it);
  return t;
}

/// Split of a mini-batch into M micro-batches along the batch dimension.
template <typename Scalar>
struct MicroBatches {
  std::vector<Tensor<Scalar>> inputs;
  std::vector<std::vector<std::size_t>> targets;
  double normalizer = 0;
};

template <typename Scalar>
MicroBatches<Scalar> split_micro_batches(const Batch<Scalar>& batch, std::size_t m) {
  const std::size_t samples = batch.inputs.rows();
  if (m == 0 || samples % m != 0) {
    throw std::invalid_argument("mini-batch of " + std::to_string(samples) + " samples is not divisible into " +
                                std::to_string(m) + " micro-batches");
  }
  if (batch.targets.size() % samples != 0) {
    throw std::invalid_argument("target count is not a multiple of the batch size");
  }
  MicroBatches<Scalar> out;
  out.inputs = split_batch(batch.inputs, m);
  const std::size_t chunk = batch.targets.size() / m;
  for (std::size_t i = 0; i < m; ++i) {
    out.targets.emplace_back(batch.targets.begin() + static_cast<std::ptrdiff_t>(i * chunk),
                             batch.targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * chunk));
  }
  out.normalizer = static_cast<double>(batch.targets.size());
  return out;
}

template <typename Scalar>
class Worker {
 public:
  Worker(int rank, int ranks, std::size_t micro_batches, Model<Scalar>& stage, OptimizerState<Scalar>& optimizer,
         const InstructionStream& stream, Fabric<Scalar>& fabric, const MicroBatches<Scalar>& data)
      : rank_(rank),
        last_(rank == ranks - 1),
        micro_batches_(micro_batches),
        stage_(stage),
        optimizer_(optimizer),
        stream_(stream),
        fabric_(fabric),
        data_(data) {}

  void run(Clock::time_point t0) {
    for (const auto& ins : stream_.ops) {
      const auto start = Clock::now();
      execute(ins);
      const auto end = Clock::now();
      trace_.push_back({rank_, ins.kind, ins.mbs, std::chrono::duration<double>(start - t0).count(),
                        std::chrono::duration<double>(end - t0).count()});
    }
  }

  double loss() const { return loss_; }
  GradSnapshot<Scalar>& grads() { return grads_; }
  Trace& trace() { return trace_; }

 private:
  void execute(const Instruction& ins) {
    switch (ins.kind) {
      case OpKind::LoadInput:
        staged_.insert_or_assign(ins.mb(), data_.inputs.at(static_cast<std::size_t>(ins.mb())));
        break;
      case OpKind::RecvAct: staged_.insert_or_assign(ins.mb(), receive(act_channel(rank_ - 1), ins)); break;
      case OpKind::Forward: forward(ins.mb()); break;
      case OpKind::SendAct:
        fabric_.send(act_channel(rank_), rank_, {ins.mb(), take(outputs_, ins.mb(), "activation")}, describe(ins));
        break;
      case OpKind::ComputeLoss: {
        auto logits = take(outputs_, ins.mb(), "logits");
        auto r = loss_forward_backward(logits, std::span<const std::size_t>(data_.targets.at(static_cast<std::size_t>(ins.mb()))),
                                       data_.normalizer);
        loss_ += r.loss;
        grad_in_.insert_or_assign(ins.mb(), std::move(r.dlogits));
        break;
      }
      case OpKind::RecvGrad: grad_in_.insert_or_assign(ins.mb(), receive(grad_channel(rank_), ins)); break;
      case OpKind::BackwardP1: backward(ins.mb(), true); break;
      case OpKind::BackwardFull: backward(ins.mb(), false); break;
      case OpKind::SendGrad:
        fabric_.send(grad_channel(rank_ - 1), rank_, {ins.mb(), take(grad_out_, ins.mb(), "input gradient")},
                     describe(ins));
        break;
      case OpKind::BackwardP2: backward_p2(ins.mbs, ins.mode); break;
      case OpKind::OptimizerStep: flush(); break;
    }
  }

  Tensor<Scalar> receive(int channel, const Instruction& ins) {
    auto msg = fabric_.recv(channel, rank_, describe(ins));
    if (msg.mb != ins.mb()) {
      throw std::logic_error("rank " + std::to_string(rank_) + ": " + describe(ins) + " received micro-batch " +
                             std::to_string(msg.mb) + " (FIFO order violated)");
    }
    return std::move(msg.payload);
  }

  void forward(MicroBatchId mb) {
    Tensor<Scalar> x = take(staged_, mb, "stage input");
    auto& caches = caches_[mb];
    for (std::size_t l = 0; l < stage_.layers.size(); ++l) {
      auto out = layer_forward(stage_.layers[l], params_of(stage_, l), x, mb);
      caches.push_back(std::move(out.cache));
      x = std::move(out.y);
    }
    outputs_.insert_or_assign(mb, std::move(x));
  }

  void backward(MicroBatchId mb, bool split) {
    Tensor<Scalar> dy = take(grad_in_, mb, "output gradient");
    auto node = caches_.extract(mb);
    if (node.empty()) throw std::logic_error("no forward cache for micro-batch " + std::to_string(mb));
    auto& caches = node.mapped();
    auto& saved = saved_[mb];
    if (split) saved.resize(stage_.layers.size());
    for (std::size_t l = stage_.layers.size(); l-- > 0;) {
      if (split) {
        auto r = layer_backward_p1(stage_.layers[l], params_of(stage_, l), dy, caches[l], mb);
        saved[l] = std::move(r.saved);
        dy = std::move(r.dx);
      } else {
        dy = layer_backward_full(stage_.layers[l], params_of(stage_, l), dy, caches[l], mb);
      }
    }
    if (!split) saved_.erase(mb);
    if (rank_ > 0) grad_out_.insert_or_assign(mb, std::move(dy));
  }

  void backward_p2(const std::vector<MicroBatchId>& mbs, B2Mode mode) {
    for (auto mb : mbs) {
      if (!saved_.contains(mb)) throw std::logic_error("BackwardP2 before BackwardP1 for micro-batch " + std::to_string(mb));
    }
    for (std::size_t l = stage_.layers.size(); l-- > 0;) {
      if (!stage_.layers[l].has_params()) continue;
      auto& params = stage_.params[l];
      if (mode == B2Mode::Loop) {
        for (auto mb : mbs) layer_backward_p2(stage_.layers[l], params, *saved_[mb][l]);
      } else {
        std::vector<P2Saved<Scalar>> parts;
        for (auto mb : mbs) parts.push_back(std::move(*saved_[mb][l]));
        auto merged = concat_saved(std::span<P2Saved<Scalar>>(parts));
        layer_backward_p2(stage_.layers[l], params, merged);
      }
    }
    for (auto mb : mbs) saved_.erase(mb);
  }

  void flush() {
    if (!saved_.empty() || !caches_.empty()) {
      throw std::logic_error("rank " + std::to_string(rank_) + ": intermediates survive the optimizer step");
    }
    for (std::size_t l = 0; l < stage_.layers.size(); ++l) {
      if (stage_.layers[l].has_params() && stage_.params[l].contributions != micro_batches_) {
        throw std::logic_error("rank " + std::to_string(rank_) + ": layer " + std::to_string(l) + " accumulated " +
                               std::to_string(stage_.params[l].contributions) + " of " +
                               std::to_string(micro_batches_) + " micro-batch gradients");
      }
    }
    grads_ = snapshot_grads(stage_);
    optimizer_step(optimizer_, stage_);
    stage_.zero_grad();
  }

  int rank_;
  bool last_;
  std::size_t micro_batches_;
  Model<Scalar>& stage_;
  OptimizerState<Scalar>& optimizer_;
  const InstructionStream& stream_;
  Fabric<Scalar>& fabric_;
  const MicroBatches<Scalar>& data_;

  std::map<MicroBatchId, Tensor<Scalar>> staged_, outputs_, grad_in_, grad_out_;
  std::map<MicroBatchId, std::vector<ForwardCache<Scalar>>> caches_;
  std::map<MicroBatchId, std::vector<std::optional<P2Saved<Scalar>>>> saved_;
  double loss_ = 0;
  GradSnapshot<Scalar> grads_;
  Trace trace_;
};

}  // namespace

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::SGD ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd") return OptimizerKind::SGD;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

template <typename Scalar>
void optimizer_step(OptimizerState<Scalar>& state, Model<Scalar>& model) {
  const auto& cfg = state.config;
  ++state.step;
  std::size_t index = 0;
  for (auto& params : model.params) {
    for (auto& p : params.tensors) {
      if (p.value.shape() != p.grad.shape()) throw ShapeError("optimizer: gradient shape differs from parameter");
      if (cfg.kind == OptimizerKind::SGD) {
        p.value.array() -= static_cast<Scalar>(cfg.lr) * p.grad.array();
        continue;
      }
      if (state.m.size() <= index) {
        state.m.push_back(Tensor<Scalar>(p.value.shape()));
        state.v.push_back(Tensor<Scalar>(p.value.shape()));
      }
      auto& m = state.m[index];
      auto& v = state.v[index];
      const auto b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
      m.array() = b1 * m.array() + (Scalar(1) - b1) * p.grad.array();
      v.array() = b2 * v.array() + (Scalar(1) - b2) * p.grad.array().square();
      const auto c1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
      const auto c2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
      p.value.array() -= static_cast<Scalar>(cfg.lr) * (m.array() / c1) /
                         ((v.array() / c2).sqrt() + static_cast<Scalar>(cfg.eps));
      ++index;
    }
  }
}

template <typename Scalar>
StepResult<Scalar> run_pipeline(std::vector<Model<Scalar>>& stages, std::vector<OptimizerState<Scalar>>& optimizers,
                                 std::span<const InstructionStream> streams, const Batch<Scalar>& batch,
                                 const PipelineOptions& options) {
  const int ranks = static_cast<int>(streams.size());
  if (ranks == 0 || stages.size() != streams.size() || optimizers.size() != streams.size()) {
    throw std::invalid_argument("run_pipeline: need one stage, optimizer and stream per rank");
  }
  std::size_t micro_batches = 0;
  for (const auto& ins : streams[0].ops) micro_batches += ins.kind == OpKind::Forward ? 1 : 0;
  if (options.validate) {
    if (auto violation = validate_schedule(streams, static_cast<int>(micro_batches))) {
      throw ScheduleError("invalid schedule: " + violation->describe());
    }
  }
  const auto data = split_micro_batches(batch, micro_batches);

  Fabric<Scalar> fabric(ranks, options.channel_capacity ? options.channel_capacity : micro_batches);
  std::vector<Worker<Scalar>> workers;
  workers.reserve(streams.size());
  for (int r = 0; r < ranks; ++r) {
    workers.emplace_back(r, ranks, micro_batches, stages[static_cast<std::size_t>(r)],
                         optimizers[static_cast<std::size_t>(r)], streams[static_cast<std::size_t>(r)], fabric, data);
  }

  const auto t0 = Clock::now();
  {
    std::vector<std::jthread> threads;
    for (int r = 0; r < ranks; ++r) {
      threads.emplace_back([&, r] {
        try {
          workers[static_cast<std::size_t>(r)].run(t0);
          fabric.finish(r);
        } catch (const PipelineAborted&) {
        } catch (...) {
          fabric.fail(std::current_exception());
        }
      });
    }
  }
  const double wall = std::chrono::duration<double>(Clock::now() - t0).count();
  if (auto error = fabric.error()) std::rethrow_exception(error);

  StepResult<Scalar> result;
  result.wall_seconds = wall;
  for (auto& w : workers) {
    auto& g = w.grads();
    result.grads.insert(result.grads.end(), std::make_move_iterator(g.begin()), std::make_move_iterator(g.end()));
    result.trace.insert(result.trace.end(), w.trace().begin(), w.trace().end());
  }
  result.loss = workers.back().loss();
  return result;
}

template <typename Scalar>
ReferenceResult<Scalar> run_reference(const Model<Scalar>& model, const Batch<Scalar>& batch,
                                      std::size_t micro_batches) {
  Model<Scalar> work = model;
  work.zero_grad();
  const auto data = split_micro_batches(batch, micro_batches);
  ReferenceResult<Scalar> result;
  for (std::size_t m = 0; m < micro_batches; ++m) {
    const auto mb = static_cast<MicroBatchId>(m);
    Tensor<Scalar> x = data.inputs[m];
    std::vector<ForwardCache<Scalar>> caches;
    for (std::size_t l = 0; l < work.layers.size(); ++l) {
      auto out = layer_forward(work.layers[l], params_of(work, l), x, mb);
      caches.push_back(std::move(out.cache));
      x = std::move(out.y);
    }
    auto loss = loss_forward_backward(x, std::span<const std::size_t>(data.targets[m]), data.normalizer);
    result.loss += loss.loss;
    Tensor<Scalar> dy = std::move(loss.dlogits);
    for (std::size_t l = work.layers.size(); l-- > 0;) {
      dy = layer_backward_full(work.layers[l], params_of(work, l), dy, caches[l], mb);
    }
  }
  result.grads = snapshot_grads(work);
  return result;
}

template <typename Scalar>
double evaluate_loss(const Model<Scalar>& model, const Batch<Scalar>& batch) {
  Tensor<Scalar> x = batch.inputs;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const ParamSet<Scalar>* params = model.layers[l].has_params() ? &model.params[l] : nullptr;
    x = layer_forward(model.layers[l], params, x).y;
  }
  return loss_forward_backward(x, std::span<const std::size_t>(batch.targets)).loss;
}

template <typename Scalar>
GradSnapshot<Scalar> finite_diff_model_grads(Model<Scalar>& model, const Batch<Scalar>& batch, double eps) {
  GradSnapshot<Scalar> out;
  for (auto& params : model.params) {
    auto& layer = out.emplace_back();
    for (auto& p : params.tensors) {
      auto numeric = finite_diff_grad<Scalar>([&] { return evaluate_loss(model, batch); }, p.value.data(), eps);
      Tensor<Scalar> g(p.value.shape());
      for (std::size_t i = 0; i < numeric.size(); ++i) g[i] = static_cast<Scalar>(numeric[i]);
      layer.push_back(std::move(g));
    }
  }
  return out;
}

#define TWOBP_INSTANTIATE_EXECUTOR(S)                                                                       \
  template void optimizer_step(OptimizerState<S>&, Model<S>&);                                              \
  template StepResult<S> run_pipeline(std::vector<Model<S>>&, std::vector<OptimizerState<S>>&,              \
                                      std::span<const InstructionStream>, const Batch<S>&,                  \
                                      const PipelineOptions&);                                              \
  template ReferenceResult<S> run_reference(const Model<S>&, const Batch<S>&, std::size_t);                 \
  template double evaluate_loss(const Model<S>&, const Batch<S>&);                                          \
  template GradSnapshot<S> finite_diff_model_grads(Model<S>&, const Batch<S>&, double);

TWOBP_INSTANTIATE_EXECUTOR(float)
TWOBP_INSTANTIATE_EXECUTOR(double)

#undef TWOBP_INSTANTIATE_EXECUTOR

}  // namespace twobp
