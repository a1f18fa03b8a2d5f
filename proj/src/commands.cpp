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

#include "twobp/commands.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "twobp/executor.hpp"

namespace twobp {

namespace {

namespace fs = std::filesystem;

std::ofstream open_output(const RunConfig& config, const std::string& name) {
  fs::create_directories(config.out);
  const auto path = fs::path(config.out) / name;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

Schedule checked_schedule(const RunConfig& config) {
  auto schedule = generate_schedule(config.schedule());
  if (auto violation = validate_schedule(schedule)) {
    throw ScheduleError("generated schedule is invalid: " + violation->describe());
  }
  return schedule;
}

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  if (n == 0) return 0;
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

class Fnv1a {
 public:
  template <typename Scalar>
  void add(const Tensor<Scalar>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.size() * sizeof(Scalar); ++i) {
      hash_ ^= bytes[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

template <typename Scalar>
TrainSummary train_impl(const RunConfig& config) {
  const auto schedule = checked_schedule(config);
  const auto plan = build_model(config.model_config());
  const auto batch_size = config.resolved_batch_size();
  const auto batch = synthetic_batch<Scalar>(batch_size, config.seq, config.width, config.classes, config.seed + 1);

  TrainSummary summary;
  double bubble_sum = 0;
  std::size_t bubble_count = 0;
  std::vector<Model<Scalar>> stages;
  GradSnapshot<Scalar> last_grads;
  for (std::size_t rep = 0; rep < config.repeats; ++rep) {
    stages = instantiate_stages<Scalar>(plan, config.seed);
    OptimizerState<Scalar> fresh;
    fresh.config = config.optimizer;
    std::vector<OptimizerState<Scalar>> optimizers(stages.size(), fresh);
    double seconds = 0;
    for (std::size_t step = 0; step < config.steps; ++step) {
      auto result = run_pipeline(stages, optimizers, std::span<const InstructionStream>(schedule), batch);
      seconds += result.wall_seconds;
      if (rep == 0) summary.losses.push_back(result.loss);
      bubble_sum += bubble_ratio_from_trace(result.trace);
      ++bubble_count;
      last_grads = std::move(result.grads);
      summary.last_trace = std::move(result.trace);
    }
    summary.throughput.push_back(static_cast<double>(config.steps * batch_size) / seconds);
  }
  summary.median_throughput = median(summary.throughput);
  summary.bubble_ratio = bubble_sum / static_cast<double>(bubble_count);

  Fnv1a params, grads;
  for (const auto& stage : stages) {
    for (const auto& set : stage.params) {
      for (const auto& p : set.tensors) params.add(p.value);
    }
  }
  for (const auto& layer : last_grads) {
    for (const auto& g : layer) grads.add(g);
  }
  summary.param_checksum = params.value();
  summary.grad_checksum = grads.value();
  return summary;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << "0x" << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> value(-1.0, 1.0);
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = value(rng);
  return t;
}

Tensor<double> as_tensor(const Shape& shape, const std::vector<double>& values) {
  return Tensor<double>(shape, values);
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void layer_fd_checks(const LayerSpec& spec, const Shape& input_shape, std::mt19937_64& rng,
                     std::vector<CheckResult>& out) {
  constexpr double kTol = 1e-5;
  const std::string name(to_string(spec.kind));
  auto params = init_params<double>(spec, rng());
  // Non-trivial gain so RMSNorm's parameter gradient is not a special case.
  if (spec.kind == LayerKind::RMSNorm) {
    for (auto& v : params.get("gain").value.data()) v = 0.5 + 0.5 * std::uniform_real_distribution<double>()(rng);
  }
  ParamSet<double>* p = spec.has_params() ? &params : nullptr;
  auto x = random_tensor(input_shape, rng);
  auto fwd = layer_forward(spec, p, x);
  const auto probe = random_tensor(fwd.y.shape(), rng);
  auto objective = [&] { return dot(layer_forward(spec, p, x).y, probe); };

  auto back = layer_backward_p1(spec, p, probe, fwd.cache);
  const auto dx_fd = finite_diff_grad<double>(objective, x.data());
  const double e1 = max_relative_error(back.dx, as_tensor(x.shape(), dx_fd), 1e-12);
  out.push_back({name + " backward-p1", e1, kTol, e1 <= kTol});

  if (!p) return;
  params.zero_grad();
  layer_backward_p2(spec, params, *back.saved);
  for (auto& param : params.tensors) {
    const auto fd = finite_diff_grad<double>(objective, param.value.data());
    const double e2 = max_relative_error(param.grad, as_tensor(param.value.shape(), fd), 1e-12);
    out.push_back({name + " backward-p2 " + param.name, e2, kTol, e2 <= kTol});
  }
}

struct FaultGuard {
  explicit FaultGuard(testing::Fault fault) { testing::set_fault(fault); }
  ~FaultGuard() { testing::set_fault(testing::Fault::None); }
};

}  // namespace

ReportRow simulate_row(const RunConfig& config) {
  config.validate();
  const auto schedule = checked_schedule(config);
  const auto costs = config.cost_model();
  const auto report = bubble_report(simulate_timeline(schedule, costs));

  ReportRow row;
  row.kind = config.kind;
  row.ranks = config.ranks;
  row.micro_batches = config.schedule().resolved_micro_batches();
  row.two_bp = config.two_bp;
  row.bubble_ratio = report.bubble_ratio;
  if (config.two_bp) {
    RunConfig base = config;
    base.two_bp = false;
    if (base.kind == ScheduleKind::OneFOneB2MemEff) base.kind = ScheduleKind::OneFOneB2;
    const auto without = bubble_ratio_from_timeline(simulate_timeline(checked_schedule(base), costs));
    row.gain = throughput_gain(without, report.bubble_ratio);
  }
  MemoryModel memory;
  memory.default_release = config.release;
  const auto peaks = peak_memory(schedule, memory);
  row.peak_act = peaks.activation;
  row.peak_ideriv = peaks.interm_deriv;
  return row;
}

TrainSummary train(const RunConfig& config, Precision precision) {
  config.validate();
  return precision == Precision::Single ? train_impl<float>(config) : train_impl<double>(config);
}

std::pair<TrainSummary, TrainSummary> compare_two_bp(const RunConfig& config, Precision precision) {
  RunConfig without = config, with = config;
  without.two_bp = false;
  if (without.kind == ScheduleKind::OneFOneB2MemEff) without.kind = ScheduleKind::OneFOneB2;
  with.two_bp = true;
  without.repeats = with.repeats = 1;
  TrainSummary a, b;
  for (std::size_t rep = 0; rep < config.repeats; ++rep) {
    auto merge = [rep](TrainSummary& into, TrainSummary run) {
      if (rep == 0) {
        into = std::move(run);
        return;
      }
      into.throughput.push_back(run.throughput.front());
      into.bubble_ratio += run.bubble_ratio;
      into.last_trace = std::move(run.last_trace);
    };
    merge(a, train(without, precision));
    merge(b, train(with, precision));
  }
  for (auto* s : {&a, &b}) {
    s->median_throughput = median(s->throughput);
    s->bubble_ratio /= static_cast<double>(config.repeats);
  }
  return {std::move(a), std::move(b)};
}

double measured_gain(const TrainSummary& without, const TrainSummary& with) {
  return with.median_throughput / without.median_throughput;
}

std::vector<CheckResult> equivalence_grid(const RunConfig& config) {
  constexpr double kConcatTol = 1e-12;
  std::vector<CheckResult> out;
  for (auto kind : {ScheduleKind::Naive, ScheduleKind::GPipe, ScheduleKind::OneFOneB1, ScheduleKind::OneFOneB2,
                    ScheduleKind::OneFOneB2MemEff}) {
    for (int ranks : {1, 2, 4}) {
      for (bool two_bp : {false, true}) {
        if (kind == ScheduleKind::OneFOneB2MemEff && !two_bp) continue;
        for (auto mode : {B2Mode::Loop, B2Mode::Concat}) {
          if (!two_bp && mode == B2Mode::Concat) continue;
          RunConfig point = config;
          point.kind = kind;
          point.ranks = ranks;
          point.micro_batches = 0;
          point.two_bp = two_bp;
          point.b2_mode = mode;
          point.stage_boundaries.clear();
          point.batch_size = 0;
          point.validate();

          const auto schedule = checked_schedule(point);
          auto stages = instantiate_stages<double>(build_model(point.model_config()), point.seed);
          const auto full = merge_stages<double>(stages);
          const auto m = static_cast<std::size_t>(point.schedule().resolved_micro_batches());
          const auto batch =
              synthetic_batch<double>(point.resolved_batch_size(), point.seq, point.width, point.classes, point.seed + 1);
          const auto reference = run_reference(full, batch, m);
          std::vector<OptimizerState<double>> optimizers(stages.size());
          const auto result = run_pipeline(stages, optimizers, std::span<const InstructionStream>(schedule), batch);

          std::string label = std::string(to_string(kind)) + " P=" + std::to_string(ranks) +
                              (two_bp ? std::string(" 2bp ") + std::string(to_string(mode)) : " no-2bp");
          const double error = max_relative_error(result.grads, reference.grads);
          const bool exact = !two_bp || mode == B2Mode::Loop;
          const bool passed = exact ? bit_identical(result.grads, reference.grads) : error <= kConcatTol;
          out.push_back({label, error, exact ? 0.0 : kConcatTol, passed});
        }
      }
    }
  }
  return out;
}

std::vector<CheckResult> finite_difference_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  const Shape tokens{2, 3, 4};
  layer_fd_checks(LayerSpec::linear(4, 3), tokens, rng, out);
  layer_fd_checks(LayerSpec::relu(4), tokens, rng, out);
  layer_fd_checks(LayerSpec::rms_norm(4), tokens, rng, out);
  layer_fd_checks(LayerSpec::attention(4), tokens, rng, out);

  {
    auto logits = random_tensor({6, 5}, rng);
    std::vector<std::size_t> targets{0, 4, 2, 2, 1, 3};
    auto analytic = loss_forward_backward(logits, std::span<const std::size_t>(targets)).dlogits;
    const auto fd = finite_diff_grad<double>(
        [&] { return loss_forward_backward(logits, std::span<const std::size_t>(targets)).loss; }, logits.data());
    const double e = max_relative_error(analytic, as_tensor(logits.shape(), fd), 1e-12);
    out.push_back({"SoftmaxCrossEntropy backward", e, 1e-5, e <= 1e-5});
  }

  {
    const std::vector<LayerSpec> probe{LayerSpec::linear(4, 6), LayerSpec::rms_norm(6), LayerSpec::linear(6, 3)};
    auto model = instantiate<double>(probe, seed);
    const auto batch = synthetic_batch<double>(4, 0, 4, 3, seed + 1);
    const auto reference = run_reference(model, batch, 2);
    const auto fd = finite_diff_model_grads(model, batch);
    const double e = max_relative_error(reference.grads, fd);
    out.push_back({"3-layer probe model reference", e, 1e-5, e <= 1e-5});
  }
  return out;
}

int cmd_simulate(const RunConfig& config, std::ostream& out) {
  const auto row = simulate_row(config);
  const auto schedule = checked_schedule(config);
  const auto trace = to_trace(simulate_timeline(schedule, config.cost_model()));

  auto trace_file = open_output(config, "trace.jsonl");
  write_trace_jsonl(trace_file, trace);
  auto csv = open_output(config, "report.csv");
  write_report_csv(csv, std::span<const ReportRow>(&row, 1));
  open_output(config, "report.json") << report_json(std::span<const ReportRow>(&row, 1)) << '\n';
  open_output(config, "schedule.svg") << gantt_svg(trace, config.ranks);

  auto list = [](const std::vector<Rational>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i].str();
    return s;
  };
  out << "kind=" << to_string(row.kind) << " P=" << row.ranks << " M=" << row.micro_batches
      << " two_bp=" << (row.two_bp ? 1 : 0) << " bubble_ratio=" << row.bubble_ratio.to_double() << " ("
      << row.bubble_ratio << ") gain=" << row.gain.to_double() << " (" << row.gain << ")\n"
      << "peak_act=[" << list(row.peak_act) << "] peak_ideriv=[" << list(row.peak_ideriv) << "]\n"
      << "wrote trace.jsonl report.csv report.json schedule.svg to " << config.out << '\n';
  return 0;
}

int cmd_train(const RunConfig& config, std::ostream& out) {
  const auto precision = precision_from_env();
  auto describe = [&](const RunConfig& c, const TrainSummary& s) {
    out << "kind=" << to_string(c.kind) << " P=" << c.ranks << " M=" << c.schedule().resolved_micro_batches()
        << " two_bp=" << (c.two_bp ? 1 : 0) << " b2_mode=" << to_string(c.b2_mode)
        << " batch=" << c.resolved_batch_size() << " steps=" << c.steps << " repeats=" << c.repeats << '\n'
        << "  loss first=" << s.losses.front() << " last=" << s.losses.back() << '\n'
        << "  throughput=" << s.median_throughput << " samples/s (median over repeats)\n"
        << "  bubble_ratio=" << s.bubble_ratio << " (measured)\n"
        << "  param_checksum=" << hex(s.param_checksum) << " grad_checksum=" << hex(s.grad_checksum) << '\n';
  };

  TrainSummary summary;
  nlohmann::json report;
  if (config.compare_2bp) {
    RunConfig without = config, with = config;
    without.two_bp = false;
    if (without.kind == ScheduleKind::OneFOneB2MemEff) without.kind = ScheduleKind::OneFOneB2;
    with.two_bp = true;
    const auto [base, with_2bp] = compare_two_bp(config, precision);
    describe(without, base);
    summary = with_2bp;
    describe(with, summary);
    const double gain = measured_gain(base, summary);
    out << "gain=" << gain << " (2BP throughput / non-2BP throughput)\n";
    report["throughput_without_2bp"] = base.median_throughput;
    report["gain"] = gain;
  } else {
    summary = train(config, precision);
    describe(config, summary);
  }

  auto losses = open_output(config, "losses.csv");
  losses << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < summary.losses.size(); ++i) losses << i << ',' << summary.losses[i] << '\n';
  auto trace = open_output(config, "trace.jsonl");
  write_trace_jsonl(trace, summary.last_trace);
  report["throughput"] = summary.median_throughput;
  report["throughput_per_repeat"] = summary.throughput;
  report["bubble_ratio"] = summary.bubble_ratio;
  report["param_checksum"] = hex(summary.param_checksum);
  report["grad_checksum"] = hex(summary.grad_checksum);
  report["losses"] = summary.losses;
  open_output(config, "train.json") << report.dump(2) << '\n';
  out << "wrote losses.csv trace.jsonl train.json to " << config.out << '\n';
  return 0;
}

int cmd_verify(const RunConfig& config, std::ostream& out) {
  if (precision_from_env() != Precision::Double) throw ConfigError("verify runs in double precision only");
  testing::Fault fault = testing::Fault::None;
  if (config.inject_fault == "rmsnorm-p2-sign") {
    fault = testing::Fault::RmsNormP2WrongSign;
  } else if (!config.inject_fault.empty()) {
    throw ConfigError("unknown fault '" + config.inject_fault + "' (expected rmsnorm-p2-sign)");
  }
  FaultGuard guard(fault);

  auto checks = equivalence_grid(config);
  const auto fd = finite_difference_suite(config.seed);
  checks.insert(checks.end(), fd.begin(), fd.end());

  std::size_t failed = 0;
  for (const auto& c : checks) {
    out << (c.passed ? "ok   " : "FAIL ") << c.label << " max_rel_err=" << c.error << " tol=" << c.tolerance
        << '\n';
    failed += c.passed ? 0 : 1;
  }
  out << "verify: " << checks.size() << " checks, " << failed << " failed\n";
  for (const auto& c : checks) {
    if (!c.passed) out << "breach: " << c.label << '\n';
  }
  return failed ? 1 : 0;
}

int cmd_gantt(const RunConfig& config, std::ostream& out) {
  Trace trace;
  int ranks = 0;
  if (!config.trace.empty()) {
    std::ifstream in(config.trace);
    if (!in) throw ConfigError("cannot open trace '" + config.trace + "'");
    trace = read_trace_jsonl(in);
  } else {
    config.validate();
    trace = to_trace(simulate_timeline(checked_schedule(config), config.cost_model()));
    ranks = config.ranks;
  }
  open_output(config, "schedule.svg") << gantt_svg(trace, ranks);
  out << "wrote " << (fs::path(config.out) / "schedule.svg").string() << '\n';
  return 0;
}

}  // namespace twobp
