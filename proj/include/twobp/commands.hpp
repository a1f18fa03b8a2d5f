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

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "twobp/report.hpp"
#include "twobp/run_config.hpp"

namespace twobp {

/// Simulated bubble, 2BP gain against the same schedule without 2BP (1 for
/// rows without 2BP) and unit memory peaks for one configuration.
ReportRow simulate_row(const RunConfig& config);

struct TrainSummary {
  std::vector<double> losses;  // per step, first repeat
  /// Samples per second for each repeat (all steps of the repeat).
  std::vector<double> throughput;
  double median_throughput = 0;
  /// Mean measured bubble ratio over every step of every repeat.
  double bubble_ratio = 0;
  /// FNV-1a over the bytes of the final parameters / last step's gradients.
  std::uint64_t param_checksum = 0;
  std::uint64_t grad_checksum = 0;
  Trace last_trace;
};

/// Seeded synthetic training run: `repeats` times, fresh parameters and
/// `steps` pipeline steps over one fixed synthetic batch.
TrainSummary train(const RunConfig& config, Precision precision);

/// Trains without and with 2BP (1F1B-2 for the memory-efficient kind),
/// alternating single repeats so slow drift on the host affects both equally.
std::pair<TrainSummary, TrainSummary> compare_two_bp(const RunConfig& config, Precision precision);

/// Median throughput with 2BP over median throughput without it.
double measured_gain(const TrainSummary& without, const TrainSummary& with);

struct CheckResult {
  std::string label;
  double error = 0;
  double tolerance = 0;
  bool passed = false;
};

/// Pipeline against reference for every schedule kind, P in {1,2,4}, with and
/// without 2BP and both backward-p2 modes. Loop mode must be bit-exact,
/// concat within 1e-12 relative (double).
std::vector<CheckResult> equivalence_grid(const RunConfig& config);

/// Backward-p1 and backward-p2 of every layer kind (and the loss) against
/// central differences, plus whole-model gradients of a 3-layer probe model.
/// Tolerance 1e-5 relative.
std::vector<CheckResult> finite_difference_suite(std::uint64_t seed);

/// Subcommands. Each writes its files under config.out, prints a summary to
/// `out` and returns the process exit code. Invalid configurations throw.
int cmd_simulate(const RunConfig& config, std::ostream& out);
int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_verify(const RunConfig& config, std::ostream& out);
int cmd_gantt(const RunConfig& config, std::ostream& out);

}  // namespace twobp
