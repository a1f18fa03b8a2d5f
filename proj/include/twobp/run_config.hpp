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

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "twobp/analysis.hpp"
#include "twobp/executor.hpp"
#include "twobp/model.hpp"
#include "twobp/schedule.hpp"

namespace twobp {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Precision { Single, Double };

/// Reads TWOBP_PRECISION (single|double); unset means double.
Precision precision_from_env();

/// Everything a CLI command needs. Keys of the JSON config file are the field
/// names below; CLI flags use the same names with '-' for '_'.
struct RunConfig {
  ScheduleKind kind = ScheduleKind::OneFOneB1;
  int ranks = 4;
  int micro_batches = 0;  // 0: schedule default
  bool two_bp = false;
  B2Mode b2_mode = B2Mode::Concat;

  std::string model = "transformer";  // transformer | mlp
  std::size_t blocks = 8;
  std::size_t width = 16;
  std::size_t seq = 4;  // tokens per sample; 0 gives rank-2 inputs (mlp only)
  std::size_t classes = 8;
  std::vector<std::size_t> stage_boundaries;  // empty: spread blocks evenly

  OptimizerConfig optimizer;
  std::size_t batch_size = 0;  // 0: 2 samples per micro-batch
  std::uint64_t seed = 0;

  std::optional<Rational> t_f, t_b1, t_b2;
  Rational t_comm{0};
  Rational release{0};  // activation share freed at BackwardP1

  std::size_t steps = 1;
  std::size_t repeats = 1;
  bool compare_2bp = false;
  std::string out = ".";
  std::string trace;         // gantt: read this trace instead of simulating
  std::string inject_fault;  // verify: "rmsnorm-p2-sign"

  ScheduleConfig schedule() const;
  ModelConfig model_config() const;
  CostModel cost_model() const;
  std::size_t resolved_batch_size() const;
  /// Throws ConfigError (or ScheduleError) describing the first problem.
  void validate() const;
};

/// Overlays the keys of a JSON object onto `config`. Unknown keys and
/// mistyped values raise ConfigError.
void apply_json(RunConfig& config, std::string_view json_text);
/// Reads and applies a JSON config file.
void apply_config_file(RunConfig& config, const std::string& path);

}  // namespace twobp
