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

#include <vector>

#include "twobp/schedule.hpp"

namespace twobp {

/// One executed (or simulated) instruction. Times are seconds from the start
/// of the step for real runs and ticks for simulated ones.
struct TraceEvent {
  int rank = 0;
  OpKind op = OpKind::Forward;
  std::vector<MicroBatchId> mbs;
  double start = 0;
  double end = 0;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

using Trace = std::vector<TraceEvent>;

}  // namespace twobp
