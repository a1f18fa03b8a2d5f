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

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "twobp/rational.hpp"
#include "twobp/schedule.hpp"
#include "twobp/trace.hpp"

namespace twobp {

/// One JSON object per line:
/// {"rank":0,"op":"BackwardP2","mb":[0,1],"start":3.0,"end":5.0}
void write_trace_jsonl(std::ostream& out, std::span<const TraceEvent> trace);
/// Throws std::runtime_error naming the offending line.
Trace read_trace_jsonl(std::istream& in);

/// Summary of one simulated configuration.
struct ReportRow {
  ScheduleKind kind = ScheduleKind::GPipe;
  int ranks = 1;
  int micro_batches = 1;
  bool two_bp = false;
  Rational bubble_ratio;
  Rational gain{1};
  std::vector<Rational> peak_act;
  std::vector<Rational> peak_ideriv;
};

/// Columns kind,P,M,two_bp,bubble_ratio,gain,peak_act,peak_ideriv. The peak
/// columns hold one value per rank separated by ';'.
void write_report_csv(std::ostream& out, std::span<const ReportRow> rows);
/// Same content as JSON, with exact rationals alongside the decimals.
std::string report_json(std::span<const ReportRow> rows);

/// Static Gantt chart: one lane per rank, one block per compute instruction
/// (Forward, BackwardP1, BackwardP2, BackwardFull), widths proportional to
/// duration. Lanes are numbered up to the highest rank in the trace unless
/// `ranks` is larger.
std::string gantt_svg(std::span<const TraceEvent> trace, int ranks = 0);

}  // namespace twobp
