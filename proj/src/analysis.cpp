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

#include "twobp/analysis.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <stdexcept>

namespace twobp {

Rational parse_rational(const std::string& text) {
  auto fail = [&] { return std::invalid_argument("not a rational number: '" + text + "'"); };
  if (text.empty()) throw fail();
  if (const auto slash = text.find('/'); slash != std::string::npos) {
    try {
      std::size_t used_num = 0, used_den = 0;
      const auto num = std::stoll(text.substr(0, slash), &used_num);
      const auto den = std::stoll(text.substr(slash + 1), &used_den);
      if (used_num != slash || used_den != text.size() - slash - 1) throw fail();
      return {num, den};
    } catch (const std::logic_error&) {
      throw fail();
    }
  }
  std::size_t i = 0;
  const bool negative = text[0] == '-';
  if (negative || text[0] == '+') ++i;
  std::int64_t num = 0, den = 1;
  bool digits = false, fraction = false;
  for (; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '.' && !fraction) {
      fraction = true;
      continue;
    }
    if (!std::isdigit(static_cast<unsigned char>(c))) throw fail();
    digits = true;
    num = num * 10 + (c - '0');
    if (fraction) den *= 10;
    if (den > 1'000'000'000'000LL || num > 1'000'000'000'000'000LL) throw fail();
  }
  if (!digits) throw fail();
  return {negative ? -num : num, den};
}

const RankCosts& CostModel::rank(int r) const {
  if (r >= 0 && static_cast<std::size_t>(r) < per_rank.size()) return per_rank[static_cast<std::size_t>(r)];
  return defaults;
}

Rational CostModel::cost(int r, const Instruction& ins) const {
  const auto& c = rank(r);
  switch (ins.kind) {
    case OpKind::Forward: return c.forward;
    case OpKind::BackwardP1: return c.backward_p1;
    case OpKind::BackwardP2: return c.backward_p2 * Rational(static_cast<std::int64_t>(ins.mbs.size()));
    case OpKind::BackwardFull: return c.backward_p1 + c.backward_p2;
    default: return Rational(0);
  }
}

void CostModel::validate() const {
  auto check = [](const RankCosts& c) {
    if (c.forward < 0 || c.backward_p1 < 0 || c.backward_p2 < 0) {
      throw std::invalid_argument("cost model: costs must be non-negative");
    }
  };
  check(defaults);
  for (const auto& c : per_rank) check(c);
  if (comm < 0) throw std::invalid_argument("cost model: communication cost must be non-negative");
}

Timeline simulate_timeline(std::span<const InstructionStream> streams, const CostModel& costs) {
  costs.validate();
  const int ranks = static_cast<int>(streams.size());
  // (channel, mb) -> completion time of the send; channel 2r carries
  // activations r -> r+1, 2r+1 carries gradients r+1 -> r.
  std::map<std::pair<int, MicroBatchId>, Rational> sent;
  std::vector<std::size_t> pc(streams.size(), 0);
  std::vector<Rational> clock(streams.size(), Rational(0));
  std::vector<Timeline> per_rank(streams.size());

  bool progress = true;
  while (progress) {
    progress = false;
    for (int r = 0; r < ranks; ++r) {
      const auto& ops = streams[r].ops;
      auto& t = clock[static_cast<std::size_t>(r)];
      auto& i = pc[static_cast<std::size_t>(r)];
      while (i < ops.size()) {
        const auto& ins = ops[i];
        Rational end = t + costs.cost(r, ins);
        if (ins.kind == OpKind::RecvAct || ins.kind == OpKind::RecvGrad) {
          const int channel = ins.kind == OpKind::RecvAct ? 2 * (r - 1) : 2 * r + 1;
          auto it = sent.find({channel, ins.mb()});
          if (it == sent.end()) break;
          end = max(t, it->second + costs.comm);
        } else if (ins.kind == OpKind::SendAct) {
          sent[{2 * r, ins.mb()}] = end;
        } else if (ins.kind == OpKind::SendGrad) {
          sent[{2 * (r - 1) + 1, ins.mb()}] = end;
        }
        per_rank[static_cast<std::size_t>(r)].push_back({r, ins.kind, ins.mbs, t, end});
        t = end;
        ++i;
        progress = true;
      }
    }
  }
  Timeline out;
  for (int r = 0; r < ranks; ++r) {
    if (pc[static_cast<std::size_t>(r)] < streams[r].ops.size()) {
      throw std::logic_error("simulate_timeline: rank " + std::to_string(r) +
                             " can never proceed; the streams have a dependency cycle");
    }
    out.insert(out.end(), per_rank[static_cast<std::size_t>(r)].begin(), per_rank[static_cast<std::size_t>(r)].end());
  }
  return out;
}

Trace to_trace(const Timeline& timeline) {
  Trace trace;
  trace.reserve(timeline.size());
  for (const auto& e : timeline) trace.push_back({e.rank, e.op, e.mbs, e.start.to_double(), e.end.to_double()});
  return trace;
}

BubbleReport bubble_report(const Timeline& timeline) {
  if (timeline.empty()) throw std::invalid_argument("bubble ratio of an empty timeline");
  BubbleReport report;
  int max_rank = 0;
  Rational begin = timeline.front().start, finish = timeline.front().end;
  for (const auto& e : timeline) {
    max_rank = std::max(max_rank, e.rank);
    begin = std::min(begin, e.start);
    finish = max(finish, e.end);
  }
  report.ranks = max_rank + 1;
  report.makespan = finish - begin;
  report.busy.assign(static_cast<std::size_t>(report.ranks), Rational(0));
  for (const auto& e : timeline) {
    if (is_compute(e.op)) report.busy[static_cast<std::size_t>(e.rank)] += e.end - e.start;
  }
  Rational total_busy = 0;
  for (const auto& b : report.busy) {
    report.idle.push_back(report.makespan - b);
    total_busy += b;
  }
  if (report.makespan == Rational(0)) {
    report.bubble_ratio = 0;
  } else {
    report.bubble_ratio = Rational(1) - total_busy / (Rational(report.ranks) * report.makespan);
  }
  return report;
}

Rational bubble_ratio_from_timeline(const Timeline& timeline) { return bubble_report(timeline).bubble_ratio; }

double bubble_ratio_from_trace(std::span<const TraceEvent> trace) {
  if (trace.empty()) throw std::invalid_argument("bubble ratio of an empty trace");
  int max_rank = 0;
  double begin = trace.front().start, finish = trace.front().end, busy = 0;
  for (const auto& e : trace) {
    max_rank = std::max(max_rank, e.rank);
    begin = std::min(begin, e.start);
    finish = std::max(finish, e.end);
    const bool waiting = e.op == OpKind::RecvAct || e.op == OpKind::RecvGrad || e.op == OpKind::SendAct ||
                         e.op == OpKind::SendGrad;
    if (!waiting) busy += e.end - e.start;
  }
  const double span = finish - begin;
  if (span <= 0) return 0;
  return 1.0 - busy / (static_cast<double>(max_rank + 1) * span);
}

Rational bubble_ratio_analytic(ScheduleKind kind, int n, bool two_bp) {
  if (n < 1) throw std::invalid_argument("bubble_ratio_analytic: N must be >= 1");
  const Rational N(n);
  const Rational idle = N - 1;
  switch (kind) {
    case ScheduleKind::Naive:
      return two_bp ? Rational(2) * idle / (Rational(2) * N + 1) : idle / N;
    case ScheduleKind::GPipe:
      return two_bp ? Rational(2) * idle / (Rational(2) * idle + Rational(3) * N) : idle / (Rational(2) * N - 1);
    case ScheduleKind::OneFOneB1:
      return two_bp ? idle / (idle + Rational(3) * N) : idle / (Rational(2) * N - 1);
    case ScheduleKind::OneFOneB2:
      return two_bp ? idle / (idle + Rational(6) * N) : idle / (Rational(3) * N - 1);
    case ScheduleKind::OneFOneB2MemEff:
      break;
  }
  throw std::invalid_argument("no closed-form bubble ratio for " + std::string(to_string(kind)));
}

Rational throughput_gain(Rational ratio_without, Rational ratio_with) {
  for (auto r : {ratio_without, ratio_with}) {
    if (r < 0 || r >= 1) throw std::domain_error("throughput_gain: bubble ratios must lie in [0, 1), got " + r.str());
  }
  return (Rational(1) - ratio_with) / (Rational(1) - ratio_without);
}

Rational MemoryModel::release(int r) const {
  const Rational rho = (r >= 0 && static_cast<std::size_t>(r) < release_fraction.size())
                           ? release_fraction[static_cast<std::size_t>(r)]
                           : default_release;
  if (rho < 0 || rho > 1) throw std::invalid_argument("release fraction must lie in [0, 1]");
  return rho;
}

MemoryPeaks peak_memory(std::span<const InstructionStream> streams, const MemoryModel& model) {
  MemoryPeaks peaks;
  for (const auto& stream : streams) {
    const Rational rho = model.release(stream.rank);
    Rational act = 0, ideriv = 0, peak_act = 0, peak_ideriv = 0, peak_combined = 0;
    for (std::size_t i = 0; i < stream.ops.size(); ++i) {
      const auto& ins = stream.ops[i];
      const Rational k(static_cast<std::int64_t>(ins.mbs.size()));
      switch (ins.kind) {
        case OpKind::Forward: act += 1; break;
        case OpKind::BackwardFull: act -= 1; break;
        case OpKind::BackwardP1:
          act -= rho;
          ideriv += 1;
          break;
        case OpKind::BackwardP2:
          act -= (Rational(1) - rho) * k;
          ideriv -= k;
          break;
        default: break;
      }
      if (act < 0 || ideriv < 0) {
        throw std::logic_error("peak_memory: counter underflow at rank " + std::to_string(stream.rank) +
                               ", instruction " + std::to_string(i));
      }
      peak_act = max(peak_act, act);
      peak_ideriv = max(peak_ideriv, ideriv);
      peak_combined = max(peak_combined, act + ideriv);
    }
    peaks.activation.push_back(peak_act);
    peaks.interm_deriv.push_back(peak_ideriv);
    peaks.combined.push_back(peak_combined);
  }
  return peaks;
}

}  // namespace twobp
