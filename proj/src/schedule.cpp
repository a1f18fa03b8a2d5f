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

#include "twobp/schedule.hpp"

#include <algorithm>
#include <cctype>
#include <deque>
#include <limits>
#include <set>
#include <sstream>

namespace twobp {

namespace {

struct NameEntry {
  OpKind kind;
  std::string_view name;
  std::string_view token;
};

constexpr NameEntry kOpNames[] = {
    {OpKind::LoadInput, "LoadInput", "L"},       {OpKind::Forward, "Forward", "F"},
    {OpKind::SendAct, "SendAct", "SA"},          {OpKind::RecvAct, "RecvAct", "RA"},
    {OpKind::ComputeLoss, "ComputeLoss", "LS"},  {OpKind::SendGrad, "SendGrad", "SG"},
    {OpKind::RecvGrad, "RecvGrad", "RG"},        {OpKind::BackwardP1, "BackwardP1", "B1:"},
    {OpKind::BackwardP2, "BackwardP2", "B2:"},   {OpKind::BackwardFull, "BackwardFull", "BF:"},
    {OpKind::OptimizerStep, "OptimizerStep", "OPT"},
};

const NameEntry& entry(OpKind kind) {
  for (const auto& e : kOpNames) {
    if (e.kind == kind) return e;
  }
  throw std::logic_error("unknown op kind");
}

// Order of forward/backward units on one rank, before expansion into
// communication and compute instructions.
struct Unit {
  bool forward;
  MicroBatchId mb;
};

std::vector<Unit> unit_order(ScheduleKind kind, int ranks, int micro_batches, int rank) {
  std::vector<Unit> units;
  if (kind == ScheduleKind::Naive || kind == ScheduleKind::GPipe) {
    for (int m = 0; m < micro_batches; ++m) units.push_back({true, m});
    for (int m = 0; m < micro_batches; ++m) units.push_back({false, m});
    return units;
  }
  const int warmup = std::min(ranks - rank - 1, micro_batches);
  for (int m = 0; m < warmup; ++m) units.push_back({true, m});
  for (int i = 0; i < micro_batches - warmup; ++i) {
    units.push_back({true, warmup + i});
    units.push_back({false, i});
  }
  for (int m = micro_batches - warmup; m < micro_batches; ++m) units.push_back({false, m});
  return units;
}

// Instruction plus a marker for the mid-stream drain of the memory-efficient
// variant, which is resolved while placing backward-p2.
struct PlanOp {
  Instruction ins;
  bool drain = false;
};

std::vector<PlanOp> expand(const std::vector<Unit>& units, int ranks, int rank, OpKind backward,
                           std::optional<MicroBatchId> drain_after) {
  std::vector<PlanOp> ops;
  const bool first = rank == 0, last = rank == ranks - 1;
  for (const auto& u : units) {
    if (u.forward) {
      ops.push_back({Instruction::op(first ? OpKind::LoadInput : OpKind::RecvAct, u.mb)});
      ops.push_back({Instruction::op(OpKind::Forward, u.mb)});
      ops.push_back({Instruction::op(last ? OpKind::ComputeLoss : OpKind::SendAct, u.mb)});
    } else {
      if (!last) ops.push_back({Instruction::op(OpKind::RecvGrad, u.mb)});
      ops.push_back({Instruction::op(backward, u.mb)});
      if (!first) ops.push_back({Instruction::op(OpKind::SendGrad, u.mb)});
      if (drain_after == u.mb) ops.push_back({Instruction::optimizer_step(), true});
    }
  }
  return ops;
}

// Places backward-p2 into receive-wait slots by replaying the plan under unit
// costs. Forward and backward-p1 timings are never delayed: a slot is only
// used while the rank's next instruction is a receive that has not arrived,
// and with integer unit costs such a message lands one tick later at the
// earliest.
Schedule place_backward_p2(const std::vector<std::vector<PlanOp>>& plan, int micro_batches, B2Mode mode,
                           int drain_limit) {
  const int ranks = static_cast<int>(plan.size());
  constexpr long kNever = std::numeric_limits<long>::max();
  // sent[channel][mb]: activations travel on channel 2r (r -> r+1), gradients
  // on 2r+1 (r+1 -> r).
  std::vector<std::vector<long>> sent(2 * static_cast<std::size_t>(ranks),
                                      std::vector<long>(static_cast<std::size_t>(micro_batches), kNever));
  std::vector<std::size_t> pc(plan.size(), 0);
  std::vector<long> free_at(plan.size(), 0);
  std::vector<std::deque<MicroBatchId>> pending(plan.size());
  Schedule out(plan.size());
  for (int r = 0; r < ranks; ++r) out[r].rank = r;

  auto done = [&] {
    for (int r = 0; r < ranks; ++r) {
      if (pc[r] < plan[r].size()) return false;
    }
    return true;
  };

  for (long t = 0; !done(); ++t) {
    if (t > 1'000'000) throw std::logic_error("backward-p2 placement did not converge");
    bool progress = true;
    while (progress) {
      progress = false;
      for (int r = 0; r < ranks; ++r) {
        auto& ops = out[r].ops;
        while (free_at[r] <= t && pc[r] < plan[r].size()) {
          const PlanOp& p = plan[r][pc[r]];
          if (p.drain) {
            std::vector<MicroBatchId> set;
            std::deque<MicroBatchId> keep;
            for (auto m : pending[r]) {
              if (m < drain_limit) {
                set.push_back(m);
              } else {
                keep.push_back(m);
              }
            }
            pending[r] = std::move(keep);
            if (!set.empty()) {
              free_at[r] = t + static_cast<long>(set.size());
              ops.push_back(Instruction::backward_p2(std::move(set), mode));
            }
            ++pc[r];
            progress = true;
            continue;
          }
          const Instruction& ins = p.ins;
          const auto mb = static_cast<std::size_t>(ins.mb());
          if (ins.kind == OpKind::RecvAct && sent[2 * (r - 1)][mb] > t) break;
          if (ins.kind == OpKind::RecvGrad && sent[2 * r + 1][mb] > t) break;
          if (ins.kind == OpKind::SendAct) sent[2 * r][mb] = t;
          if (ins.kind == OpKind::SendGrad) sent[2 * (r - 1) + 1][mb] = t;
          if (ins.kind == OpKind::Forward || ins.kind == OpKind::BackwardP1) free_at[r] = t + 1;
          if (ins.kind == OpKind::BackwardP1) pending[r].push_back(ins.mb());
          ops.push_back(ins);
          ++pc[r];
          progress = true;
        }
      }
    }
    for (int r = 0; r < ranks; ++r) {
      if (free_at[r] <= t && pc[r] < plan[r].size() && !pending[r].empty()) {
        out[r].ops.push_back(Instruction::backward_p2({pending[r].front()}, mode));
        pending[r].pop_front();
        free_at[r] = t + 1;
      }
    }
  }
  for (int r = 0; r < ranks; ++r) {
    if (!pending[r].empty()) {
      std::vector<MicroBatchId> rest(pending[r].begin(), pending[r].end());
      std::sort(rest.begin(), rest.end());
      out[r].ops.push_back(Instruction::backward_p2(std::move(rest), mode));
    }
  }
  return out;
}

Schedule generate(const ScheduleConfig& config) {
  config.validate();
  const int ranks = config.ranks;
  const int m = config.resolved_micro_batches();
  const bool memeff = config.kind == ScheduleKind::OneFOneB2MemEff;
  const OpKind backward = config.two_bp ? OpKind::BackwardP1 : OpKind::BackwardFull;

  std::vector<std::vector<PlanOp>> plan;
  for (int r = 0; r < ranks; ++r) {
    auto drain_after = memeff ? std::optional<MicroBatchId>(ranks - 1) : std::nullopt;
    plan.push_back(expand(unit_order(config.kind, ranks, m, r), ranks, r, backward, drain_after));
  }

  Schedule streams;
  const bool fill_slots = config.two_bp && config.kind != ScheduleKind::Naive && config.kind != ScheduleKind::GPipe;
  if (fill_slots) {
    streams = place_backward_p2(plan, m, config.b2_mode, memeff ? ranks : 0);
  } else {
    for (int r = 0; r < ranks; ++r) {
      InstructionStream s{r, {}};
      for (const auto& p : plan[r]) s.ops.push_back(p.ins);
      if (config.two_bp) {
        std::vector<MicroBatchId> all(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) all[static_cast<std::size_t>(i)] = i;
        s.ops.push_back(Instruction::backward_p2(std::move(all), config.b2_mode));
      }
      streams.push_back(std::move(s));
    }
  }
  for (auto& s : streams) s.ops.push_back(Instruction::optimizer_step());
  return streams;
}

std::string mb_list(const std::vector<MicroBatchId>& mbs) {
  std::string out;
  for (std::size_t i = 0; i < mbs.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(mbs[i]);
  }
  return out;
}

}  // namespace

std::string_view to_string(OpKind kind) { return entry(kind).name; }

OpKind parse_op_kind(std::string_view name) {
  for (const auto& e : kOpNames) {
    if (e.name == name) return e.kind;
  }
  throw std::invalid_argument("unknown op '" + std::string(name) + "'");
}

bool is_compute(OpKind kind) {
  return kind == OpKind::Forward || kind == OpKind::BackwardP1 || kind == OpKind::BackwardP2 ||
         kind == OpKind::BackwardFull;
}

std::string_view to_string(B2Mode mode) { return mode == B2Mode::Concat ? "concat" : "loop"; }

B2Mode parse_b2_mode(std::string_view name) {
  if (name == "concat") return B2Mode::Concat;
  if (name == "loop") return B2Mode::Loop;
  throw std::invalid_argument("unknown backward-p2 mode '" + std::string(name) + "' (expected concat or loop)");
}

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Naive: return "naive";
    case ScheduleKind::GPipe: return "gpipe";
    case ScheduleKind::OneFOneB1: return "1f1b-1";
    case ScheduleKind::OneFOneB2: return "1f1b-2";
    case ScheduleKind::OneFOneB2MemEff: return "1f1b-2-memeff";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  for (auto k : {ScheduleKind::Naive, ScheduleKind::GPipe, ScheduleKind::OneFOneB1, ScheduleKind::OneFOneB2,
                 ScheduleKind::OneFOneB2MemEff}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown schedule kind '" + std::string(name) +
                              "' (expected naive, gpipe, 1f1b-1, 1f1b-2 or 1f1b-2-memeff)");
}

int ScheduleConfig::resolved_micro_batches() const {
  if (micro_batches > 0) return micro_batches;
  switch (kind) {
    case ScheduleKind::Naive: return 1;
    case ScheduleKind::GPipe:
    case ScheduleKind::OneFOneB1: return ranks;
    case ScheduleKind::OneFOneB2:
    case ScheduleKind::OneFOneB2MemEff: return 2 * ranks;
  }
  return ranks;
}

void ScheduleConfig::validate() const {
  if (ranks < 1) throw ScheduleError("pipeline needs at least one rank, got " + std::to_string(ranks));
  if (micro_batches < 0) throw ScheduleError("micro-batch count must be positive");
  const int m = resolved_micro_batches();
  const std::string where = std::string(to_string(kind)) + " with P=" + std::to_string(ranks) + ": ";
  switch (kind) {
    case ScheduleKind::Naive:
      if (m != 1) throw ScheduleError(where + "naive schedule uses a single micro-batch, got M=" + std::to_string(m));
      break;
    case ScheduleKind::GPipe:
      break;
    case ScheduleKind::OneFOneB1:
      if (m != ranks) throw ScheduleError(where + "1F1B-1 requires M = P, got M=" + std::to_string(m));
      break;
    case ScheduleKind::OneFOneB2:
    case ScheduleKind::OneFOneB2MemEff:
      if (m != 2 * ranks) throw ScheduleError(where + "1F1B-2 requires M = 2P, got M=" + std::to_string(m));
      if (kind == ScheduleKind::OneFOneB2MemEff && !two_bp) {
        throw ScheduleError(where + "the memory-efficient variant only exists with 2BP");
      }
      break;
  }
}

Schedule generate_schedule(const ScheduleConfig& config) { return generate(config); }

Schedule generate_memeff_1f1b2(const ScheduleConfig& config) {
  if (config.kind != ScheduleKind::OneFOneB2MemEff) {
    throw ScheduleError("generate_memeff_1f1b2 needs kind 1f1b-2-memeff");
  }
  return generate(config);
}

std::string Violation::describe() const {
  return rule + " at rank " + std::to_string(rank) + ", instruction " + std::to_string(index) + ": " + detail;
}

std::optional<Violation> validate_schedule(std::span<const InstructionStream> streams,
                                           std::optional<int> micro_batches) {
  const int ranks = static_cast<int>(streams.size());
  if (ranks == 0) return Violation{"empty", 0, 0, "no streams"};
  for (int r = 0; r < ranks; ++r) {
    if (streams[r].rank != r) {
      return Violation{"stream-rank", r, 0, "stream at position " + std::to_string(r) + " claims rank " +
                                                std::to_string(streams[r].rank)};
    }
  }
  int m_count = 0;
  if (micro_batches) {
    m_count = *micro_batches;
  } else {
    std::set<MicroBatchId> ids;
    for (const auto& ins : streams[0].ops) {
      if (ins.kind == OpKind::Forward) ids.insert(ins.mb());
    }
    m_count = static_cast<int>(ids.size());
  }
  const auto M = static_cast<std::size_t>(m_count);

  // Every channel must deliver micro-batches in the order its receiver asks
  // for them.
  for (int r = 0; r + 1 < ranks; ++r) {
    for (bool act : {true, false}) {
      const auto& sender = streams[static_cast<std::size_t>(act ? r : r + 1)];
      const auto& receiver = streams[static_cast<std::size_t>(act ? r + 1 : r)];
      const OpKind send = act ? OpKind::SendAct : OpKind::SendGrad;
      const OpKind recv = act ? OpKind::RecvAct : OpKind::RecvGrad;
      std::vector<MicroBatchId> sent;
      for (const auto& ins : sender.ops) {
        if (ins.kind == send && !ins.mbs.empty()) sent.push_back(ins.mb());
      }
      std::size_t k = 0;
      for (std::size_t idx = 0; idx < receiver.ops.size(); ++idx) {
        const auto& ins = receiver.ops[idx];
        if (ins.kind != recv || ins.mbs.empty()) continue;
        if (k < sent.size() && sent[k] != ins.mb()) {
          return Violation{"fifo-order", receiver.rank, idx,
                           std::string(to_string(recv)) + "(" + std::to_string(ins.mb()) + ") but rank " +
                               std::to_string(sender.rank) + " sends micro-batch " + std::to_string(sent[k]) +
                               " at that position"};
        }
        ++k;
      }
    }
  }

  struct RankState {
    std::size_t pc = 0;
    std::vector<char> loaded, received_act, forwarded, sent_act, loss, received_grad, backward, sent_grad, p2;
    bool saw_p1 = false, saw_full = false, flushed = false;
  };
  std::vector<RankState> st(static_cast<std::size_t>(ranks));
  for (auto& s : st) {
    for (auto* v : {&s.loaded, &s.received_act, &s.forwarded, &s.sent_act, &s.loss, &s.received_grad, &s.backward,
                    &s.sent_grad, &s.p2}) {
      v->assign(M, 0);
    }
  }
  std::vector<std::deque<MicroBatchId>> channel(2 * static_cast<std::size_t>(ranks));

  auto step = [&](int r, const Instruction& ins, std::size_t idx) -> std::optional<Violation> {
    auto& s = st[static_cast<std::size_t>(r)];
    auto fail = [&](std::string rule, std::string detail) {
      return Violation{std::move(rule), r, idx, std::move(detail)};
    };
    const std::string what = format_stream({r, {ins}}).substr(std::to_string(r).size() + 7);
    if (s.flushed) return fail("optimizer-last", what + " after OptimizerStep");
    if (ins.kind == OpKind::OptimizerStep) {
      for (std::size_t m = 0; m < M; ++m) {
        if (!s.forwarded[m] || !s.backward[m] || (s.saw_p1 && !s.p2[m])) {
          return fail("optimizer-before-gradients", "gradient work for micro-batch " + std::to_string(m) +
                                                        " incomplete at OptimizerStep");
        }
      }
      s.flushed = true;
      return std::nullopt;
    }
    if (ins.mbs.empty()) return fail("mb-range", what + " has no micro-batch");
    for (auto m : ins.mbs) {
      if (m < 0 || m >= m_count) return fail("mb-range", what + " references micro-batch outside [0, M)");
    }
    const auto m = static_cast<std::size_t>(ins.mb());
    const bool first = r == 0, last = r == ranks - 1;
    switch (ins.kind) {
      case OpKind::LoadInput:
        if (!first) return fail("topology", "LoadInput on rank other than 0");
        if (s.loaded[m]) return fail("duplicate-op", what + " repeated");
        s.loaded[m] = 1;
        break;
      case OpKind::RecvAct:
        if (first) return fail("topology", "RecvAct on rank 0");
        s.received_act[m] = 1;
        break;
      case OpKind::Forward:
        if (s.forwarded[m]) return fail("duplicate-op", what + " repeated");
        if (first ? !s.loaded[m] : !s.received_act[m]) {
          return fail("input-before-forward", what + " without its input being loaded or received");
        }
        s.forwarded[m] = 1;
        break;
      case OpKind::SendAct:
        if (last) return fail("topology", "SendAct on the last rank");
        if (!s.forwarded[m]) return fail("send-after-compute", what + " before Forward");
        if (s.sent_act[m]) return fail("duplicate-op", what + " repeated");
        s.sent_act[m] = 1;
        channel[2 * static_cast<std::size_t>(r)].push_back(ins.mb());
        break;
      case OpKind::ComputeLoss:
        if (!last) return fail("loss-on-last-rank", "ComputeLoss on rank " + std::to_string(r));
        if (!s.forwarded[m]) return fail("loss-after-forward", what + " before Forward");
        s.loss[m] = 1;
        break;
      case OpKind::RecvGrad:
        if (last) return fail("topology", "RecvGrad on the last rank");
        s.received_grad[m] = 1;
        break;
      case OpKind::BackwardP1:
      case OpKind::BackwardFull:
        (ins.kind == OpKind::BackwardP1 ? s.saw_p1 : s.saw_full) = true;
        if (s.saw_p1 && s.saw_full) return fail("mixed-backward", "stream mixes BackwardP1 and BackwardFull");
        if (s.backward[m]) return fail("duplicate-op", what + " repeated");
        if (!s.forwarded[m]) return fail("backward-after-forward", what + " before Forward");
        if (last ? !s.loss[m] : !s.received_grad[m]) {
          return fail("grad-before-backward", what + " without its output gradient");
        }
        s.backward[m] = 1;
        break;
      case OpKind::SendGrad:
        if (first) return fail("topology", "SendGrad on rank 0");
        if (!s.backward[m]) return fail("send-after-compute", what + " before its backward");
        if (s.sent_grad[m]) return fail("duplicate-op", what + " repeated");
        s.sent_grad[m] = 1;
        channel[2 * static_cast<std::size_t>(r - 1) + 1].push_back(ins.mb());
        break;
      case OpKind::BackwardP2:
        if (s.saw_full) return fail("mixed-backward", "BackwardP2 in a stream using BackwardFull");
        for (auto id : ins.mbs) {
          const auto k = static_cast<std::size_t>(id);
          if (!s.backward[k]) {
            return fail("p2-before-p1", what + " covers micro-batch " + std::to_string(id) +
                                             " before its BackwardP1");
          }
          if (s.p2[k]) return fail("p2-coverage", what + " covers micro-batch " + std::to_string(id) + " twice");
          s.p2[k] = 1;
        }
        break;
      case OpKind::OptimizerStep:
        break;
    }
    return std::nullopt;
  };

  bool progress = true;
  while (progress) {
    progress = false;
    for (int r = 0; r < ranks; ++r) {
      auto& s = st[static_cast<std::size_t>(r)];
      const auto& ops = streams[r].ops;
      while (s.pc < ops.size()) {
        const auto& ins = ops[s.pc];
        if ((ins.kind == OpKind::RecvAct || ins.kind == OpKind::RecvGrad) && !ins.mbs.empty()) {
          const bool act = ins.kind == OpKind::RecvAct;
          if ((act && r == 0) || (!act && r == ranks - 1)) {
            return Violation{"topology", r, s.pc, std::string(to_string(ins.kind)) + " has no sending neighbour"};
          }
          auto& q = channel[act ? 2 * static_cast<std::size_t>(r - 1) : 2 * static_cast<std::size_t>(r) + 1];
          if (q.empty()) break;
          if (q.front() != ins.mb()) {
            return Violation{"fifo-order", r, s.pc,
                             std::string(to_string(ins.kind)) + "(" + std::to_string(ins.mb()) +
                                 ") but the channel delivers micro-batch " + std::to_string(q.front()) + " next"};
          }
          q.pop_front();
        }
        if (auto v = step(r, ins, s.pc)) return v;
        ++s.pc;
        progress = true;
      }
    }
  }
  for (int r = 0; r < ranks; ++r) {
    const auto& s = st[static_cast<std::size_t>(r)];
    if (s.pc < streams[r].ops.size()) {
      return Violation{"deadlock", r, s.pc,
                       "blocked on " + std::string(to_string(streams[r].ops[s.pc].kind)) + "(" +
                           std::to_string(streams[r].ops[s.pc].mb()) + ") with no matching send"};
    }
  }
  for (int r = 0; r < ranks; ++r) {
    if (!st[static_cast<std::size_t>(r)].flushed) {
      return Violation{"missing-flush", r, streams[r].ops.size(), "stream does not end with OptimizerStep"};
    }
  }
  for (std::size_t c = 0; c < channel.size(); ++c) {
    if (!channel[c].empty()) {
      const int r = static_cast<int>(c / 2) + (c % 2 == 0 ? 1 : 0);
      return Violation{"unmatched-send", r, 0, "message for micro-batch " + std::to_string(channel[c].front()) +
                                                   " never received"};
    }
  }
  return std::nullopt;
}

std::string format_stream(const InstructionStream& stream) {
  std::string out = "rank " + std::to_string(stream.rank) + ":";
  for (const auto& ins : stream.ops) {
    out += " ";
    out += entry(ins.kind).token;
    if (ins.kind == OpKind::OptimizerStep) continue;
    if (ins.kind == OpKind::BackwardP2) {
      out += "{" + mb_list(ins.mbs) + "}" + (ins.mode == B2Mode::Concat ? "c" : "l");
    } else {
      out += std::to_string(ins.mb());
    }
  }
  return out;
}

std::string format_schedule(std::span<const InstructionStream> streams) {
  std::string out;
  for (const auto& s : streams) out += format_stream(s) + "\n";
  return out;
}

Schedule parse_schedule(std::string_view text) {
  Schedule out;
  std::istringstream lines{std::string(text)};
  std::string line;
  while (std::getline(lines, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream words(line);
    std::string head, rank_token;
    words >> head >> rank_token;
    if (head != "rank" || rank_token.empty() || rank_token.back() != ':') {
      throw std::invalid_argument("schedule line must start with 'rank <k>:': " + line);
    }
    InstructionStream s{std::stoi(rank_token.substr(0, rank_token.size() - 1)), {}};
    std::string tok;
    while (words >> tok) {
      if (tok == "OPT") {
        s.ops.push_back(Instruction::optimizer_step());
        continue;
      }
      if (tok.rfind("B2:{", 0) == 0) {
        const auto close = tok.find('}');
        if (close == std::string::npos || close + 2 != tok.size() || (tok.back() != 'c' && tok.back() != 'l')) {
          throw std::invalid_argument("malformed BackwardP2 token '" + tok + "'");
        }
        std::vector<MicroBatchId> mbs;
        std::istringstream ids(tok.substr(4, close - 4));
        std::string id;
        while (std::getline(ids, id, ',')) mbs.push_back(std::stoi(id));
        s.ops.push_back(Instruction::backward_p2(std::move(mbs), tok.back() == 'c' ? B2Mode::Concat : B2Mode::Loop));
        continue;
      }
      const auto colon = tok.find(':');
      const auto digits = colon != std::string::npos ? colon + 1 : tok.find_first_of("0123456789");
      if (digits == std::string::npos || digits == 0) throw std::invalid_argument("malformed token '" + tok + "'");
      const std::string prefix = tok.substr(0, digits);
      bool matched = false;
      for (const auto& e : kOpNames) {
        if (e.token == prefix && e.kind != OpKind::BackwardP2 && e.kind != OpKind::OptimizerStep) {
          s.ops.push_back(Instruction::op(e.kind, std::stoi(tok.substr(digits))));
          matched = true;
          break;
        }
      }
      if (!matched) throw std::invalid_argument("unknown token '" + tok + "'");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace twobp
