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

#include "twobp/report.hpp"

#include <algorithm>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace twobp {

namespace {

using nlohmann::json;

std::string join(const std::vector<Rational>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ';';
    std::ostringstream s;
    s << values[i].to_double();
    out += s.str();
  }
  return out;
}

std::string block_label(const TraceEvent& e) {
  std::string mbs;
  for (std::size_t i = 0; i < e.mbs.size(); ++i) mbs += (i ? "," : "") + std::to_string(e.mbs[i]);
  switch (e.op) {
    case OpKind::Forward: return "F" + mbs;
    case OpKind::BackwardP1: return "B1 " + mbs;
    case OpKind::BackwardP2: return "B2 " + mbs;
    default: return "B" + mbs;
  }
}

const char* block_color(OpKind op) {
  switch (op) {
    case OpKind::Forward: return "#4e79a7";
    case OpKind::BackwardP1: return "#f28e2b";
    case OpKind::BackwardP2: return "#59a14f";
    default: return "#e15759";
  }
}

}  // namespace

void write_trace_jsonl(std::ostream& out, std::span<const TraceEvent> trace) {
  for (const auto& e : trace) {
    nlohmann::ordered_json line = {{"rank", e.rank}, {"op", std::string(to_string(e.op))}, {"mb", e.mbs},
                 {"start", e.start}, {"end", e.end}};
    out << line.dump() << '\n';
  }
}

Trace read_trace_jsonl(std::istream& in) {
  Trace trace;
  std::string text;
  for (int line = 1; std::getline(in, text); ++line) {
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(text);
      TraceEvent e;
      e.rank = j.at("rank").get<int>();
      e.op = parse_op_kind(j.at("op").get<std::string>());
      e.mbs = j.at("mb").get<std::vector<MicroBatchId>>();
      e.start = j.at("start").get<double>();
      e.end = j.at("end").get<double>();
      if (e.end < e.start) throw std::runtime_error("end precedes start");
      trace.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw std::runtime_error("trace line " + std::to_string(line) + ": " + ex.what());
    }
  }
  return trace;
}

void write_report_csv(std::ostream& out, std::span<const ReportRow> rows) {
  out << "kind,P,M,two_bp,bubble_ratio,gain,peak_act,peak_ideriv\n";
  for (const auto& r : rows) {
    out << to_string(r.kind) << ',' << r.ranks << ',' << r.micro_batches << ',' << (r.two_bp ? 1 : 0) << ','
        << r.bubble_ratio.to_double() << ',' << r.gain.to_double() << ',' << join(r.peak_act) << ','
        << join(r.peak_ideriv) << '\n';
  }
}

std::string report_json(std::span<const ReportRow> rows) {
  auto decimals = [](const std::vector<Rational>& v) {
    std::vector<double> out;
    for (const auto& x : v) out.push_back(x.to_double());
    return out;
  };
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"kind", std::string(to_string(r.kind))},
                   {"P", r.ranks},
                   {"M", r.micro_batches},
                   {"two_bp", r.two_bp},
                   {"bubble_ratio", r.bubble_ratio.to_double()},
                   {"bubble_ratio_exact", r.bubble_ratio.str()},
                   {"gain", r.gain.to_double()},
                   {"gain_exact", r.gain.str()},
                   {"peak_act", decimals(r.peak_act)},
                   {"peak_ideriv", decimals(r.peak_ideriv)}});
  }
  return out.dump(2);
}

std::string gantt_svg(std::span<const TraceEvent> trace, int ranks) {
  constexpr double kLeft = 70, kTop = 30, kLane = 34, kBlock = 26, kWidth = 960;
  double begin = 0, finish = 0;
  bool first = true;
  for (const auto& e : trace) {
    ranks = std::max(ranks, e.rank + 1);
    begin = first ? e.start : std::min(begin, e.start);
    finish = first ? e.end : std::max(finish, e.end);
    first = false;
  }
  const double scale = finish > begin ? kWidth / (finish - begin) : 0;
  const double height = kTop + kLane * ranks + 30;

  std::ostringstream svg;
  svg << std::setprecision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kLeft + kWidth + 20 << "\" height=\"" << height
      << "\" font-family=\"monospace\" font-size=\"11\">\n";
  for (int r = 0; r < ranks; ++r) {
    const double y = kTop + kLane * r;
    svg << "<g class=\"lane\" data-rank=\"" << r << "\">\n"
        << "  <text x=\"8\" y=\"" << y + kBlock * 0.65 << "\">rank " << r << "</text>\n"
        << "  <rect x=\"" << kLeft << "\" y=\"" << y << "\" width=\"" << kWidth << "\" height=\"" << kBlock
        << "\" fill=\"#f4f4f4\"/>\n";
    for (const auto& e : trace) {
      if (e.rank != r || !is_compute(e.op)) continue;
      const double x = kLeft + (e.start - begin) * scale;
      const double w = (e.end - e.start) * scale;
      svg << "  <rect class=\"op\" data-op=\"" << to_string(e.op) << "\" x=\"" << x << "\" y=\"" << y
          << "\" width=\"" << w << "\" height=\"" << kBlock << "\" fill=\"" << block_color(e.op)
          << "\" stroke=\"#ffffff\"><title>" << block_label(e) << "</title></rect>\n";
      if (w >= 14) {
        svg << "  <text x=\"" << x + w / 2 << "\" y=\"" << y + kBlock * 0.65
            << "\" text-anchor=\"middle\" fill=\"#ffffff\">" << block_label(e) << "</text>\n";
      }
    }
    svg << "</g>\n";
  }
  const double legend_y = kTop + kLane * ranks + 16;
  double lx = kLeft;
  for (auto op : {OpKind::Forward, OpKind::BackwardP1, OpKind::BackwardP2, OpKind::BackwardFull}) {
    svg << "<rect x=\"" << lx << "\" y=\"" << legend_y - 9 << "\" width=\"10\" height=\"10\" fill=\""
        << block_color(op) << "\"/><text x=\"" << lx + 14 << "\" y=\"" << legend_y << "\">" << to_string(op)
        << "</text>\n";
    lx += 130;
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace twobp
