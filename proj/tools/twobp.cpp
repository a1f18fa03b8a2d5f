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

// Command-line front end: simulate | train | verify | gantt.

#include <exception>
#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "twobp/commands.hpp"

namespace {

using nlohmann::json;

// Flags given on the command line, keyed like the JSON config file so they
// can be overlaid on top of it.
struct Flags {
  json values = json::object();
  std::string config_path;
};

template <typename T>
void option(CLI::App* cmd, Flags& flags, const std::string& name, const std::string& key, const std::string& help) {
  cmd->add_option_function<T>(name, [&flags, key](const T& v) { flags.values[key] = v; }, help);
}

void switch_flag(CLI::App* cmd, Flags& flags, const std::string& name, const std::string& key, bool value,
                 const std::string& help) {
  cmd->add_flag_callback(name, [&flags, key, value] { flags.values[key] = value; }, help);
}

void add_common(CLI::App* cmd, Flags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON config file; flags override its keys");
  option<std::string>(cmd, flags, "--kind", "kind", "naive | gpipe | 1f1b-1 | 1f1b-2 | 1f1b-2-memeff");
  option<int>(cmd, flags, "--ranks,-P", "ranks", "pipeline ranks");
  option<int>(cmd, flags, "--micro-batches,-M", "micro_batches", "micro-batches per step (default per schedule)");
  switch_flag(cmd, flags, "--two-bp", "two_bp", true, "split backward into p1 and deferred p2");
  switch_flag(cmd, flags, "--no-two-bp", "two_bp", false, "combined backward");
  option<std::string>(cmd, flags, "--b2-mode", "b2_mode", "concat | loop");
  option<std::uint64_t>(cmd, flags, "--seed", "seed", "seed for parameters and data");
  option<std::string>(cmd, flags, "--out", "out", "output directory");
  option<std::string>(cmd, flags, "--model", "model", "transformer | mlp");
  option<std::size_t>(cmd, flags, "--blocks", "blocks", "model blocks");
  option<std::size_t>(cmd, flags, "--width", "width", "hidden width");
  option<std::size_t>(cmd, flags, "--seq", "seq", "tokens per sample");
  option<std::size_t>(cmd, flags, "--classes", "classes", "output classes");
  option<std::vector<std::size_t>>(cmd, flags, "--stage-boundaries", "stage_boundaries",
                                   "cumulative block index ending each stage");
  option<std::size_t>(cmd, flags, "--batch-size", "batch_size", "samples per mini-batch");
  option<std::string>(cmd, flags, "--optimizer", "optimizer", "sgd | adam");
  option<double>(cmd, flags, "--lr", "lr", "learning rate");
  option<double>(cmd, flags, "--beta1", "beta1", "Adam beta1");
  option<double>(cmd, flags, "--beta2", "beta2", "Adam beta2");
  option<double>(cmd, flags, "--eps", "eps", "Adam epsilon");
  option<std::string>(cmd, flags, "--t-f", "t_f", "simulated forward cost");
  option<std::string>(cmd, flags, "--t-b1", "t_b1", "simulated backward-p1 cost");
  option<std::string>(cmd, flags, "--t-b2", "t_b2", "simulated backward-p2 cost");
  option<std::string>(cmd, flags, "--t-comm", "t_comm", "simulated send-to-receive latency");
  option<std::string>(cmd, flags, "--release", "release", "activation share freed at backward-p1");
  option<std::size_t>(cmd, flags, "--steps", "steps", "training steps per repeat");
  option<std::size_t>(cmd, flags, "--repeats", "repeats", "independent training repeats");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"twobp: pipeline-parallel training with split backward passes"};
  app.require_subcommand(1);
  Flags flags;

  auto* simulate = app.add_subcommand("simulate", "unit-cost timeline, bubble report and Gantt chart");
  auto* train = app.add_subcommand("train", "train the toy model on synthetic data");
  auto* verify = app.add_subcommand("verify", "check pipeline gradients against the reference and finite differences");
  auto* gantt = app.add_subcommand("gantt", "render a trace (or a simulated schedule) as SVG");
  for (auto* cmd : {simulate, train, verify, gantt}) add_common(cmd, flags);
  switch_flag(train, flags, "--compare-2bp", "compare_2bp", true, "train with and without 2BP and report the gain");
  option<std::string>(verify, flags, "--inject-fault", "inject_fault", "rmsnorm-p2-sign");
  option<std::string>(gantt, flags, "--trace", "trace", "trace.jsonl to render");

  CLI11_PARSE(app, argc, argv);

  try {
    twobp::RunConfig config;
    if (!flags.config_path.empty()) twobp::apply_config_file(config, flags.config_path);
    twobp::apply_json(config, flags.values.dump());
    if (simulate->parsed()) return twobp::cmd_simulate(config, std::cout);
    if (train->parsed()) return twobp::cmd_train(config, std::cout);
    if (verify->parsed()) return twobp::cmd_verify(config, std::cout);
    return twobp::cmd_gantt(config, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "twobp: " << e.what() << '\n';
    return 2;
  }
}
