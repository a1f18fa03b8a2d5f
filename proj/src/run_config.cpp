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

#include "twobp/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace twobp {

namespace {

using nlohmann::json;

Rational to_rational(const json& v, const std::string& key) {
  if (v.is_string()) return parse_rational(v.get<std::string>());
  if (v.is_number_integer()) return Rational(v.get<std::int64_t>());
  if (v.is_number()) return parse_rational(v.dump());
  throw ConfigError("config key '" + key + "' must be a number or a fraction string");
}

template <typename T>
T get(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace

Precision precision_from_env() {
  const char* value = std::getenv("TWOBP_PRECISION");
  if (value == nullptr || std::string_view(value).empty() || std::string_view(value) == "double") {
    return Precision::Double;
  }
  if (std::string_view(value) == "single") return Precision::Single;
  throw ConfigError("TWOBP_PRECISION must be 'single' or 'double', got '" + std::string(value) + "'");
}

ScheduleConfig RunConfig::schedule() const {
  ScheduleConfig cfg;
  cfg.kind = kind;
  cfg.ranks = ranks;
  cfg.micro_batches = micro_batches;
  cfg.two_bp = two_bp;
  cfg.b2_mode = b2_mode;
  return cfg;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig cfg;
  if (model == "transformer") {
    cfg.blocks = toy_transformer_blocks(blocks, width, classes);
  } else if (model == "mlp") {
    cfg.blocks = toy_mlp_blocks(blocks, width, classes);
  } else {
    throw ConfigError("unknown model '" + model + "' (expected transformer or mlp)");
  }
  cfg.stage_boundaries = stage_boundaries.empty() ? uniform_boundaries(blocks, static_cast<std::size_t>(ranks))
                                                  : stage_boundaries;
  return cfg;
}

CostModel RunConfig::cost_model() const {
  CostModel costs;
  if (t_f) costs.defaults.forward = *t_f;
  if (t_b1) costs.defaults.backward_p1 = *t_b1;
  if (t_b2) costs.defaults.backward_p2 = *t_b2;
  costs.comm = t_comm;
  return costs;
}

std::size_t RunConfig::resolved_batch_size() const {
  return batch_size ? batch_size : 2 * static_cast<std::size_t>(schedule().resolved_micro_batches());
}

void RunConfig::validate() const {
  const auto sched = schedule();
  sched.validate();
  if (blocks < static_cast<std::size_t>(ranks)) {
    throw ConfigError("model has " + std::to_string(blocks) + " blocks, fewer than the " + std::to_string(ranks) +
                      " ranks");
  }
  if (width == 0 || classes == 0) throw ConfigError("width and classes must be positive");
  if (model == "transformer" && seq == 0) throw ConfigError("the transformer model needs seq >= 1");
  build_model(model_config());
  const auto m = static_cast<std::size_t>(sched.resolved_micro_batches());
  const auto batch = resolved_batch_size();
  if (batch % m != 0) {
    throw ConfigError("batch size " + std::to_string(batch) + " is not divisible by M=" + std::to_string(m));
  }
  cost_model().validate();
  if (release < Rational(0) || release > Rational(1)) throw ConfigError("release must lie in [0, 1]");
  if (optimizer.lr <= 0) throw ConfigError("lr must be positive");
  if (steps == 0 || repeats == 0) throw ConfigError("steps and repeats must be at least 1");
}

void apply_json(RunConfig& config, std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, v] : root.items()) {
    if (key == "kind") {
      config.kind = parse_schedule_kind(get<std::string>(v, key));
    } else if (key == "ranks") {
      config.ranks = get<int>(v, key);
    } else if (key == "micro_batches") {
      config.micro_batches = get<int>(v, key);
    } else if (key == "two_bp") {
      config.two_bp = get<bool>(v, key);
    } else if (key == "b2_mode") {
      config.b2_mode = parse_b2_mode(get<std::string>(v, key));
    } else if (key == "model") {
      config.model = get<std::string>(v, key);
    } else if (key == "blocks") {
      config.blocks = get_count(v, key);
    } else if (key == "width") {
      config.width = get_count(v, key);
    } else if (key == "seq") {
      config.seq = get_count(v, key);
    } else if (key == "classes") {
      config.classes = get_count(v, key);
    } else if (key == "stage_boundaries") {
      config.stage_boundaries = get<std::vector<std::size_t>>(v, key);
    } else if (key == "optimizer") {
      config.optimizer.kind = parse_optimizer_kind(get<std::string>(v, key));
    } else if (key == "lr") {
      config.optimizer.lr = get<double>(v, key);
    } else if (key == "beta1") {
      config.optimizer.beta1 = get<double>(v, key);
    } else if (key == "beta2") {
      config.optimizer.beta2 = get<double>(v, key);
    } else if (key == "eps") {
      config.optimizer.eps = get<double>(v, key);
    } else if (key == "batch_size") {
      config.batch_size = get_count(v, key);
    } else if (key == "seed") {
      config.seed = get<std::uint64_t>(v, key);
    } else if (key == "t_f") {
      config.t_f = to_rational(v, key);
    } else if (key == "t_b1") {
      config.t_b1 = to_rational(v, key);
    } else if (key == "t_b2") {
      config.t_b2 = to_rational(v, key);
    } else if (key == "t_comm") {
      config.t_comm = to_rational(v, key);
    } else if (key == "release") {
      config.release = to_rational(v, key);
    } else if (key == "steps") {
      config.steps = get_count(v, key);
    } else if (key == "repeats") {
      config.repeats = get_count(v, key);
    } else if (key == "compare_2bp") {
      config.compare_2bp = get<bool>(v, key);
    } else if (key == "out") {
      config.out = get<std::string>(v, key);
    } else if (key == "trace") {
      config.trace = get<std::string>(v, key);
    } else if (key == "inject_fault") {
      config.inject_fault = get<std::string>(v, key);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
}

void apply_config_file(RunConfig& config, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  apply_json(config, text.str());
}

}  // namespace twobp
