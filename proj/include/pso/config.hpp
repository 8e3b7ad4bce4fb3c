#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pso/core.hpp"
#include "pso/synthenv.hpp"

namespace pso {

enum class RunMode { synthetic, remote };

inline std::string to_string(RunMode m) { return m == RunMode::synthetic ? "synthetic" : "remote"; }

struct ModeConfig {
  RunMode mode = RunMode::synthetic;
  std::string endpoint;
  std::string model = "default";
  double temperature = 1.0;
  bool export_pairs = false;
  // evaluation knobs, reported alongside results
  int eval_trials = 2000;
  int eval_samples_per_query = 32;
  std::vector<int> eval_ks = {1, 2, 4, 8};
};

struct AppConfig {
  RunConfig run;
  EnvSpec env;
  ModeConfig mode;
};

namespace config {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key \"" + key + "\": expected true/false, got \"" + v + "\"");
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\": expected a number, got \"" + v + "\"");
  }
}

inline long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long x = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\": expected an integer, got \"" + v + "\"");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config key \"" + key + "\": expected an unsigned integer, got \"" + v + "\"");
  }
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<int>(parse_int(key, item)));
  }
  if (out.empty()) throw ConfigError("config key \"" + key + "\": empty list");
  return out;
}

}  // namespace detail

inline void apply_run_key(RunConfig& run, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "group_size") run.group_size = static_cast<int>(parse_int(key, value));
  else if (key == "lambda") run.lambda = parse_double(key, value);
  else if (key == "tau") run.tau = parse_double(key, value);
  else if (key == "memory_capacity") run.memory_capacity = static_cast<int>(parse_int(key, value));
  else if (key == "retrieve_n") run.retrieve_n = static_cast<int>(parse_int(key, value));
  else if (key == "beta_dpo") run.beta_dpo = parse_double(key, value);
  else if (key == "beta_kl") run.beta_kl = parse_double(key, value);
  else if (key == "learning_rate") run.learning_rate = parse_double(key, value);
  else if (key == "epochs") run.epochs = static_cast<int>(parse_int(key, value));
  else if (key == "seed") run.seed = parse_u64(key, value);
  else if (key == "disable_thinking_reward") run.disable_thinking_reward = parse_bool(key, value);
  else if (key == "disable_memory") run.disable_memory = parse_bool(key, value);
  else if (key == "offline_dpo_mode") run.offline_dpo_mode = parse_bool(key, value);
  else if (key == "grpo_steps") run.grpo_steps = static_cast<int>(parse_int(key, value));
  else if (key == "avoidance_mode") run.avoidance_mode = avoidance_mode_from_string(value);
  else if (key == "penalty_delta") run.penalty_delta = parse_double(key, value);
  else if (key == "lowest_only") run.lowest_only = parse_bool(key, value);
  else if (key == "inject_replayed") run.inject_replayed = parse_bool(key, value);
  else if (key == "rescore_replayed") run.rescore_replayed = parse_bool(key, value);
  else if (key == "ref_refresh_every") run.ref_refresh_every = static_cast<int>(parse_int(key, value));
  else if (key == "enable_ratio_clip") run.enable_ratio_clip = parse_bool(key, value);
  else if (key == "ratio_clip") run.ratio_clip = parse_double(key, value);
  else if (key == "judge_noise_sigma") run.judge_noise_sigma = parse_double(key, value);
  else throw ConfigError("unknown [run] config key \"" + key + "\"");
}

inline void apply_env_key(EnvSpec& env, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "num_queries") env.num_queries = static_cast<int>(parse_int(key, value));
  else if (key == "paths_per_query") env.paths_per_query = static_cast<int>(parse_int(key, value));
  else if (key == "initial_correct_mass") env.initial_correct_mass = parse_double(key, value);
  else if (key == "fraction_lucky_paths") env.fraction_lucky_paths = parse_double(key, value);
  else if (key == "quality_noise_sigma") env.quality_noise_sigma = parse_double(key, value);
  else throw ConfigError("unknown [env] config key \"" + key + "\"");
}

inline void apply_mode_key(ModeConfig& mode, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "mode") {
    if (value == "synthetic") mode.mode = RunMode::synthetic;
    else if (value == "remote") mode.mode = RunMode::remote;
    else throw ConfigError("config key \"mode\": expected synthetic or remote, got \"" + value + "\"");
  } else if (key == "endpoint") mode.endpoint = value;
  else if (key == "model") mode.model = value;
  else if (key == "temperature") mode.temperature = parse_double(key, value);
  else if (key == "export_pairs") mode.export_pairs = parse_bool(key, value);
  else if (key == "eval_trials") mode.eval_trials = static_cast<int>(parse_int(key, value));
  else if (key == "eval_samples_per_query")
    mode.eval_samples_per_query = static_cast<int>(parse_int(key, value));
  else if (key == "eval_ks") mode.eval_ks = parse_int_list(key, value);
  else throw ConfigError("unknown [mode] config key \"" + key + "\"");
}

/// Sections [run], [env], [mode]; `key = value` lines; '#' comments.
inline AppConfig parse_config_text(std::istream& in) {
  AppConfig cfg;
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string s = detail::trim(line);
    std::size_t hash = s.find('#');
    if (hash != std::string::npos) s = detail::trim(s.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      section = s.substr(1, s.size() - 2);
      if (section != "run" && section != "env" && section != "mode")
        throw ConfigError("unknown config section [" + section + "]");
      continue;
    }
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = detail::trim(s.substr(0, eq));
    std::string value = detail::trim(s.substr(eq + 1));
    if (section == "run") apply_run_key(cfg.run, key, value);
    else if (section == "env") apply_env_key(cfg.env, key, value);
    else if (section == "mode") apply_mode_key(cfg.mode, key, value);
    else throw ConfigError("config key \"" + key + "\" appears before any section header");
  }
  cfg.run.validate();
  cfg.env.validate();
  return cfg;
}

inline AppConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path);
  return parse_config_text(in);
}

}  // namespace config
}  // namespace pso
