#pragma once

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pso/config.hpp"
#include "pso/core.hpp"
#include "pso/pipeline.hpp"

namespace pso::cli {

enum class Verb { gen_env, run_grpo, run_pso, eval, export_pairs, ablate };

struct Command {
  Verb verb = Verb::gen_env;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> mode_override;
};

inline int run(const Command& command) {
  AppConfig cfg = config::parse_config_file(command.config_path);
  if (command.seed_override) cfg.run.seed = *command.seed_override;
  if (command.mode_override) {
    if (*command.mode_override == "synthetic") cfg.mode.mode = RunMode::synthetic;
    else if (*command.mode_override == "remote") cfg.mode.mode = RunMode::remote;
    else throw ConfigError("--mode must be synthetic or remote");
  }

  switch (command.verb) {
    case Verb::gen_env: pipeline::cmd_gen_env(cfg, command.out_dir); break;
    case Verb::run_grpo: pipeline::cmd_run_grpo(cfg, command.out_dir); break;
    case Verb::run_pso: pipeline::cmd_run_pso(cfg, command.out_dir); break;
    case Verb::eval: pipeline::cmd_eval(cfg, command.out_dir); break;
    case Verb::export_pairs: pipeline::cmd_export_pairs(cfg, command.out_dir); break;
    case Verb::ablate: pipeline::cmd_ablate(cfg, command.out_dir); break;
  }
  return 0;
}

/// Parses argv and dispatches; returns the process exit status.
inline int main_impl(const std::vector<std::string>& args) {
  CLI::App app{"Path-select optimization laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> mode_override;

  struct VerbSpec {
    const char* name;
    const char* help;
    Verb verb;
  };
  const std::vector<VerbSpec> verbs = {
      {"gen-env", "generate a synthetic environment, dataset and initial policy", Verb::gen_env},
      {"run-grpo", "stage I: group-relative policy optimization", Verb::run_grpo},
      {"run-pso", "stage II: online preference optimization with negative replay", Verb::run_pso},
      {"eval", "pass@k report and reward distribution for the latest checkpoint", Verb::eval},
      {"export-pairs", "generate preference pairs without updating parameters", Verb::export_pairs},
      {"ablate", "run full PSO plus the three ablated variants on shared seeds", Verb::ablate},
  };
  for (const auto& spec : verbs) {
    CLI::App* sub = app.add_subcommand(spec.name, spec.help);
    sub->add_option("--config", config_path, "config file with [run], [env], [mode] sections")
        ->required();
    sub->add_option("--out", out_dir, "artifact output directory")->required();
    sub->add_option_function<std::uint64_t>(
        "--seed", [&seed_override](const std::uint64_t& v) { seed_override = v; },
        "override the config seed");
    sub->add_option_function<std::string>(
        "--mode", [&mode_override](const std::string& v) { mode_override = v; },
        "override the config mode (synthetic|remote)");
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());  // CLI11 parse order
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  Command command;
  for (const auto& spec : verbs) {
    if (app.get_subcommand(spec.name)->parsed()) {
      command.verb = spec.verb;
      break;
    }
  }
  command.config_path = config_path;
  command.out_dir = out_dir;
  command.seed_override = seed_override;
  command.mode_override = mode_override;

  try {
    return run(command);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace pso::cli
