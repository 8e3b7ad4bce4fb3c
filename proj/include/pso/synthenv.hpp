#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "pso/core.hpp"
#include "pso/policy.hpp"
#include "pso/rng.hpp"

namespace pso {

struct PathLabel {
  int path_id = 0;
  bool is_correct = false;
  double quality = 0.0;  // latent q in [0,1]
  bool well_formed = true;
  std::string think_text;
  std::string answer_text;

  bool operator==(const PathLabel&) const = default;
};

struct PathSpace {
  std::string query_id;
  std::vector<PathLabel> paths;

  bool operator==(const PathSpace&) const = default;
};

struct EnvSpec {
  int num_queries = 50;
  int paths_per_query = 8;
  double initial_correct_mass = 0.3;   // target probability on correct paths at init
  double fraction_lucky_paths = 0.0;   // correct answer, low quality
  double quality_noise_sigma = 0.0;

  void validate() const {
    if (num_queries < 1) throw ConfigError("num_queries must be positive");
    if (paths_per_query < 2) throw ConfigError("paths_per_query must be at least 2");
    if (!(initial_correct_mass > 0.0 && initial_correct_mass < 1.0))
      throw ConfigError("initial_correct_mass must lie strictly inside (0,1)");
    if (!(fraction_lucky_paths >= 0.0 && fraction_lucky_paths < 1.0))
      throw ConfigError("fraction_lucky_paths must lie in [0,1)");
    if (!(quality_noise_sigma >= 0.0) || !std::isfinite(quality_noise_sigma))
      throw ConfigError("quality_noise_sigma must be non-negative");
  }
};

/// Immutable collection of per-query path spaces. std::map keeps iteration
/// order deterministic.
struct Environment {
  std::map<std::string, PathSpace> spaces;

  const PathSpace& space(const std::string& query_id) const {
    auto it = spaces.find(query_id);
    if (it == spaces.end()) throw Error("unknown query \"" + query_id + "\"");
    return it->second;
  }

  bool operator==(const Environment&) const = default;
};

struct GeneratedEnv {
  Environment env;
  std::vector<Query> queries;
  PolicyParams init_policy;
};

namespace synthenv {

// Latent-quality bands. Lucky paths stay at or below kLuckyCap so they remain
// distinguishable from genuinely sound reasoning. The incorrect band sits
// clearly below the mixed correct-band mean, so pushing mass onto correct
// paths lifts the expected thinking quality, while the high-vs-lucky split
// stays invisible to answer-level rewards and is left to the thinking
// channel.
constexpr double kLuckyCap = 0.2;
constexpr double kHighBandLo = 0.7;
constexpr double kHighBandHi = 1.0;
constexpr double kLuckyBandLo = 0.05;
constexpr double kIncorrectBandLo = 0.1;
constexpr double kIncorrectBandHi = 0.5;
constexpr double kMalformedRate = 0.1;  // fraction of incorrect paths without clean structure

inline std::string query_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "q%04d", index);
  return buf;
}

inline std::string templated_think(const std::string& query_id, int path_id, bool is_correct) {
  return "For " + query_id + ", decompose the problem, apply derivation " +
         std::to_string(path_id) + (is_correct ? ", and verify each step." : ", skipping verification.");
}

/// Shared logit per group that puts exactly `mass` probability on `n_correct`
/// of `n_total` paths (incorrect group pinned at logit 0).
inline double solve_correct_logit(double mass, int n_correct, int n_total) {
  int n_incorrect = n_total - n_correct;
  return std::log(mass * n_incorrect / ((1.0 - mass) * n_correct));
}

/// Builds path spaces, matching queries and an initial policy whose
/// per-query correct mass equals spec.initial_correct_mass analytically.
inline GeneratedEnv generate_env(const EnvSpec& spec, RandomStream& rng) {
  spec.validate();
  static const std::vector<std::string> kOptions = {"A", "B", "C", "D"};

  GeneratedEnv out;
  for (int qi = 0; qi < spec.num_queries; ++qi) {
    Query query;
    query.id = query_name(qi);
    const bool choice_task = (qi % 4 == 3);
    query.task_kind = choice_task ? TaskKind::multiple_choice : TaskKind::numeric;
    if (choice_task) {
      query.options = kOptions;
      query.reference_answer = kOptions[rng.uniform_int(static_cast<int>(kOptions.size()))];
      query.prompt = "Problem " + query.id + ": pick the option that satisfies the hidden relation.";
    } else {
      query.reference_answer = std::to_string(10 + rng.uniform_int(90));
      query.prompt = "Problem " + query.id + ": evaluate the hidden expression; answer with one number.";
    }

    const int n_paths = spec.paths_per_query;
    const int n_correct = std::max(1, n_paths / 4);
    std::vector<int> order(n_paths);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n_paths - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
    std::vector<bool> correct(n_paths, false);
    for (int i = 0; i < n_correct; ++i) correct[order[i]] = true;
    const int n_lucky =
        static_cast<int>(std::floor(spec.fraction_lucky_paths * n_correct + 0.5));
    std::vector<bool> lucky(n_paths, false);
    for (int i = 0; i < n_lucky; ++i) lucky[order[i]] = true;

    PathSpace space;
    space.query_id = query.id;
    for (int p = 0; p < n_paths; ++p) {
      PathLabel label;
      label.path_id = p;
      label.is_correct = correct[p];
      double q;
      if (correct[p] && lucky[p])
        q = rng.uniform(kLuckyBandLo, kLuckyCap);
      else if (correct[p])
        q = rng.uniform(kHighBandLo, kHighBandHi);
      else
        q = rng.uniform(kIncorrectBandLo, kIncorrectBandHi);
      if (spec.quality_noise_sigma > 0.0) q += rng.normal(0.0, spec.quality_noise_sigma);
      double cap = (correct[p] && lucky[p]) ? kLuckyCap : 1.0;
      label.quality = std::clamp(q, 0.0, cap);
      label.well_formed = correct[p] ? true : rng.uniform() >= kMalformedRate;
      label.think_text = templated_think(query.id, p, correct[p]);
      if (choice_task) {
        if (correct[p]) {
          label.answer_text = query.reference_answer;
        } else {
          std::string wrong = kOptions[(p + 1) % kOptions.size()];
          if (wrong == query.reference_answer) wrong = kOptions[(p + 2) % kOptions.size()];
          label.answer_text = wrong;
        }
      } else {
        label.answer_text = correct[p]
                                ? query.reference_answer
                                : std::to_string(std::stoi(query.reference_answer) + 1 + p);
      }
      space.paths.push_back(std::move(label));
    }

    const double correct_logit =
        solve_correct_logit(spec.initial_correct_mass, n_correct, n_paths);
    std::vector<double> logits(n_paths, 0.0);
    for (int p = 0; p < n_paths; ++p)
      if (correct[p]) logits[p] = correct_logit;

    out.env.spaces.emplace(query.id, std::move(space));
    out.queries.push_back(std::move(query));
    out.init_policy.logits.emplace(out.queries.back().id, std::move(logits));
  }
  return out;
}

inline const PathLabel& label_of(const Environment& env, const Trajectory& trajectory) {
  const PathSpace& space = env.space(trajectory.query_id);
  if (!trajectory.path_id)
    throw Error("trajectory for \"" + trajectory.query_id + "\" carries no path_id");
  int p = *trajectory.path_id;
  if (p < 0 || p >= static_cast<int>(space.paths.size()))
    throw Error("path_id " + std::to_string(p) + " out of range for query \"" +
                trajectory.query_id + "\"");
  return space.paths[p];
}

/// Copies the labelled think/answer text onto a sampled trajectory.
inline void realize_text(const Environment& env, Trajectory& trajectory) {
  const PathLabel& label = label_of(env, trajectory);
  trajectory.think_text = label.think_text;
  trajectory.answer_text = label.answer_text;
}

/// Total initial-policy probability on correct paths of one query.
inline double correct_mass(const PolicyParams& params, const Environment& env,
                           const std::string& query_id) {
  auto p = policy::probs(params, query_id);
  const PathSpace& space = env.space(query_id);
  double mass = 0.0;
  for (const auto& label : space.paths)
    if (label.is_correct) mass += p[label.path_id];
  return mass;
}

// env snapshot file: one PathSpace per line
inline void save_env(const Environment& env, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write env snapshot: " + path);
  for (const auto& [query_id, space] : env.spaces) {
    ordered_json rec;
    rec["query_id"] = query_id;
    ordered_json paths = ordered_json::array();
    for (const auto& label : space.paths) {
      ordered_json pl;
      pl["path_id"] = label.path_id;
      pl["is_correct"] = label.is_correct;
      pl["quality"] = label.quality;
      pl["well_formed"] = label.well_formed;
      pl["think_text"] = label.think_text;
      pl["answer_text"] = label.answer_text;
      paths.push_back(std::move(pl));
    }
    rec["paths"] = std::move(paths);
    out << rec.dump() << '\n';
  }
}

inline Environment load_env(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("env snapshot not found: " + path);
  Environment env;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json rec = json::parse(line);
      PathSpace space;
      space.query_id = rec.at("query_id").get<std::string>();
      for (const auto& pl : rec.at("paths")) {
        PathLabel label;
        label.path_id = pl.at("path_id").get<int>();
        label.is_correct = pl.at("is_correct").get<bool>();
        label.quality = pl.at("quality").get<double>();
        label.well_formed = pl.at("well_formed").get<bool>();
        label.think_text = pl.at("think_text").get<std::string>();
        label.answer_text = pl.at("answer_text").get<std::string>();
        space.paths.push_back(std::move(label));
      }
      if (space.paths.size() < 2)
        throw ParseError("path space needs at least 2 paths");
      bool any_correct = false;
      for (const auto& p : space.paths) any_correct = any_correct || p.is_correct;
      if (!any_correct)
        throw ParseError("path space for \"" + space.query_id + "\" has no correct path");
      env.spaces.emplace(space.query_id, std::move(space));
    } catch (const json::exception& e) {
      throw ParseError("env snapshot line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return env;
}

}  // namespace synthenv
}  // namespace pso
