#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "pso/policy.hpp"
#include "pso/rng.hpp"
#include "pso/synthenv.hpp"

namespace testutil {

namespace fs = std::filesystem;

/// Unique scratch directory, removed on destruction.
struct TempDir {
  fs::path path;

  TempDir() {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("pso-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
  std::string str() const { return path.string(); }
};

inline pso::PolicyParams make_params(const std::string& query_id, std::vector<double> logits) {
  pso::PolicyParams p;
  p.logits[query_id] = std::move(logits);
  return p;
}

inline pso::Trajectory make_traj(const std::string& query_id, int path_id,
                                 const std::string& think = "t", const std::string& answer = "a") {
  pso::Trajectory t;
  t.query_id = query_id;
  t.path_id = path_id;
  t.think_text = think;
  t.answer_text = answer;
  t.logprob_behavior = -1.0;
  return t;
}

/// Hand-built single-query environment: flags give per-path correctness and
/// qualities; answers are "1" for correct paths, distinct wrong numbers
/// otherwise. Returns env + matching query.
struct TinyEnv {
  pso::Environment env;
  pso::Query query;
};

inline TinyEnv make_tiny_env(const std::string& query_id, const std::vector<bool>& correct,
                             const std::vector<double>& quality,
                             const std::vector<bool>& well_formed = {}) {
  TinyEnv out;
  out.query.id = query_id;
  out.query.prompt = "tiny";
  out.query.task_kind = pso::TaskKind::numeric;
  out.query.reference_answer = "1";
  pso::PathSpace space;
  space.query_id = query_id;
  for (std::size_t i = 0; i < correct.size(); ++i) {
    pso::PathLabel label;
    label.path_id = static_cast<int>(i);
    label.is_correct = correct[i];
    label.quality = quality[i];
    label.well_formed = well_formed.empty() ? true : well_formed[i];
    label.think_text = "think " + std::to_string(i);
    label.answer_text = correct[i] ? "1" : std::to_string(100 + i);
    space.paths.push_back(label);
  }
  out.env.spaces.emplace(query_id, std::move(space));
  return out;
}

/// Central finite differences of a scalar function of one query's logits.
inline std::vector<double> fd_grad(pso::PolicyParams params, const std::string& query_id,
                                   const std::function<double(const pso::PolicyParams&)>& f,
                                   double h = 1e-5) {
  auto& logits = params.logits.at(query_id);
  std::vector<double> g(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    double keep = logits[j];
    logits[j] = keep + h;
    double up = f(params);
    logits[j] = keep - h;
    double down = f(params);
    logits[j] = keep;
    g[j] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

/// Relative error between an analytic and a finite-difference gradient,
/// measured in the max norm with a small floor.
inline double grad_rel_error(const std::vector<double>& analytic, const std::vector<double>& fd) {
  double diff = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) diff = std::max(diff, std::fabs(analytic[i] - fd[i]));
  return diff / std::max(max_abs(fd), 1e-8);
}

}  // namespace testutil
