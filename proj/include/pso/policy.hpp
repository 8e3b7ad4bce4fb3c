#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pso/core.hpp"
#include "pso/rng.hpp"

namespace pso {

/// Tabular logits, one vector per query indexed by path_id.
struct PolicyParams {
  std::map<std::string, std::vector<double>> logits;
  long version = 0;

  const std::vector<double>& logits_for(const std::string& query_id) const {
    auto it = logits.find(query_id);
    if (it == logits.end()) throw Error("policy has no logits for query \"" + query_id + "\"");
    return it->second;
  }
};

enum class SnapshotRole { reference, behavior };

/// Frozen copy of PolicyParams (value semantics keep it immutable).
struct PolicySnapshot {
  PolicyParams params;
  SnapshotRole role = SnapshotRole::reference;
};

/// Sparse gradient over logits, keyed by query id.
using Gradient = std::map<std::string, std::vector<double>>;

inline void axpy(std::vector<double>& acc, double scale, const std::vector<double>& g) {
  if (acc.size() < g.size()) acc.resize(g.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) acc[i] += scale * g[i];
}

namespace policy {

inline double logsumexp(const std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  double lse = logsumexp(logits);
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

inline std::vector<double> probs(const PolicyParams& params, const std::string& query_id) {
  return softmax(params.logits_for(query_id));
}

inline double log_prob(const PolicyParams& params, const std::string& query_id, int path_id) {
  const auto& l = params.logits_for(query_id);
  if (path_id < 0 || path_id >= static_cast<int>(l.size()))
    throw Error("path_id " + std::to_string(path_id) + " out of range for query \"" + query_id + "\"");
  return l[path_id] - logsumexp(l);
}

/// d log pi(path_id) / d logits: indicator minus softmax; components sum to 0.
inline std::vector<double> grad_log_prob(const PolicyParams& params, const std::string& query_id,
                                         int path_id) {
  auto p = probs(params, query_id);
  if (path_id < 0 || path_id >= static_cast<int>(p.size()))
    throw Error("path_id " + std::to_string(path_id) + " out of range for query \"" + query_id + "\"");
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = -p[i];
  g[path_id] += 1.0;
  return g;
}

/// Exact KL(pi_theta || pi_snapshot) restricted to one query.
inline double kl_to(const PolicyParams& params, const PolicySnapshot& snapshot,
                    const std::string& query_id) {
  const auto& cur = params.logits_for(query_id);
  const auto& ref = snapshot.params.logits_for(query_id);
  if (cur.size() != ref.size()) throw Error("snapshot path count mismatch for \"" + query_id + "\"");
  double lse_cur = logsumexp(cur);
  double lse_ref = logsumexp(ref);
  double kl = 0.0;
  for (std::size_t i = 0; i < cur.size(); ++i) {
    double lp = cur[i] - lse_cur;
    double lr = ref[i] - lse_ref;
    kl += std::exp(lp) * (lp - lr);
  }
  return std::max(kl, 0.0);  // clamp the tiny negative left by rounding
}

/// Exact gradient of kl_to w.r.t. the query's logits:
/// dKL/ds_j = pi_j * ((log pi_j - log ref_j) - KL).
inline std::vector<double> kl_grad(const PolicyParams& params, const PolicySnapshot& snapshot,
                                   const std::string& query_id) {
  const auto& cur = params.logits_for(query_id);
  const auto& ref = snapshot.params.logits_for(query_id);
  double lse_cur = logsumexp(cur);
  double lse_ref = logsumexp(ref);
  double kl = 0.0;
  std::vector<double> lp(cur.size()), lr(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i) {
    lp[i] = cur[i] - lse_cur;
    lr[i] = ref[i] - lse_ref;
    kl += std::exp(lp[i]) * (lp[i] - lr[i]);
  }
  std::vector<double> g(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i) g[i] = std::exp(lp[i]) * ((lp[i] - lr[i]) - kl);
  return g;
}

struct AvoidanceConfig {
  AvoidanceMode mode = AvoidanceMode::soft_penalty;
  double penalty_delta = 2.0;
};

inline AvoidanceConfig avoidance_from(const RunConfig& cfg) {
  return {cfg.avoidance_mode, cfg.penalty_delta};
}

/// Draw `count` trajectories from softmax(logits[query]). A nonempty
/// `forbidden` set reshapes the sampling distribution only (hard mask or soft
/// logit penalty); logprob_behavior is always recorded under the unrestricted
/// policy.
inline std::vector<Trajectory> sample(const PolicyParams& params, const std::string& query_id,
                                      int count, RandomStream& rng,
                                      const std::set<int>& forbidden = {},
                                      const AvoidanceConfig& avoidance = {}) {
  if (count < 1) throw Error("sample: count must be >= 1");
  const auto& logits = params.logits_for(query_id);
  for (int f : forbidden)
    if (f < 0 || f >= static_cast<int>(logits.size()))
      throw Error("sample: forbidden path " + std::to_string(f) + " out of range");
  if (!forbidden.empty() && forbidden.size() >= logits.size())
    throw Error("sample: forbidden set covers all paths of \"" + query_id + "\"");

  std::vector<double> sampling_logits = logits;
  if (!forbidden.empty()) {
    for (int f : forbidden) {
      if (avoidance.mode == AvoidanceMode::hard_mask)
        sampling_logits[f] = -std::numeric_limits<double>::infinity();
      else
        sampling_logits[f] -= avoidance.penalty_delta;
    }
  }
  // softmax over possibly -inf entries: exp(-inf - m) = 0, mask drops out
  double m = *std::max_element(sampling_logits.begin(), sampling_logits.end());
  std::vector<double> weights(sampling_logits.size());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = std::exp(sampling_logits[i] - m);

  double lse = logsumexp(logits);
  std::vector<Trajectory> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    int path = rng.sample_discrete(weights);
    Trajectory t;
    t.query_id = query_id;
    t.path_id = path;
    t.logprob_behavior = logits[path] - lse;
    t.source = TrajectorySource::fresh_sample;
    out.push_back(std::move(t));
  }
  return out;
}

inline PolicySnapshot snapshot(const PolicyParams& params, SnapshotRole role) {
  return PolicySnapshot{params, role};
}

/// One ascent step: logits += learning_rate * gradient; bumps version.
inline void apply_gradient(PolicyParams& params, const Gradient& gradient, double learning_rate) {
  if (!std::isfinite(learning_rate)) throw Error("apply_gradient: non-finite learning rate");
  for (const auto& [query_id, g] : gradient) {
    auto it = params.logits.find(query_id);
    if (it == params.logits.end()) throw Error("apply_gradient: unknown query \"" + query_id + "\"");
    if (g.size() != it->second.size())
      throw Error("apply_gradient: gradient size mismatch for \"" + query_id + "\"");
    for (double v : g)
      if (!std::isfinite(v)) throw Error("apply_gradient: non-finite gradient component");
  }
  for (const auto& [query_id, g] : gradient) {
    auto& logits = params.logits[query_id];
    for (std::size_t i = 0; i < g.size(); ++i) logits[i] += learning_rate * g[i];
  }
  params.version += 1;
}

// checkpoint file: first line {"version":N}, then one (query_id, path_id, logit) per line
inline void save_checkpoint(const PolicyParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write policy checkpoint: " + path);
  ordered_json head;
  head["version"] = params.version;
  out << head.dump() << '\n';
  for (const auto& [query_id, logits] : params.logits) {
    for (std::size_t p = 0; p < logits.size(); ++p) {
      ordered_json rec;
      rec["query_id"] = query_id;
      rec["path_id"] = static_cast<int>(p);
      rec["logit"] = logits[p];
      out << rec.dump() << '\n';
    }
  }
}

inline PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("policy checkpoint not found: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("policy checkpoint is empty: " + path);
  PolicyParams params;
  try {
    params.version = json::parse(line).at("version").get<long>();
  } catch (const json::exception& e) {
    throw ParseError("policy checkpoint line 1: " + std::string(e.what()));
  }
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json rec = json::parse(line);
      const auto query_id = rec.at("query_id").get<std::string>();
      int path_id = rec.at("path_id").get<int>();
      double logit = rec.at("logit").get<double>();
      if (!std::isfinite(logit)) throw ParseError("non-finite logit");
      auto& v = params.logits[query_id];
      if (static_cast<int>(v.size()) != path_id)
        throw ParseError("path ids out of order for \"" + query_id + "\"");
      v.push_back(logit);
    } catch (const json::exception& e) {
      throw ParseError("policy checkpoint line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return params;
}

}  // namespace policy
}  // namespace pso
