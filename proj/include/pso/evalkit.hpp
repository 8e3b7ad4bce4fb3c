#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pso/core.hpp"
#include "pso/policy.hpp"
#include "pso/reward.hpp"
#include "pso/rng.hpp"
#include "pso/synthenv.hpp"

namespace pso::evalkit {

/// Closed-form pass@k for the tabular policy: 1 - (1 - p_c)^k with p_c the
/// probability mass on correct paths. Synthetic mode only.
inline double pass_at_k_exact(const PolicyParams& params, const Environment& env,
                              const std::string& query_id, int k) {
  if (k < 1) throw Error("pass_at_k_exact: k must be >= 1");
  double p_c = synthenv::correct_mass(params, env, query_id);
  return 1.0 - std::pow(1.0 - p_c, static_cast<double>(k));
}

/// Unbiased combinatorial estimator 1 - C(n-c, k) / C(n, k), evaluated as a
/// product of ratios so nothing overflows.
inline double pass_at_k_unbiased(int n, int c, int k) {
  if (n < 1 || c < 0 || c > n) throw Error("pass_at_k_unbiased: need 0 <= c <= n, n >= 1");
  if (k < 1 || k > n) throw Error("pass_at_k_unbiased: need 1 <= k <= n");
  if (n - c < k) return 1.0;  // every k-subset hits a correct sample
  double ratio = 1.0;
  for (int i = 0; i < k; ++i)
    ratio *= static_cast<double>(n - c - i) / static_cast<double>(n - i);
  return 1.0 - ratio;
}

using SampleFn = std::function<std::vector<Trajectory>(const Query&, int, RandomStream&)>;
using CorrectFn = std::function<bool(const Trajectory&)>;

/// Monte-Carlo pass@k: fraction of trials in which at least one of k
/// independent samples is outcome-correct.
inline double pass_at_k_mc(const SampleFn& sample, const CorrectFn& correct, const Query& query,
                           int k, int trials, RandomStream& rng) {
  if (trials < 1) throw Error("pass_at_k_mc: trials must be >= 1");
  if (k < 1) throw Error("pass_at_k_mc: k must be >= 1");
  long hits = 0;
  for (int t = 0; t < trials; ++t) {
    auto draws = sample(query, k, rng);
    for (const auto& d : draws) {
      if (correct(d)) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(trials);
}

/// Synthetic-mode Monte-Carlo pass@k against the unmodified policy.
inline double pass_at_k_mc(const PolicyParams& params, const Environment& env, const Query& query,
                           int k, int trials, RandomStream& rng) {
  SampleFn sample = [&params](const Query& q, int count, RandomStream& r) {
    return policy::sample(params, q.id, count, r);
  };
  CorrectFn correct = [&env](const Trajectory& t) { return synthenv::label_of(env, t).is_correct; };
  return pass_at_k_mc(sample, correct, query, k, trials, rng);
}

struct PassAtKReport {
  std::vector<int> ks;
  // per estimator: query id -> one value per k
  std::map<std::string, std::vector<double>> exact;
  std::map<std::string, std::vector<double>> monte_carlo;
  std::vector<double> mean_exact;
  std::vector<double> mean_monte_carlo;
  int trials = 0;
  std::uint64_t seed = 0;
};

inline PassAtKReport build_pass_report(const PolicyParams& params, const Environment& env,
                                       const std::vector<Query>& queries,
                                       const std::vector<int>& ks, int trials,
                                       std::uint64_t seed) {
  PassAtKReport report;
  report.ks = ks;
  report.trials = trials;
  report.seed = seed;
  report.mean_exact.assign(ks.size(), 0.0);
  report.mean_monte_carlo.assign(ks.size(), 0.0);
  RandomStream rng = seeded_rng(seed, "eval-mc");
  for (const Query& query : queries) {
    auto& ex = report.exact[query.id];
    auto& mc = report.monte_carlo[query.id];
    for (std::size_t i = 0; i < ks.size(); ++i) {
      ex.push_back(pass_at_k_exact(params, env, query.id, ks[i]));
      mc.push_back(pass_at_k_mc(params, env, query, ks[i], trials, rng));
      report.mean_exact[i] += ex.back();
      report.mean_monte_carlo[i] += mc.back();
    }
  }
  if (!queries.empty()) {
    for (std::size_t i = 0; i < ks.size(); ++i) {
      report.mean_exact[i] /= static_cast<double>(queries.size());
      report.mean_monte_carlo[i] /= static_cast<double>(queries.size());
    }
  }
  return report;
}

inline void save_pass_report(const PassAtKReport& report, const std::string& path) {
  ordered_json doc;
  doc["ks"] = report.ks;
  doc["trials"] = report.trials;
  doc["seed"] = report.seed;
  doc["mean_exact"] = report.mean_exact;
  doc["mean_monte_carlo"] = report.mean_monte_carlo;
  ordered_json per_query = ordered_json::object();
  for (const auto& [qid, vals] : report.exact) {
    ordered_json entry;
    entry["exact"] = vals;
    entry["monte_carlo"] = report.monte_carlo.at(qid);
    per_query[qid] = std::move(entry);
  }
  doc["per_query"] = std::move(per_query);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write pass@k report: " + path);
  out << doc.dump(2) << '\n';
}

inline std::string render_table(const PassAtKReport& report) {
  std::ostringstream os;
  os << "k        exact     monte_carlo\n";
  for (std::size_t i = 0; i < report.ks.size(); ++i) {
    char line[80];
    std::snprintf(line, sizeof(line), "%-8d %-9.5f %-9.5f\n", report.ks[i], report.mean_exact[i],
                  report.mean_monte_carlo[i]);
    os << line;
  }
  return os.str();
}

struct RewardHistogram {
  std::vector<long> counts;  // bins over [0,1]
  double mean = 0.0;
  double median = 0.0;
  long total = 0;
};

/// Samples paths per query from the policy and bins their thinking rewards.
inline RewardHistogram reward_distribution(const PolicyParams& params, const Environment& env,
                                           reward::ThinkingRewardProvider& provider,
                                           const std::vector<Query>& queries, int samples_per_query,
                                           RandomStream& rng, int bins = 20) {
  if (samples_per_query < 1) throw Error("reward_distribution: samples_per_query must be >= 1");
  if (bins < 1) throw Error("reward_distribution: bins must be >= 1");
  RewardHistogram hist;
  hist.counts.assign(bins, 0);
  std::vector<double> scores;
  for (const Query& query : queries) {
    auto draws = policy::sample(params, query.id, samples_per_query, rng);
    for (auto& t : draws) {
      synthenv::realize_text(env, t);
      double s = reward::thinking_reward(provider, query, t, rng);
      scores.push_back(s);
      int bin = std::min(static_cast<int>(s * bins), bins - 1);
      hist.counts[bin] += 1;
    }
  }
  hist.total = static_cast<long>(scores.size());
  if (!scores.empty()) {
    hist.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
    std::sort(scores.begin(), scores.end());
    std::size_t mid = scores.size() / 2;
    hist.median = scores.size() % 2 ? scores[mid] : 0.5 * (scores[mid - 1] + scores[mid]);
  }
  return hist;
}

inline void save_histogram(const RewardHistogram& hist, const std::string& path) {
  ordered_json doc;
  doc["counts"] = hist.counts;
  doc["mean"] = hist.mean;
  doc["median"] = hist.median;
  doc["total"] = hist.total;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write reward histogram: " + path);
  out << doc.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// exact dataset-level expectations (used for the metric report rows)
// ---------------------------------------------------------------------------

struct ExactMeans {
  double stage1_reward = 0.0;   // E[R_format + R_answer], in [0,2]
  double composite = 0.0;       // E[lambda*q + (1-lambda)*correct]
  double outcome = 0.0;         // E[correct]
  double thinking = 0.0;        // E[latent q]
  double pass_at_1 = 0.0;
  double pass_at_k = 0.0;
  double kl_to_ref = 0.0;
};

/// Closed-form expectations of the reward channels under the current policy,
/// averaged over the dataset. Deterministic, so report rows stay bit-stable.
inline ExactMeans exact_means(const PolicyParams& params, const PolicySnapshot& ref,
                              const Environment& env, const std::vector<Query>& queries,
                              const RunConfig& config, int k) {
  ExactMeans m;
  if (queries.empty()) return m;
  const double lambda = config.effective_lambda();
  for (const Query& query : queries) {
    auto p = policy::probs(params, query.id);
    const PathSpace& space = env.space(query.id);
    double e_correct = 0.0, e_think = 0.0, e_format = 0.0;
    for (const PathLabel& label : space.paths) {
      e_correct += p[label.path_id] * (label.is_correct ? 1.0 : 0.0);
      e_think += p[label.path_id] * label.quality;
      e_format += p[label.path_id] * (label.well_formed ? 1.0 : 0.0);
    }
    m.outcome += e_correct;
    m.thinking += e_think;
    m.stage1_reward += e_format + e_correct;
    m.composite += lambda * e_think + (1.0 - lambda) * e_correct;
    m.pass_at_1 += e_correct;
    m.pass_at_k += 1.0 - std::pow(1.0 - e_correct, static_cast<double>(k));
    m.kl_to_ref += policy::kl_to(params, ref, query.id);
  }
  const double n = static_cast<double>(queries.size());
  m.stage1_reward /= n;
  m.composite /= n;
  m.outcome /= n;
  m.thinking /= n;
  m.pass_at_1 /= n;
  m.pass_at_k /= n;
  m.kl_to_ref /= n;
  return m;
}

/// Mean probability mass on correct paths whose latent quality clears the
/// threshold (the ablation comparison metric).
inline double high_quality_correct_mass(const PolicyParams& params, const Environment& env,
                                        const std::vector<Query>& queries,
                                        double quality_threshold = 0.5) {
  if (queries.empty()) return 0.0;
  double acc = 0.0;
  for (const Query& query : queries) {
    auto p = policy::probs(params, query.id);
    for (const PathLabel& label : env.space(query.id).paths)
      if (label.is_correct && label.quality >= quality_threshold) acc += p[label.path_id];
  }
  return acc / static_cast<double>(queries.size());
}

}  // namespace pso::evalkit
