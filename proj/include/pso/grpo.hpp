#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pso/core.hpp"
#include "pso/policy.hpp"
#include "pso/reward.hpp"
#include "pso/synthenv.hpp"

namespace pso {

struct GroupBatch {
  std::string query_id;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;     // R_format + R_answer per trajectory
  std::vector<double> advantages;  // zero mean unless the group is degenerate
};

namespace grpo {

constexpr double kAdvantageEps = 1e-8;

/// Group-standardized advantages: (R_i - mean) / (std_pop + eps). A
/// zero-variance group maps to all-zero advantages.
inline std::vector<double> compute_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw Error("compute_advantages: need at least 2 rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rewards.size());
  double std_pop = std::sqrt(var);
  std::vector<double> adv(rewards.size(), 0.0);
  if (std_pop == 0.0) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / (std_pop + kAdvantageEps);
  return adv;
}

inline GroupBatch make_group_batch(const PolicyParams& params, const Environment& env,
                                   const Query& query, const RunConfig& config,
                                   RandomStream& rng) {
  GroupBatch batch;
  batch.query_id = query.id;
  batch.trajectories = policy::sample(params, query.id, config.group_size, rng);
  for (auto& t : batch.trajectories) {
    synthenv::realize_text(env, t);
    batch.rewards.push_back(static_cast<double>(reward::stage1_reward(t, query, env)));
  }
  batch.advantages = compute_advantages(batch.rewards);
  return batch;
}

/// Surrogate value (1/G) sum_i ratio_i * A_i - beta_kl * KL(pi||ref) for one
/// group, with ratios against the behavior snapshot. Used directly by the
/// finite-difference checks.
inline double surrogate_value(const PolicyParams& params, const PolicySnapshot& behavior,
                              const PolicySnapshot& ref, const GroupBatch& batch,
                              const RunConfig& config) {
  const double g = static_cast<double>(batch.trajectories.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    int path = *batch.trajectories[i].path_id;
    double ratio = std::exp(policy::log_prob(params, batch.query_id, path) -
                            policy::log_prob(behavior.params, batch.query_id, path));
    double term = ratio * batch.advantages[i];
    if (config.enable_ratio_clip) {
      double clipped = std::clamp(ratio, 1.0 - config.ratio_clip, 1.0 + config.ratio_clip) *
                       batch.advantages[i];
      term = std::min(term, clipped);
    }
    acc += term;
  }
  return acc / g - config.beta_kl * policy::kl_to(params, ref, batch.query_id);
}

inline Gradient surrogate_grad(const PolicyParams& params, const PolicySnapshot& behavior,
                               const PolicySnapshot& ref, const GroupBatch& batch,
                               const RunConfig& config) {
  const double g = static_cast<double>(batch.trajectories.size());
  Gradient grad;
  auto& acc = grad[batch.query_id];
  acc.assign(params.logits_for(batch.query_id).size(), 0.0);
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    int path = *batch.trajectories[i].path_id;
    double ratio = std::exp(policy::log_prob(params, batch.query_id, path) -
                            policy::log_prob(behavior.params, batch.query_id, path));
    double a = batch.advantages[i];
    double scale = ratio * a;
    if (config.enable_ratio_clip) {
      // min(r*A, clip(r)*A): the clipped branch is constant in theta, so the
      // gradient vanishes once it is the active side
      bool unclipped_active =
          a >= 0.0 ? ratio <= 1.0 + config.ratio_clip : ratio >= 1.0 - config.ratio_clip;
      if (!unclipped_active) scale = 0.0;
    }
    if (scale != 0.0) axpy(acc, scale / g, policy::grad_log_prob(params, batch.query_id, path));
  }
  if (config.beta_kl != 0.0)
    axpy(acc, -config.beta_kl, policy::kl_grad(params, ref, batch.query_id));
  return grad;
}

struct StepMetrics {
  double mean_reward = 0.0;  // stage-I scale {0,1,2}, averaged over all samples
  double mean_kl = 0.0;      // KL to the stage reference after the sweep
  long updates = 0;
};

/// One sweep over the dataset: per query, sample a fresh group from the
/// current policy (the behavior snapshot at that instant, so ratios are 1),
/// score with R_format + R_answer, and take one ascent step on the surrogate.
inline StepMetrics grpo_step(PolicyParams& params, const PolicySnapshot& ref,
                             const Environment& env, const std::vector<Query>& queries,
                             const RunConfig& config, RandomStream& rng) {
  StepMetrics metrics;
  double reward_sum = 0.0;
  long reward_count = 0;
  for (const Query& query : queries) {
    GroupBatch batch = make_group_batch(params, env, query, config, rng);
    for (double r : batch.rewards) reward_sum += r;
    reward_count += static_cast<long>(batch.rewards.size());

    // fully on-policy: pi_old == current params, every ratio is exactly 1
    Gradient grad;
    auto& acc = grad[query.id];
    acc.assign(params.logits_for(query.id).size(), 0.0);
    const double g = static_cast<double>(batch.trajectories.size());
    for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
      if (batch.advantages[i] == 0.0) continue;
      axpy(acc, batch.advantages[i] / g,
           policy::grad_log_prob(params, query.id, *batch.trajectories[i].path_id));
    }
    if (config.beta_kl != 0.0) axpy(acc, -config.beta_kl, policy::kl_grad(params, ref, query.id));
    policy::apply_gradient(params, grad, config.learning_rate);
    metrics.updates += 1;
  }
  metrics.mean_reward = reward_count ? reward_sum / static_cast<double>(reward_count) : 0.0;
  double kl_sum = 0.0;
  for (const Query& query : queries) kl_sum += policy::kl_to(params, ref, query.id);
  metrics.mean_kl = queries.empty() ? 0.0 : kl_sum / static_cast<double>(queries.size());
  return metrics;
}

}  // namespace grpo
}  // namespace pso
