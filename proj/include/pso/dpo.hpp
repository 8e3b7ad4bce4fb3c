#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pso/core.hpp"
#include "pso/evalkit.hpp"
#include "pso/nrm.hpp"
#include "pso/policy.hpp"
#include "pso/reward.hpp"
#include "pso/synthenv.hpp"

namespace pso {

struct PreferencePair {
  std::string query_id;
  Trajectory chosen;
  Trajectory rejected;
  double reward_chosen = 0.0;
  double reward_rejected = 0.0;
  RewardBreakdown breakdown_chosen;
  RewardBreakdown breakdown_rejected;
};

namespace dpo {

constexpr double kNoContrastEps = 1e-9;

/// Retrieves the avoidance set from the bank, samples G fresh trajectories
/// with it applied, and (when injection is on) appends the retrieved
/// negatives themselves so a stored failure can be re-selected as y_l.
inline std::vector<Trajectory> build_candidates(const PolicyParams& params, const Environment& env,
                                                const MemoryBank& bank, const Query& query,
                                                const RunConfig& config, RandomStream& rng) {
  std::vector<MemoryEntry> negatives;
  if (!config.disable_memory) negatives = bank.retrieve_lowest(query.id, config.retrieve_n);

  std::set<int> avoid;
  for (const auto& e : negatives)
    if (e.trajectory.path_id) avoid.insert(*e.trajectory.path_id);

  auto fresh = policy::sample(params, query.id, config.group_size, rng, avoid,
                              policy::avoidance_from(config));
  for (auto& t : fresh) synthenv::realize_text(env, t);

  if (config.inject_replayed && !config.disable_memory)
    for (const auto& e : negatives) fresh.push_back(e.trajectory);
  return fresh;
}

/// argmax/argmin by reward; ties prefer fresh candidates, then lower index.
/// Returns nullopt when the group carries no contrast.
inline std::optional<PreferencePair> select_pair(const std::vector<Trajectory>& candidates,
                                                 const std::vector<double>& rewards,
                                                 const std::vector<RewardBreakdown>& breakdowns) {
  if (candidates.size() < 2 || candidates.size() != rewards.size() ||
      candidates.size() != breakdowns.size())
    throw Error("select_pair: need at least 2 scored candidates");

  auto fresh_rank = [&](std::size_t i) {
    return candidates[i].source == TrajectorySource::fresh_sample ? 0 : 1;
  };
  std::size_t best = 0, worst = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (rewards[i] > rewards[best] ||
        (rewards[i] == rewards[best] && fresh_rank(i) < fresh_rank(best)))
      best = i;
    if (rewards[i] < rewards[worst] ||
        (rewards[i] == rewards[worst] && fresh_rank(i) < fresh_rank(worst)))
      worst = i;
  }
  if (rewards[best] - rewards[worst] < kNoContrastEps) return std::nullopt;

  PreferencePair pair;
  pair.query_id = candidates[best].query_id;
  pair.chosen = candidates[best];
  pair.rejected = candidates[worst];
  pair.reward_chosen = rewards[best];
  pair.reward_rejected = rewards[worst];
  pair.breakdown_chosen = breakdowns[best];
  pair.breakdown_rejected = breakdowns[worst];
  return pair;
}

struct DpoLossResult {
  double loss = 0.0;    // -log sigma(beta * margin), always > 0
  double margin = 0.0;  // (log pi - log ref) gap between chosen and rejected
  Gradient loss_grad;   // d loss / d logits
};

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Bradley-Terry logistic loss on the reference-anchored log-prob margin,
/// with its analytic gradient. Stable via the softplus form.
inline DpoLossResult dpo_loss(const PolicyParams& params, const PolicySnapshot& ref,
                              const PreferencePair& pair, double beta_dpo) {
  if (!(beta_dpo > 0.0)) throw Error("dpo_loss: beta_dpo must be positive");
  if (!pair.chosen.path_id || !pair.rejected.path_id)
    throw Error("dpo_loss: pair trajectories need path ids");
  const std::string& qid = pair.query_id;
  int w = *pair.chosen.path_id;
  int l = *pair.rejected.path_id;

  double margin = (policy::log_prob(params, qid, w) - policy::log_prob(ref.params, qid, w)) -
                  (policy::log_prob(params, qid, l) - policy::log_prob(ref.params, qid, l));
  if (!std::isfinite(margin)) throw Error("dpo_loss: non-finite margin");

  DpoLossResult out;
  out.margin = margin;
  out.loss = softplus(-beta_dpo * margin);

  double weight = -sigmoid(-beta_dpo * margin) * beta_dpo;  // dL/dmargin * beta chain
  auto& g = out.loss_grad[qid];
  g.assign(params.logits_for(qid).size(), 0.0);
  axpy(g, weight, policy::grad_log_prob(params, qid, w));
  axpy(g, -weight, policy::grad_log_prob(params, qid, l));
  return out;
}

struct ScoredCandidate {
  Trajectory trajectory;
  double reward = 0.0;
  RewardBreakdown breakdown;
};

/// Scores one candidate set with the composite reward. Replayed negatives
/// reuse their stored reward unless rescoring is configured; a judge failure
/// excludes the candidate rather than scoring it 0.
inline std::vector<ScoredCandidate> score_candidates(const std::vector<Trajectory>& candidates,
                                                     const std::vector<double>& replayed_rewards,
                                                     const Query& query, const Environment& env,
                                                     reward::ThinkingRewardProvider& provider,
                                                     const RunConfig& config, RandomStream& rng) {
  std::vector<ScoredCandidate> scored;
  std::size_t replayed_seen = 0;
  for (const auto& t : candidates) {
    int fmt = reward::format_reward(t, env);
    int outcome = reward::outcome_reward(t, query);
    if (t.source == TrajectorySource::replayed_negative && !config.rescore_replayed) {
      double stored = replayed_rewards.at(replayed_seen++);
      const double lambda = config.effective_lambda();
      // reconstruct the thinking component implied by the stored composite
      double think = lambda > 0.0
                         ? std::clamp((stored - (1.0 - lambda) * outcome) / lambda, 0.0, 1.0)
                         : 0.0;
      scored.push_back(ScoredCandidate{t, stored, reward::make_breakdown(fmt, outcome, think, config)});
      continue;
    }
    try {
      double think = reward::thinking_reward(provider, query, t, rng);
      RewardBreakdown b = reward::make_breakdown(fmt, outcome, think, config);
      scored.push_back(ScoredCandidate{t, b.composite, b});
    } catch (const ScoringError&) {
      // excluded: a failed judge call is not evidence of poor reasoning
    }
    if (t.source == TrajectorySource::replayed_negative) ++replayed_seen;
  }
  return scored;
}

struct EpochMetrics {
  double mean_composite = 0.0;  // over scored fresh candidates
  double mean_margin = 0.0;     // over applied updates
  long updates = 0;
  long skips_no_contrast = 0;
  long skips_scoring = 0;
  long reselection_hits = 0;
  long fresh_samples = 0;
  std::vector<std::string> skipped_queries;

  double reselection_rate() const {
    return fresh_samples ? static_cast<double>(reselection_hits) / static_cast<double>(fresh_samples)
                         : 0.0;
  }
};

using PairSink = std::function<void(const PreferencePair&)>;
using RowSink = std::function<void(const MetricRow&)>;

/// One online pass over the dataset: retrieve,
/// sample, score, select, feed the memory, and apply one DPO ascent step per
/// query. Emits one metric row per applied update. The reference snapshot is
/// frozen unless ref_refresh_every is set, in which case it is re-anchored to
/// the current policy every that many updates.
inline EpochMetrics pso_epoch(PolicyParams& params, PolicySnapshot& ref, const Environment& env,
                              MemoryBank& bank, const std::vector<Query>& queries,
                              const RunConfig& config, reward::ThinkingRewardProvider& provider,
                              RandomStream& rng, const RowSink& row_sink = {},
                              const PairSink& pair_sink = {}) {
  EpochMetrics metrics;
  double composite_sum = 0.0;
  long composite_count = 0;
  double margin_sum = 0.0;

  for (const Query& query : queries) {
    // paths on record before this round's stores, for re-selection tracking
    std::set<int> recorded = bank.stored_paths(query.id);

    std::vector<Trajectory> candidates = build_candidates(params, env, bank, query, config, rng);
    std::vector<double> replayed_rewards;
    if (config.inject_replayed && !config.disable_memory)
      for (const auto& e : bank.retrieve_lowest(query.id, config.retrieve_n))
        replayed_rewards.push_back(e.reward);
    for (const auto& t : candidates) {
      if (t.source != TrajectorySource::fresh_sample) continue;
      metrics.fresh_samples += 1;
      if (t.path_id && recorded.count(*t.path_id)) metrics.reselection_hits += 1;
    }

    std::vector<ScoredCandidate> scored =
        score_candidates(candidates, replayed_rewards, query, env, provider, config, rng);
    if (scored.size() < 2) {
      metrics.skips_scoring += 1;
      metrics.skipped_queries.push_back(query.id + " (scoring)");
      continue;
    }

    // store sub-tau fresh candidates; lowest_only keeps just
    // the group minimum
    std::vector<const ScoredCandidate*> fresh_scored;
    for (const auto& sc : scored)
      if (sc.trajectory.source == TrajectorySource::fresh_sample) fresh_scored.push_back(&sc);
    if (config.lowest_only) {
      const ScoredCandidate* lowest = nullptr;
      for (const auto* sc : fresh_scored)
        if (!lowest || sc->reward < lowest->reward) lowest = sc;
      if (lowest) bank.maybe_store(query.id, lowest->trajectory, lowest->reward, config.tau);
    } else {
      for (const auto* sc : fresh_scored)
        bank.maybe_store(query.id, sc->trajectory, sc->reward, config.tau);
    }
    for (const auto* sc : fresh_scored) {
      composite_sum += sc->reward;
      composite_count += 1;
    }

    std::vector<Trajectory> scored_trajs;
    std::vector<double> scored_rewards;
    std::vector<RewardBreakdown> scored_breakdowns;
    for (const auto& sc : scored) {
      scored_trajs.push_back(sc.trajectory);
      scored_rewards.push_back(sc.reward);
      scored_breakdowns.push_back(sc.breakdown);
    }
    auto pair = select_pair(scored_trajs, scored_rewards, scored_breakdowns);
    if (!pair) {
      metrics.skips_no_contrast += 1;
      metrics.skipped_queries.push_back(query.id + " (no contrast)");
      continue;
    }
    if (pair_sink) pair_sink(*pair);

    DpoLossResult loss = dpo_loss(params, ref, *pair, config.beta_dpo);
    Gradient ascent;
    for (const auto& [qid, g] : loss.loss_grad) {
      auto& a = ascent[qid];
      a.assign(g.size(), 0.0);
      axpy(a, -1.0, g);  // ascend the negated loss gradient
    }
    policy::apply_gradient(params, ascent, config.learning_rate);
    metrics.updates += 1;
    margin_sum += loss.margin;
    if (config.ref_refresh_every > 0 && params.version % config.ref_refresh_every == 0)
      ref = policy::snapshot(params, SnapshotRole::reference);

    if (row_sink) {
      auto means = evalkit::exact_means(params, ref, env, queries, config, config.group_size);
      MetricRow row;
      row.step = params.version;
      row.stage = "pso";
      row.mean_composite = means.composite;
      row.mean_outcome = means.outcome;
      row.mean_thinking = means.thinking;
      row.pass_at_1 = means.pass_at_1;
      row.pass_at_k = means.pass_at_k;
      row.kl_to_ref = means.kl_to_ref;
      row_sink(row);
    }
  }

  metrics.mean_composite =
      composite_count ? composite_sum / static_cast<double>(composite_count) : 0.0;
  metrics.mean_margin = metrics.updates ? margin_sum / static_cast<double>(metrics.updates) : 0.0;
  return metrics;
}

/// Offline ablation: pairs are generated once from the entry policy, then the
/// frozen set is replayed for every epoch. The memory stays untouched.
inline std::vector<PreferencePair> pregenerate_pairs(const PolicyParams& params,
                                                     const Environment& env,
                                                     const std::vector<Query>& queries,
                                                     const RunConfig& config,
                                                     reward::ThinkingRewardProvider& provider,
                                                     RandomStream& rng) {
  std::vector<PreferencePair> pairs;
  for (const Query& query : queries) {
    auto candidates = policy::sample(params, query.id, config.group_size, rng);
    for (auto& t : candidates) synthenv::realize_text(env, t);
    auto scored = score_candidates(candidates, {}, query, env, provider, config, rng);
    if (scored.size() < 2) continue;
    std::vector<Trajectory> ts;
    std::vector<double> rs;
    std::vector<RewardBreakdown> bs;
    for (const auto& sc : scored) {
      ts.push_back(sc.trajectory);
      rs.push_back(sc.reward);
      bs.push_back(sc.breakdown);
    }
    if (auto pair = select_pair(ts, rs, bs)) pairs.push_back(std::move(*pair));
  }
  return pairs;
}

}  // namespace dpo
}  // namespace pso
