#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <string>
#include <utility>

#include "pso/core.hpp"
#include "pso/rng.hpp"
#include "pso/synthenv.hpp"

namespace pso::reward {

struct ThinkAnswer {
  std::string think;
  std::string answer;
};

/// Strict structural parse: exactly one <think>...</think> followed by one
/// <answer>...</answer>, both nonempty, nothing but whitespace elsewhere.
inline std::optional<ThinkAnswer> parse_think_answer(const std::string& text) {
  auto find_once = [&](const std::string& open, const std::string& close, std::size_t from)
      -> std::optional<std::pair<std::string, std::size_t>> {
    std::size_t o = text.find(open, from);
    if (o == std::string::npos) return std::nullopt;
    std::size_t c = text.find(close, o + open.size());
    if (c == std::string::npos) return std::nullopt;
    if (text.find(open, o + open.size()) != std::string::npos) return std::nullopt;  // duplicate
    return std::make_pair(text.substr(o + open.size(), c - o - open.size()), c + close.size());
  };
  auto only_space = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      if (!std::isspace(static_cast<unsigned char>(text[i]))) return false;
    return true;
  };

  std::size_t think_open = text.find("<think>");
  if (think_open == std::string::npos || !only_space(0, think_open)) return std::nullopt;
  auto think = find_once("<think>", "</think>", 0);
  if (!think || think->first.empty()) return std::nullopt;
  std::size_t answer_open = text.find("<answer>", think->second);
  if (answer_open == std::string::npos || !only_space(think->second, answer_open))
    return std::nullopt;
  auto answer = find_once("<answer>", "</answer>", think->second);
  if (!answer || answer->first.empty()) return std::nullopt;
  if (!only_space(answer->second, text.size())) return std::nullopt;
  return ThinkAnswer{think->first, answer->first};
}

/// Raw-text form of the format reward.
inline int format_reward_text(const std::string& raw) {
  return parse_think_answer(raw) ? 1 : 0;
}

/// Format reward for a parsed trajectory (remote mode: the strict parser only
/// fills both segments on an exact single match, so nonempty segments encode
/// a clean parse).
inline int format_reward(const Trajectory& trajectory) {
  return (!trajectory.think_text.empty() && !trajectory.answer_text.empty()) ? 1 : 0;
}

/// Synthetic-mode format reward reads the path's ground-truth flag.
inline int format_reward(const Trajectory& trajectory, const Environment& env) {
  return synthenv::label_of(env, trajectory).well_formed ? 1 : 0;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* begin = s.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end != begin + s.size()) return std::nullopt;
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

inline bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

/// First standalone occurrence of any option label; earliest position wins.
inline std::optional<std::string> extract_option(const std::string& answer,
                                                 const std::vector<std::string>& options) {
  std::size_t best_pos = std::string::npos;
  std::string best;
  for (const auto& opt : options) {
    if (opt.empty()) continue;
    std::size_t from = 0;
    while (true) {
      std::size_t pos = answer.find(opt, from);
      if (pos == std::string::npos) break;
      bool left_ok = pos == 0 || !is_word_char(answer[pos - 1]);
      std::size_t after = pos + opt.size();
      bool right_ok = after >= answer.size() || !is_word_char(answer[after]);
      if (left_ok && right_ok) {
        if (pos < best_pos) {
          best_pos = pos;
          best = opt;
        }
        break;
      }
      from = pos + 1;
    }
  }
  if (best_pos == std::string::npos) return std::nullopt;
  return best;
}

}  // namespace detail

/// Binary answer-correctness reward. Numeric answers compare with relative
/// tolerance 1e-9 once both sides parse as numbers; anything unparseable
/// scores 0 unless the trimmed strings match exactly.
inline int outcome_reward(const Trajectory& trajectory, const Query& query) {
  std::string answer = detail::trim(trajectory.answer_text);
  std::string reference = detail::trim(query.reference_answer);
  if (query.task_kind == TaskKind::multiple_choice) {
    auto extracted = detail::extract_option(answer, query.options);
    return (extracted && *extracted == reference) ? 1 : 0;
  }
  auto a = detail::parse_number(answer);
  auto r = detail::parse_number(reference);
  if (a && r) {
    double scale = std::max({std::fabs(*a), std::fabs(*r), 1.0});
    return std::fabs(*a - *r) <= 1e-9 * scale ? 1 : 0;
  }
  return answer == reference && !answer.empty() ? 1 : 0;
}

/// Process-level score in [0,1], independent of the outcome reward.
class ThinkingRewardProvider {
 public:
  virtual ~ThinkingRewardProvider() = default;
  virtual double score(const Query& query, const Trajectory& trajectory, RandomStream& rng) = 0;
  virtual std::string kind() const = 0;
};

/// Reads the path's latent quality and adds optional Gaussian noise,
/// clamped to [0,1].
class SyntheticOracleProvider final : public ThinkingRewardProvider {
 public:
  SyntheticOracleProvider(const Environment& env, double noise_sigma = 0.0)
      : env_(&env), noise_sigma_(noise_sigma) {
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  }

  double score(const Query&, const Trajectory& trajectory, RandomStream& rng) override {
    double q = synthenv::label_of(*env_, trajectory).quality;
    if (noise_sigma_ > 0.0) q += rng.normal(0.0, noise_sigma_);
    return std::clamp(q, 0.0, 1.0);
  }

  std::string kind() const override { return "synthetic_oracle"; }

 private:
  const Environment* env_;
  double noise_sigma_;
};

inline double thinking_reward(ThinkingRewardProvider& provider, const Query& query,
                              const Trajectory& trajectory, RandomStream& rng) {
  double v = provider.score(query, trajectory, rng);
  return std::clamp(v, 0.0, 1.0);
}

/// Composite reward: lambda * R_t + (1 - lambda) * R_o.
inline double composite_reward(double thinking, double outcome, double lambda) {
  auto in_unit = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  if (!in_unit(thinking)) throw Error("composite_reward: thinking reward out of [0,1]");
  if (!in_unit(outcome)) throw Error("composite_reward: outcome reward out of [0,1]");
  if (!in_unit(lambda)) throw Error("composite_reward: lambda out of [0,1]");
  return lambda * thinking + (1.0 - lambda) * outcome;
}

/// Assembles a breakdown whose composite is exactly the blend arithmetic,
/// honoring the disable_thinking_reward ablation (lambda treated as 0).
inline RewardBreakdown make_breakdown(int format, int outcome, double thinking,
                                      const RunConfig& config) {
  RewardBreakdown b;
  b.format_reward = format;
  b.outcome_reward = outcome;
  b.thinking_reward = thinking;
  b.lambda_used = config.effective_lambda();
  b.composite = composite_reward(thinking, static_cast<double>(outcome), b.lambda_used);
  return b;
}

/// Stage-I scalar reward R_format + R_answer, in {0,1,2}.
inline int stage1_reward(const Trajectory& trajectory, const Query& query, const Environment& env) {
  return format_reward(trajectory, env) + outcome_reward(trajectory, query);
}

inline int stage1_reward(const Trajectory& trajectory, const Query& query) {
  return format_reward(trajectory) + outcome_reward(trajectory, query);
}

}  // namespace pso::reward
