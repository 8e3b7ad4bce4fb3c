#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pso/rng.hpp"

namespace pso {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ScoringError : Error {
  using Error::Error;
};
struct TransportError : Error {
  using Error::Error;
};
struct StageOrderError : Error {
  using Error::Error;
};

enum class TaskKind { numeric, multiple_choice };

inline std::string to_string(TaskKind kind) {
  return kind == TaskKind::numeric ? "numeric" : "multiple_choice";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "numeric") return TaskKind::numeric;
  if (s == "multiple_choice") return TaskKind::multiple_choice;
  throw ParseError("unknown task_kind \"" + s + "\"");
}

/// One problem instance. image_ref is an opaque string, never decoded.
struct Query {
  std::string id;
  std::string prompt;
  std::optional<std::string> image_ref;
  TaskKind task_kind = TaskKind::numeric;
  std::string reference_answer;
  std::vector<std::string> options;  // required iff multiple_choice

  bool operator==(const Query&) const = default;
};

enum class TrajectorySource { fresh_sample, replayed_negative };

inline std::string to_string(TrajectorySource s) {
  return s == TrajectorySource::fresh_sample ? "fresh_sample" : "replayed_negative";
}

/// One sampled reasoning attempt. path_id is set in synthetic mode only.
struct Trajectory {
  std::string query_id;
  std::optional<int> path_id;
  std::string think_text;
  std::string answer_text;
  double logprob_behavior = 0.0;  // log-prob under the unrestricted sampling policy, <= 0
  TrajectorySource source = TrajectorySource::fresh_sample;

  bool operator==(const Trajectory&) const = default;
};

struct RewardBreakdown {
  int format_reward = 0;       // {0,1}
  int outcome_reward = 0;      // {0,1}
  double thinking_reward = 0;  // [0,1]
  double composite = 0;        // [0,1]
  double lambda_used = 0;      // [0,1]

  bool operator==(const RewardBreakdown&) const = default;
};

/// composite must equal lambda*thinking + (1-lambda)*outcome bit-for-bit
/// (it is stored exactly as the blend arithmetic produces it).
inline bool breakdown_consistent(const RewardBreakdown& b) {
  if (b.format_reward != 0 && b.format_reward != 1) return false;
  if (b.outcome_reward != 0 && b.outcome_reward != 1) return false;
  if (!(b.thinking_reward >= 0.0 && b.thinking_reward <= 1.0)) return false;
  if (!(b.lambda_used >= 0.0 && b.lambda_used <= 1.0)) return false;
  double recomputed = b.lambda_used * b.thinking_reward + (1.0 - b.lambda_used) * b.outcome_reward;
  return recomputed == b.composite;
}

enum class AvoidanceMode { soft_penalty, hard_mask };

inline std::string to_string(AvoidanceMode m) {
  return m == AvoidanceMode::soft_penalty ? "soft_penalty" : "hard_mask";
}

inline AvoidanceMode avoidance_mode_from_string(const std::string& s) {
  if (s == "soft_penalty") return AvoidanceMode::soft_penalty;
  if (s == "hard_mask") return AvoidanceMode::hard_mask;
  throw ConfigError("unknown avoidance_mode \"" + s + "\"");
}

struct RunConfig {
  int group_size = 8;
  double lambda = 0.5;
  double tau = 0.5;
  int memory_capacity = 4;
  int retrieve_n = 1;
  double beta_dpo = 0.1;
  double beta_kl = 0.04;
  double learning_rate = 0.5;
  int epochs = 3;
  std::uint64_t seed = 42;

  // ablation switches
  bool disable_thinking_reward = false;
  bool disable_memory = false;
  bool offline_dpo_mode = false;

  // stage-I schedule (sweeps over the dataset)
  int grpo_steps = 30;

  // memory-avoidance realization for the tabular sampler
  AvoidanceMode avoidance_mode = AvoidanceMode::soft_penalty;
  double penalty_delta = 2.0;

  // memory / pairing variants
  bool lowest_only = false;        // store only the group minimum instead of all sub-tau
  bool inject_replayed = true;     // retrieved negatives join the candidate pool
  bool rescore_replayed = false;   // re-judge replayed negatives instead of reusing stored reward
  int ref_refresh_every = 0;       // 0 = reference frozen for all of stage II

  // optional PPO-style ratio clip for the GRPO surrogate
  bool enable_ratio_clip = false;
  double ratio_clip = 0.2;

  double judge_noise_sigma = 0.0;  // synthetic thinking-oracle noise

  void validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (group_size < 1) throw ConfigError("group_size must be positive");
    if (!std::isfinite(lambda) || !in_unit(lambda)) throw ConfigError("lambda must be in [0,1]");
    if (!std::isfinite(tau) || !in_unit(tau)) throw ConfigError("tau must be in [0,1]");
    if (memory_capacity < 1) throw ConfigError("memory_capacity must be positive");
    if (retrieve_n < 0) throw ConfigError("retrieve_n must be non-negative");
    if (retrieve_n > memory_capacity) throw ConfigError("retrieve_n must not exceed memory_capacity");
    if (!(beta_dpo > 0.0) || !std::isfinite(beta_dpo)) throw ConfigError("beta_dpo must be positive");
    if (beta_kl < 0.0 || !std::isfinite(beta_kl)) throw ConfigError("beta_kl must be non-negative");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (grpo_steps < 0) throw ConfigError("grpo_steps must be non-negative");
    if (!std::isfinite(penalty_delta) || penalty_delta < 0.0)
      throw ConfigError("penalty_delta must be non-negative");
    if (ref_refresh_every < 0) throw ConfigError("ref_refresh_every must be non-negative");
    if (!std::isfinite(ratio_clip) || ratio_clip <= 0.0)
      throw ConfigError("ratio_clip must be positive");
    if (!std::isfinite(judge_noise_sigma) || judge_noise_sigma < 0.0)
      throw ConfigError("judge_noise_sigma must be non-negative");
  }

  /// Composite blend weight after ablation flags are applied.
  double effective_lambda() const { return disable_thinking_reward ? 0.0 : lambda; }
};

// ---------------------------------------------------------------------------
// dataset io (line-delimited json, one Query per line)
// ---------------------------------------------------------------------------

namespace detail {

inline Query query_from_json(const json& rec, int line_no) {
  auto fail = [line_no](const std::string& what) -> ParseError {
    return ParseError("dataset line " + std::to_string(line_no) + ": " + what);
  };
  if (!rec.is_object()) throw fail("record is not an object");
  static const std::set<std::string> known = {"id",        "prompt",           "image_ref",
                                              "task_kind", "reference_answer", "options"};
  for (auto it = rec.begin(); it != rec.end(); ++it)
    if (!known.count(it.key())) throw fail("unknown field \"" + it.key() + "\"");
  for (const char* req : {"id", "prompt", "task_kind", "reference_answer"})
    if (!rec.contains(req)) throw fail(std::string("missing field \"") + req + "\"");

  Query q;
  if (!rec["id"].is_string() || rec["id"].get<std::string>().empty())
    throw fail("id must be a nonempty string");
  q.id = rec["id"].get<std::string>();
  if (!rec["prompt"].is_string()) throw fail("prompt must be a string");
  q.prompt = rec["prompt"].get<std::string>();
  if (rec.contains("image_ref")) {
    if (!rec["image_ref"].is_string()) throw fail("image_ref must be a string");
    q.image_ref = rec["image_ref"].get<std::string>();
  }
  try {
    q.task_kind = task_kind_from_string(rec["task_kind"].get<std::string>());
  } catch (const ParseError& e) {
    throw fail(e.what());
  }
  if (!rec["reference_answer"].is_string()) throw fail("reference_answer must be a string");
  q.reference_answer = rec["reference_answer"].get<std::string>();

  if (q.task_kind == TaskKind::multiple_choice) {
    if (!rec.contains("options") || !rec["options"].is_array())
      throw fail("multiple_choice record requires an options array");
    for (const auto& o : rec["options"]) {
      if (!o.is_string()) throw fail("options must be strings");
      q.options.push_back(o.get<std::string>());
    }
    if (q.options.size() < 2) throw fail("multiple_choice record needs at least 2 options");
    bool found = false;
    for (const auto& o : q.options) found = found || o == q.reference_answer;
    if (!found) throw fail("reference_answer is not among the options");
  } else if (rec.contains("options")) {
    throw fail("numeric record must not carry options");
  }
  return q;
}

inline ordered_json query_to_json(const Query& q) {
  ordered_json rec;
  rec["id"] = q.id;
  rec["prompt"] = q.prompt;
  if (q.image_ref) rec["image_ref"] = *q.image_ref;
  rec["task_kind"] = to_string(q.task_kind);
  rec["reference_answer"] = q.reference_answer;
  if (q.task_kind == TaskKind::multiple_choice) rec["options"] = q.options;
  return rec;
}

}  // namespace detail

inline std::vector<Query> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("dataset file not found: " + path);
  std::vector<Query> queries;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    Query q = detail::query_from_json(rec, line_no);
    if (!seen.insert(q.id).second)
      throw ParseError("dataset line " + std::to_string(line_no) + ": duplicate id \"" + q.id + "\"");
    queries.push_back(std::move(q));
  }
  return queries;
}

inline void save_dataset(const std::vector<Query>& queries, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write dataset file: " + path);
  for (const auto& q : queries) out << detail::query_to_json(q).dump() << '\n';
}

// ---------------------------------------------------------------------------
// metric report (line-delimited, one record per logged step)
// ---------------------------------------------------------------------------

struct MetricRow {
  long step = 0;
  std::string stage;
  double mean_composite = 0;
  double mean_outcome = 0;
  double mean_thinking = 0;
  double pass_at_1 = 0;
  double pass_at_k = 0;
  double kl_to_ref = 0;

  bool operator==(const MetricRow&) const = default;
};

inline ordered_json metric_row_to_json(const MetricRow& r) {
  ordered_json rec;
  rec["step"] = r.step;
  rec["stage"] = r.stage;
  rec["mean_composite"] = r.mean_composite;
  rec["mean_outcome"] = r.mean_outcome;
  rec["mean_thinking"] = r.mean_thinking;
  rec["pass_at_1"] = r.pass_at_1;
  rec["pass_at_k"] = r.pass_at_k;
  rec["kl_to_ref"] = r.kl_to_ref;
  return rec;
}

inline MetricRow metric_row_from_json(const json& rec) {
  MetricRow r;
  r.step = rec.at("step").get<long>();
  r.stage = rec.at("stage").get<std::string>();
  r.mean_composite = rec.at("mean_composite").get<double>();
  r.mean_outcome = rec.at("mean_outcome").get<double>();
  r.mean_thinking = rec.at("mean_thinking").get<double>();
  r.pass_at_1 = rec.at("pass_at_1").get<double>();
  r.pass_at_k = rec.at("pass_at_k").get<double>();
  r.kl_to_ref = rec.at("kl_to_ref").get<double>();
  return r;
}

/// Collects metric rows in memory and optionally mirrors them to a file,
/// one flushed line per row.
class MetricSink {
 public:
  MetricSink() = default;

  explicit MetricSink(const std::string& path) : path_(path) {
    out_.open(path, std::ios::app);
    if (!out_) throw Error("cannot open metric report for append: " + path);
  }

  void log(const MetricRow& row) {
    rows_.push_back(row);
    if (out_.is_open()) {
      out_ << metric_row_to_json(row).dump() << '\n';
      out_.flush();
    }
  }

  const std::vector<MetricRow>& rows() const { return rows_; }

 private:
  std::vector<MetricRow> rows_;
  std::string path_;
  std::ofstream out_;
};

inline std::vector<MetricRow> load_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("metric report not found: " + path);
  std::vector<MetricRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      rows.push_back(metric_row_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError("metric report line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace pso
