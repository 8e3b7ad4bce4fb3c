#pragma once

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "pso/core.hpp"
#include "pso/dpo.hpp"
#include "pso/nrm.hpp"
#include "pso/reward.hpp"

namespace pso::backend {

constexpr const char* kChatPath = "/v1/chat/completions";
constexpr const char* kRubricVersion = "pso-rubric-v1";

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::string endpoint;  // base URL, e.g. http://127.0.0.1:8080
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 1.0;
  int sample_count = 1;
};

/// Byte-stable body: fixed field order, so identical inputs serialize to
/// identical bytes (record/replay testing relies on this).
inline std::string serialize_request(const ChatRequest& req) {
  ordered_json body;
  body["model"] = req.model;
  ordered_json messages = ordered_json::array();
  for (const auto& m : req.messages) {
    ordered_json msg;
    msg["role"] = m.role;
    msg["content"] = m.content;
    messages.push_back(std::move(msg));
  }
  body["messages"] = std::move(messages);
  body["temperature"] = req.temperature;
  body["n"] = req.sample_count;
  return body.dump();
}

struct ChatResponse {
  std::vector<std::string> texts;
  std::vector<std::string> finish_reasons;
};

inline ChatResponse parse_response(const std::string& body) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::exception& e) {
    throw ParseError(std::string("chat response is not valid json: ") + e.what());
  }
  if (!doc.contains("choices") || !doc["choices"].is_array() || doc["choices"].empty())
    throw ParseError("chat response carries zero choices");
  ChatResponse out;
  for (const auto& choice : doc["choices"]) {
    out.texts.push_back(choice.at("message").at("content").get<std::string>());
    out.finish_reasons.push_back(choice.value("finish_reason", ""));
  }
  return out;
}

struct BackendConfig {
  std::string endpoint;     // PSO_ENDPOINT overrides
  std::string model = "default";
  std::string api_key;      // from PSO_API_KEY only
  double temperature = 1.0;
  int max_concurrency = 4;
  int timeout_seconds = 30;
  int backoff_ms = 250;     // first retry delay; doubles per attempt
};

inline BackendConfig with_env_overrides(BackendConfig cfg) {
  if (const char* ep = std::getenv("PSO_ENDPOINT")) cfg.endpoint = ep;
  if (const char* key = std::getenv("PSO_API_KEY")) cfg.api_key = key;
  return cfg;
}

/// POST with up to 3 attempts and exponential backoff on transport failure.
inline std::string post_chat(const BackendConfig& cfg, const std::string& body) {
  if (cfg.endpoint.empty()) throw ConfigError("remote mode requires an endpoint URL");
  std::string last_error;
  for (int attempt = 0; attempt < 3; ++attempt) {
    if (attempt > 0 && cfg.backoff_ms > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(cfg.backoff_ms << (attempt - 1)));
    httplib::Client client(cfg.endpoint);
    client.set_connection_timeout(cfg.timeout_seconds);
    client.set_read_timeout(cfg.timeout_seconds);
    httplib::Headers headers;
    if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);
    auto res = client.Post(kChatPath, headers, body, "application/json");
    if (res && res->status == 200) return res->body;
    if (res)
      last_error = "http status " + std::to_string(res->status);
    else
      last_error = "connection failed (" + httplib::to_string(res.error()) + ")";
  }
  throw TransportError("chat request failed after 3 attempts: " + last_error);
}

// ---------------------------------------------------------------------------
// generation client (memory-integrated sampling)
// ---------------------------------------------------------------------------

inline std::string format_instruction() {
  return "Respond with your reasoning inside <think>...</think> followed by the final answer "
         "inside <answer>...</answer>.";
}

/// Prompt template: the question, then the retrieved negatives as flawed
/// attempts to avoid, then a reflect-and-retry instruction. With no
/// negatives only the question and format instruction remain.
inline std::string build_generation_prompt(const Query& query,
                                           const std::vector<MemoryEntry>& negatives) {
  std::ostringstream os;
  os << query.prompt;
  if (query.task_kind == TaskKind::multiple_choice && !query.options.empty()) {
    os << "\nOptions:";
    for (const auto& o : query.options) os << ' ' << o;
  }
  if (!negatives.empty()) {
    os << "\n\nPrevious flawed attempts (do not repeat these mistakes):";
    int idx = 1;
    for (const auto& e : negatives) {
      os << "\nAttempt " << idx++ << ":\n<think>" << e.trajectory.think_text
         << "</think>\n<answer>" << e.trajectory.answer_text << "</answer>";
    }
    os << "\n\nReflect on why these attempts failed, avoid their mistakes, and solve the "
          "problem again.";
  }
  os << "\n\n" << format_instruction();
  return os.str();
}

class GenerationClient {
 public:
  explicit GenerationClient(BackendConfig cfg) : cfg_(std::move(cfg)) {}

  ChatRequest make_request(const Query& query, const std::vector<MemoryEntry>& negatives,
                           int sample_count) const {
    ChatRequest req;
    req.endpoint = cfg_.endpoint;
    req.model = cfg_.model;
    req.temperature = cfg_.temperature;
    req.sample_count = sample_count;
    req.messages.push_back({"user", build_generation_prompt(query, negatives)});
    return req;
  }

  /// G fresh trajectories from the endpoint. Unparseable generations are kept
  /// with empty segments so they score format 0 downstream.
  std::vector<Trajectory> generate(const Query& query, const std::vector<MemoryEntry>& negatives,
                                   const RunConfig& run) const {
    ChatRequest req = make_request(query, negatives, run.group_size);
    ChatResponse resp = parse_response(post_chat(cfg_, serialize_request(req)));
    std::vector<Trajectory> out;
    for (const auto& text : resp.texts) {
      Trajectory t;
      t.query_id = query.id;
      t.source = TrajectorySource::fresh_sample;
      t.logprob_behavior = 0.0;  // the endpoint exposes no behavior log-prob
      if (auto parsed = reward::parse_think_answer(text)) {
        t.think_text = parsed->think;
        t.answer_text = parsed->answer;
      }
      out.push_back(std::move(t));
    }
    return out;
  }

  const BackendConfig& config() const { return cfg_; }

 private:
  BackendConfig cfg_;
};

// ---------------------------------------------------------------------------
// judge client (thinking-quality rubric)
// ---------------------------------------------------------------------------

struct JudgeVerdict {
  double ls = 0, ei = 0, cr = 0, lc = 0, rd = 0;  // sub-scores in [0,1]
  double aggregate = 0;                           // mean of the five
  std::string raw_text;
};

/// Rubric prompt over the think segment only: the judge never sees the
/// answer, the reference, or any outcome signal.
inline std::string build_judge_prompt(const Query& query, const Trajectory& trajectory) {
  std::ostringstream os;
  os << "You are grading the quality of a reasoning trace. Judge the reasoning process only; "
        "do not solve the problem and do not guess whether the final answer is right.\n\n"
     << "Question:\n"
     << query.prompt << "\n\nReasoning trace:\n"
     << trajectory.think_text << "\n\n"
     << "Score each dimension from 0 to 1:\n"
        "LS - logical soundness: steps follow from one another without contradiction.\n"
        "EI - error identification: slips are noticed and corrected when present.\n"
        "CR - correct reasoning: the method fits the question.\n"
        "LC - language consistency: one language, consistent notation.\n"
        "RD - redundancy: no repeated or aimless steps (1 means fully concise).\n\n"
        "Answer with exactly six lines:\n"
        "LS: <x>\nEI: <x>\nCR: <x>\nLC: <x>\nRD: <x>\nFINAL: <x>";
  return os.str();
}

/// Parses the six-line contract. All five sub-scores are required; the
/// aggregate is recomputed as their mean, so an inconsistent FINAL line is
/// ignored. Out-of-range scores are clamped and flagged in raw_text.
inline std::optional<JudgeVerdict> parse_verdict(const std::string& text) {
  std::map<std::string, double> scores;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    for (const char* key : {"LS", "EI", "CR", "LC", "RD"}) {
      std::string prefix = std::string(key) + ":";
      if (line.compare(start, prefix.size(), prefix) == 0) {
        try {
          scores[key] = std::stod(line.substr(start + prefix.size()));
        } catch (const std::exception&) {
          return std::nullopt;
        }
      }
    }
  }
  if (scores.size() != 5) return std::nullopt;
  JudgeVerdict v;
  v.raw_text = text;
  auto clamp_flag = [&v](const char* key, double x) {
    if (x < 0.0 || x > 1.0) {
      v.raw_text += std::string("\n[clamped ") + key + "]";
      return std::clamp(x, 0.0, 1.0);
    }
    return x;
  };
  v.ls = clamp_flag("LS", scores["LS"]);
  v.ei = clamp_flag("EI", scores["EI"]);
  v.cr = clamp_flag("CR", scores["CR"]);
  v.lc = clamp_flag("LC", scores["LC"]);
  v.rd = clamp_flag("RD", scores["RD"]);
  v.aggregate = (v.ls + v.ei + v.cr + v.lc + v.rd) / 5.0;
  return v;
}

class JudgeClient {
 public:
  explicit JudgeClient(BackendConfig cfg) : cfg_(std::move(cfg)) {}

  ChatRequest make_request(const Query& query, const Trajectory& trajectory) const {
    ChatRequest req;
    req.endpoint = cfg_.endpoint;
    req.model = cfg_.model;
    req.temperature = 0.0;  // grading should be as deterministic as the model allows
    req.sample_count = 1;
    req.messages.push_back({"user", build_judge_prompt(query, trajectory)});
    return req;
  }

  /// One rubric call; malformed output is retried once, then surfaces as a
  /// scoring error.
  JudgeVerdict judge(const Query& query, const Trajectory& trajectory) const {
    ChatRequest req = make_request(query, trajectory);
    std::string body = serialize_request(req);
    for (int attempt = 0; attempt < 2; ++attempt) {
      ChatResponse resp = parse_response(post_chat(cfg_, body));
      if (auto verdict = parse_verdict(resp.texts.front())) return *verdict;
    }
    throw ScoringError("judge returned malformed verdict twice for query \"" + query.id + "\"");
  }

  /// Order-preserving fan-out with at most max_concurrency in-flight calls.
  std::vector<JudgeVerdict> judge_many(const Query& query,
                                       const std::vector<Trajectory>& trajectories) const {
    std::vector<JudgeVerdict> out(trajectories.size());
    const std::size_t width =
        cfg_.max_concurrency < 1 ? 1 : static_cast<std::size_t>(cfg_.max_concurrency);
    for (std::size_t base = 0; base < trajectories.size(); base += width) {
      std::vector<std::future<JudgeVerdict>> batch;
      for (std::size_t i = base; i < std::min(base + width, trajectories.size()); ++i)
        batch.push_back(std::async(std::launch::async,
                                   [this, &query, &trajectories, i] { return judge(query, trajectories[i]); }));
      for (std::size_t i = 0; i < batch.size(); ++i) out[base + i] = batch[i].get();
    }
    return out;
  }

  const BackendConfig& config() const { return cfg_; }

 private:
  BackendConfig cfg_;
};

/// Thinking-reward provider backed by the judge endpoint.
class RemoteJudgeProvider final : public reward::ThinkingRewardProvider {
 public:
  explicit RemoteJudgeProvider(const JudgeClient& client) : client_(&client) {}

  double score(const Query& query, const Trajectory& trajectory, RandomStream&) override {
    return client_->judge(query, trajectory).aggregate;
  }

  std::string kind() const override { return "remote_judge"; }

 private:
  const JudgeClient* client_;
};

// ---------------------------------------------------------------------------
// preference-pair exporter
// ---------------------------------------------------------------------------

inline ordered_json breakdown_to_json(const RewardBreakdown& b) {
  ordered_json rec;
  rec["format_reward"] = b.format_reward;
  rec["outcome_reward"] = b.outcome_reward;
  rec["thinking_reward"] = b.thinking_reward;
  rec["composite"] = b.composite;
  rec["lambda_used"] = b.lambda_used;
  return rec;
}

inline RewardBreakdown breakdown_from_json(const json& rec) {
  RewardBreakdown b;
  b.format_reward = rec.at("format_reward").get<int>();
  b.outcome_reward = rec.at("outcome_reward").get<int>();
  b.thinking_reward = rec.at("thinking_reward").get<double>();
  b.composite = rec.at("composite").get<double>();
  b.lambda_used = rec.at("lambda_used").get<double>();
  return b;
}

/// Single-writer append stream; every record is written and flushed as one
/// whole line. image_ref is copied verbatim, never fetched.
class PairExporter {
 public:
  PairExporter(const std::string& path, const std::map<std::string, Query>& queries_by_id)
      : queries_(&queries_by_id) {
    out_.open(path, std::ios::app);
    if (!out_) throw Error("cannot open pair export file: " + path);
  }

  void write(const PreferencePair& pair) {
    auto it = queries_->find(pair.query_id);
    if (it == queries_->end()) throw Error("export: unknown query \"" + pair.query_id + "\"");
    const Query& q = it->second;
    ordered_json rec;
    rec["query_id"] = pair.query_id;
    rec["prompt"] = q.prompt;
    if (q.image_ref)
      rec["image_ref"] = *q.image_ref;
    else
      rec["image_ref"] = nullptr;
    rec["chosen"] = {{"think", pair.chosen.think_text}, {"answer", pair.chosen.answer_text}};
    rec["rejected"] = {{"think", pair.rejected.think_text}, {"answer", pair.rejected.answer_text}};
    rec["reward_chosen"] = pair.reward_chosen;
    rec["reward_rejected"] = pair.reward_rejected;
    rec["breakdown_chosen"] = breakdown_to_json(pair.breakdown_chosen);
    rec["breakdown_rejected"] = breakdown_to_json(pair.breakdown_rejected);
    rec["rubric"] = kRubricVersion;
    out_ << rec.dump() << '\n';
    out_.flush();
    ++count_;
  }

  std::size_t count() const { return count_; }

 private:
  const std::map<std::string, Query>* queries_;
  std::ofstream out_;
  std::size_t count_ = 0;
};

inline std::size_t export_pairs(const std::vector<PreferencePair>& pairs,
                                const std::map<std::string, Query>& queries_by_id,
                                const std::string& path) {
  PairExporter exporter(path, queries_by_id);
  for (const auto& p : pairs) exporter.write(p);
  return exporter.count();
}

struct ExportedPair {
  std::string query_id;
  std::string prompt;
  std::optional<std::string> image_ref;
  std::string chosen_think, chosen_answer;
  std::string rejected_think, rejected_answer;
  double reward_chosen = 0, reward_rejected = 0;
  RewardBreakdown breakdown_chosen, breakdown_rejected;
  std::string rubric;

  bool operator==(const ExportedPair&) const = default;
};

inline std::vector<ExportedPair> import_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("pair export file not found: " + path);
  std::vector<ExportedPair> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json rec = json::parse(line);
      ExportedPair p;
      p.query_id = rec.at("query_id").get<std::string>();
      p.prompt = rec.at("prompt").get<std::string>();
      if (!rec.at("image_ref").is_null()) p.image_ref = rec.at("image_ref").get<std::string>();
      p.chosen_think = rec.at("chosen").at("think").get<std::string>();
      p.chosen_answer = rec.at("chosen").at("answer").get<std::string>();
      p.rejected_think = rec.at("rejected").at("think").get<std::string>();
      p.rejected_answer = rec.at("rejected").at("answer").get<std::string>();
      p.reward_chosen = rec.at("reward_chosen").get<double>();
      p.reward_rejected = rec.at("reward_rejected").get<double>();
      p.breakdown_chosen = breakdown_from_json(rec.at("breakdown_chosen"));
      p.breakdown_rejected = breakdown_from_json(rec.at("breakdown_rejected"));
      p.rubric = rec.value("rubric", "");
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError("pair export line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pso::backend
