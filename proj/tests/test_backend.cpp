#include <doctest.h>

#include <atomic>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "helpers.hpp"
#include "pso/backend.hpp"
#include "pso/pipeline.hpp"

using namespace pso;
using namespace pso::backend;
using testutil::make_traj;

namespace {

/// In-process chat-completion stub. The handler inspects the request body and
/// returns scripted texts; every body is recorded for assertions.
class StubServer {
 public:
  using Handler = std::function<std::string(const std::string& body, int call_index)>;

  explicit StubServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      int index;
      {
        std::lock_guard<std::mutex> lock(mutex_);
        bodies_.push_back(req.body);
        auto it = req.headers.find("Authorization");
        auth_headers_.push_back(it == req.headers.end() ? "" : it->second);
        index = static_cast<int>(bodies_.size()) - 1;
      }
      if (index < fail_first_) {
        res.status = 500;
        res.set_content("planted failure", "text/plain");
        return;
      }
      res.set_content(handler_(req.body, index), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int calls() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return static_cast<int>(bodies_.size());
  }
  std::string body(int i) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return bodies_.at(i);
  }
  std::string auth_header(int i) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return auth_headers_.at(i);
  }
  void fail_first(int n) { fail_first_ = n; }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  Handler handler_;
  mutable std::mutex mutex_;
  std::vector<std::string> bodies_;
  std::vector<std::string> auth_headers_;
  std::atomic<int> fail_first_{0};
};

std::string chat_body(const std::vector<std::string>& texts) {
  ordered_json doc;
  doc["choices"] = ordered_json::array();
  for (const auto& t : texts) {
    ordered_json choice;
    choice["message"] = {{"role", "assistant"}, {"content", t}};
    choice["finish_reason"] = "stop";
    doc["choices"].push_back(std::move(choice));
  }
  return doc.dump();
}

BackendConfig test_config(const std::string& endpoint) {
  BackendConfig cfg;
  cfg.endpoint = endpoint;
  cfg.model = "stub-model";
  cfg.temperature = 1.0;
  cfg.backoff_ms = 0;  // no sleeping in tests
  return cfg;
}

Query numeric_query() {
  Query q;
  q.id = "q1";
  q.prompt = "What is 6 times 7?";
  q.task_kind = TaskKind::numeric;
  q.reference_answer = "42";
  return q;
}

MemoryEntry negative_entry(const std::string& think, const std::string& answer) {
  MemoryEntry e;
  e.trajectory.query_id = "q1";
  e.trajectory.think_text = think;
  e.trajectory.answer_text = answer;
  e.trajectory.source = TrajectorySource::replayed_negative;
  e.reward = 0.1;
  return e;
}

}  // namespace

TEST_SUITE("backend") {
  TEST_CASE("request serialization is byte-stable with fixed field order") {
    ChatRequest req;
    req.endpoint = "http://example";
    req.model = "m";
    req.messages.push_back({"user", "hello"});
    req.temperature = 0.5;
    req.sample_count = 3;
    const std::string expected =
        R"({"model":"m","messages":[{"role":"user","content":"hello"}],"temperature":0.5,"n":3})";
    CHECK(serialize_request(req) == expected);
    CHECK(serialize_request(req) == serialize_request(req));
  }

  TEST_CASE("response parsing rejects zero choices") {
    CHECK_THROWS_AS(parse_response(R"({"choices":[]})"), ParseError);
    CHECK_THROWS_AS(parse_response(R"({"nope":1})"), ParseError);
    CHECK_THROWS_AS(parse_response("not json"), ParseError);
    auto ok = parse_response(chat_body({"a", "b"}));
    REQUIRE(ok.texts.size() == 2);
    CHECK(ok.texts[0] == "a");
    CHECK(ok.finish_reasons[1] == "stop");
  }

  TEST_CASE("generation prompt embeds exactly the retrieved negatives in order") {
    Query q = numeric_query();
    CHECK(build_generation_prompt(q, {}).find("flawed") == std::string::npos);
    CHECK(build_generation_prompt(q, {}).find("<think>") != std::string::npos);

    std::vector<MemoryEntry> negatives = {negative_entry("guessed 36", "36"),
                                          negative_entry("added instead", "13")};
    std::string prompt = build_generation_prompt(q, negatives);
    CHECK(prompt.find(q.prompt) != std::string::npos);
    CHECK(prompt.find("Previous flawed attempts (do not repeat these mistakes):") !=
          std::string::npos);
    std::size_t a1 = prompt.find("Attempt 1:");
    std::size_t a2 = prompt.find("Attempt 2:");
    std::size_t a3 = prompt.find("Attempt 3:");
    REQUIRE(a1 != std::string::npos);
    REQUIRE(a2 != std::string::npos);
    CHECK(a3 == std::string::npos);
    CHECK(prompt.find("guessed 36", a1) < a2);
    CHECK(prompt.find("added instead", a2) != std::string::npos);
    CHECK(prompt.find("Reflect on why these attempts failed") != std::string::npos);
  }

  TEST_CASE("generate: sample count, bearer header, and lenient parsing") {
    StubServer stub([](const std::string&, int) {
      return chat_body({"<think>six sevens</think><answer>42</answer>", "no tags at all"});
    });
    BackendConfig cfg = test_config(stub.endpoint());
    cfg.api_key = "sekrit";
    GenerationClient client(cfg);

    RunConfig run;
    run.group_size = 8;
    auto trajectories = client.generate(numeric_query(), {}, run);
    REQUIRE(trajectories.size() == 2);
    CHECK(trajectories[0].think_text == "six sevens");
    CHECK(trajectories[0].answer_text == "42");
    CHECK(reward::format_reward(trajectories[0]) == 1);
    CHECK(trajectories[1].think_text.empty());
    CHECK(reward::format_reward(trajectories[1]) == 0);
    CHECK(trajectories[0].logprob_behavior == 0.0);

    json sent = json::parse(stub.body(0));
    CHECK(sent.at("n").get<int>() == 8);
    CHECK(sent.at("model").get<std::string>() == "stub-model");
    CHECK(stub.auth_header(0) == "Bearer sekrit");
  }

  TEST_CASE("transport retries twice then succeeds; persistent failure throws") {
    {
      StubServer stub([](const std::string&, int) { return chat_body({"ok"}); });
      stub.fail_first(2);
      GenerationClient client(test_config(stub.endpoint()));
      RunConfig run;
      auto trajectories = client.generate(numeric_query(), {}, run);
      CHECK(trajectories.size() == 1);
      CHECK(stub.calls() == 3);
    }
    {
      StubServer stub([](const std::string&, int) { return chat_body({"ok"}); });
      stub.fail_first(1000);
      GenerationClient client(test_config(stub.endpoint()));
      RunConfig run;
      CHECK_THROWS_AS(client.generate(numeric_query(), {}, run), TransportError);
      CHECK(stub.calls() == 3);  // exactly three attempts
    }
  }

  TEST_CASE("judge verdict parsing recovers planted sub-scores") {
    auto v = parse_verdict("LS: 1.0\nEI: 0.8\nCR: 0.8\nLC: 1.0\nRD: 0.4\nFINAL: 0.9");
    REQUIRE(v.has_value());
    CHECK(v->aggregate == doctest::Approx(0.8).epsilon(1e-12));  // FINAL 0.9 ignored
    CHECK(v->ls == 1.0);
    CHECK(v->rd == 0.4);

    CHECK_FALSE(parse_verdict("LS: 1.0\nEI: 0.8\nCR: 0.8\nLC: 1.0\nFINAL: 0.9").has_value());
    CHECK_FALSE(parse_verdict("gibberish").has_value());

    auto clamped = parse_verdict("LS: 1.4\nEI: 0.8\nCR: 0.8\nLC: 1.0\nRD: -0.2\nFINAL: 0.9");
    REQUIRE(clamped.has_value());
    CHECK(clamped->ls == 1.0);
    CHECK(clamped->rd == 0.0);
    CHECK(clamped->raw_text.find("[clamped LS]") != std::string::npos);
    CHECK(clamped->raw_text.find("[clamped RD]") != std::string::npos);
    CHECK(clamped->aggregate == doctest::Approx((1.0 + 0.8 + 0.8 + 1.0 + 0.0) / 5.0).epsilon(1e-12));
  }

  TEST_CASE("judge prompt withholds the answer and the reference") {
    Query q = numeric_query();
    Trajectory t = make_traj("q1", 0, "multiply six by seven", "41");
    std::string prompt = build_judge_prompt(q, t);
    CHECK(prompt.find("multiply six by seven") != std::string::npos);
    CHECK(prompt.find("41") == std::string::npos);  // the trajectory's answer
    CHECK(prompt.find("42") == std::string::npos);  // the reference
    CHECK(prompt.find("LS:") != std::string::npos);
    CHECK(prompt.find("RD:") != std::string::npos);
  }

  TEST_CASE("judge call: aggregate over the wire, one retry on malformed output") {
    {
      StubServer stub([](const std::string&, int) {
        return chat_body({"LS: 1.0\nEI: 0.8\nCR: 0.8\nLC: 1.0\nRD: 0.4\nFINAL: 0.8"});
      });
      JudgeClient client(test_config(stub.endpoint()));
      auto v = client.judge(numeric_query(), make_traj("q1", 0, "thinking", "42"));
      CHECK(v.aggregate == doctest::Approx(0.8).epsilon(1e-12));
      CHECK(stub.calls() == 1);
    }
    {
      // first reply drops the RD line, second is complete
      StubServer stub([](const std::string&, int index) {
        if (index == 0) return chat_body({"LS: 1.0\nEI: 1.0\nCR: 1.0\nLC: 1.0\nFINAL: 1.0"});
        return chat_body({"LS: 1.0\nEI: 1.0\nCR: 1.0\nLC: 1.0\nRD: 1.0\nFINAL: 1.0"});
      });
      JudgeClient client(test_config(stub.endpoint()));
      auto v = client.judge(numeric_query(), make_traj("q1", 0));
      CHECK(v.aggregate == 1.0);
      CHECK(stub.calls() == 2);
    }
    {
      StubServer stub([](const std::string&, int) {
        return chat_body({"LS: 1.0\nEI: 1.0\nCR: 1.0\nLC: 1.0\nFINAL: 1.0"});  // always malformed
      });
      JudgeClient client(test_config(stub.endpoint()));
      CHECK_THROWS_AS(client.judge(numeric_query(), make_traj("q1", 0)), ScoringError);
      CHECK(stub.calls() == 2);  // one retry, then give up
    }
  }

  TEST_CASE("judge_many preserves order under bounded concurrency") {
    StubServer stub([](const std::string& body, int) {
      // score derived from the embedded trace text so order is observable
      json doc = json::parse(body);
      std::string content = doc["messages"][0]["content"].get<std::string>();
      double score = content.find("trace-A") != std::string::npos ? 0.2 : 0.8;
      char buf[160];
      std::snprintf(buf, sizeof(buf), "LS: %.1f\nEI: %.1f\nCR: %.1f\nLC: %.1f\nRD: %.1f\nFINAL: %.1f",
                    score, score, score, score, score, score);
      return chat_body({buf});
    });
    BackendConfig cfg = test_config(stub.endpoint());
    cfg.max_concurrency = 4;
    JudgeClient client(cfg);

    std::vector<Trajectory> trajectories;
    for (int i = 0; i < 10; ++i)
      trajectories.push_back(make_traj("q1", i, i % 2 == 0 ? "trace-A" : "trace-B", "x"));
    auto verdicts = client.judge_many(numeric_query(), trajectories);
    REQUIRE(verdicts.size() == 10);
    for (int i = 0; i < 10; ++i)
      CHECK(verdicts[i].aggregate == doctest::Approx(i % 2 == 0 ? 0.2 : 0.8).epsilon(1e-12));
    CHECK(stub.calls() == 10);
  }

  TEST_CASE("environment variables override endpoint and provide the credential") {
    setenv("PSO_ENDPOINT", "http://override:9", 1);
    setenv("PSO_API_KEY", "from-env", 1);
    BackendConfig cfg;
    cfg.endpoint = "http://config:1";
    BackendConfig resolved = with_env_overrides(cfg);
    CHECK(resolved.endpoint == "http://override:9");
    CHECK(resolved.api_key == "from-env");
    unsetenv("PSO_ENDPOINT");
    unsetenv("PSO_API_KEY");
    CHECK(with_env_overrides(cfg).endpoint == "http://config:1");
    CHECK(with_env_overrides(cfg).api_key.empty());
  }

  TEST_CASE("remote data-generation run drives the stub end to end") {
    // generation requests get a parseable pair; judge requests get a verdict
    StubServer stub([](const std::string& body, int) {
      json doc = json::parse(body);
      std::string content = doc["messages"][0]["content"].get<std::string>();
      if (content.find("grading") != std::string::npos) {
        double s = content.find("carefully") != std::string::npos ? 0.9 : 0.2;
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "LS: %.1f\nEI: %.1f\nCR: %.1f\nLC: %.1f\nRD: %.1f\nFINAL: %.1f", s, s, s, s,
                      s, s);
        return chat_body({buf});
      }
      return chat_body({"<think>carefully counted</think><answer>42</answer>",
                        "<think>rushed guess</think><answer>41</answer>"});
    });

    testutil::TempDir dir;
    {
      std::ofstream conf(dir.file("remote.ini"));
      conf << "[run]\nseed = 3\ngroup_size = 2\nepochs = 1\n"
           << "[env]\nnum_queries = 2\n"
           << "[mode]\nmode = remote\nendpoint = " << stub.endpoint() << "\nmodel = stub\n";
    }
    {
      std::ofstream data(dir.file("dataset.jsonl"));
      data << R"({"id":"r1","prompt":"What is 6 times 7?","task_kind":"numeric","reference_answer":"42"})"
           << '\n';
    }
    std::string out = dir.str();
    AppConfig cfg = config::parse_config_file(dir.file("remote.ini"));
    pipeline::cmd_export_pairs(cfg, out);

    auto pairs = import_pairs(dir.file("pairs.jsonl"));
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].chosen_think == "carefully counted");
    CHECK(pairs[0].rejected_think == "rushed guess");
    CHECK(pairs[0].reward_chosen > pairs[0].reward_rejected);
    CHECK(pairs[0].breakdown_chosen.outcome_reward == 1);
    CHECK(pairs[0].breakdown_rejected.outcome_reward == 0);

    auto rows = load_metrics(dir.file("metrics.jsonl"));
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].stage == "export");
    CHECK(rows[0].pass_at_1 == 0.5);

    // the rushed candidate scored 0.5*0.2 + 0.5*0 = 0.1 < tau, so it is banked
    MemoryBank bank = MemoryBank::restore(dir.file("memory.jsonl"), cfg.run.memory_capacity);
    CHECK(bank.size("r1") >= 1);
  }

  TEST_CASE("pair export round-trips losslessly and appends safely") {
    testutil::TempDir dir;
    std::map<std::string, Query> by_id;
    Query q = numeric_query();
    q.image_ref = "img://opaque/ref.png";
    by_id[q.id] = q;

    RunConfig run;
    std::vector<PreferencePair> pairs;
    RandomStream rng = seeded_rng(5, "export-test");
    for (int i = 0; i < 100; ++i) {
      PreferencePair p;
      p.query_id = q.id;
      p.chosen = make_traj(q.id, 0, "good thought " + std::to_string(i), "42");
      p.rejected = make_traj(q.id, 1, "bad thought " + std::to_string(i), std::to_string(i));
      double high = 0.5 + 0.5 * rng.uniform();
      double low = 0.4 * rng.uniform();
      p.reward_chosen = high;
      p.reward_rejected = low;
      p.breakdown_chosen = reward::make_breakdown(1, 1, 2.0 * (high - 0.5), run);
      p.breakdown_rejected = reward::make_breakdown(1, 0, 2.0 * low, run);
      pairs.push_back(std::move(p));
    }

    CHECK(export_pairs(pairs, by_id, dir.file("pairs.jsonl")) == 100);
    auto imported = import_pairs(dir.file("pairs.jsonl"));
    REQUIRE(imported.size() == 100);
    for (std::size_t i = 0; i < imported.size(); ++i) {
      const auto& rec = imported[i];
      CHECK(rec.query_id == pairs[i].query_id);
      CHECK(rec.prompt == q.prompt);
      REQUIRE(rec.image_ref.has_value());
      CHECK(*rec.image_ref == "img://opaque/ref.png");
      CHECK(rec.chosen_think == pairs[i].chosen.think_text);
      CHECK(rec.rejected_answer == pairs[i].rejected.answer_text);
      CHECK(rec.reward_chosen == pairs[i].reward_chosen);  // bit-exact doubles
      CHECK(rec.reward_rejected == pairs[i].reward_rejected);
      CHECK(rec.breakdown_chosen == pairs[i].breakdown_chosen);
      CHECK(rec.breakdown_rejected == pairs[i].breakdown_rejected);
      CHECK(rec.reward_chosen >= rec.reward_rejected);
      CHECK(rec.rubric == kRubricVersion);
    }

    // appending keeps earlier records intact
    CHECK(export_pairs({pairs[0]}, by_id, dir.file("pairs.jsonl")) == 1);
    CHECK(import_pairs(dir.file("pairs.jsonl")).size() == 101);

    // empty stream produces a valid empty file
    CHECK(export_pairs({}, by_id, dir.file("empty.jsonl")) == 0);
    CHECK(import_pairs(dir.file("empty.jsonl")).empty());
  }
}
