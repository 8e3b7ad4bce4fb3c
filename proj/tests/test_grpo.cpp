#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "pso/grpo.hpp"

using namespace pso;
using testutil::make_params;
using testutil::make_tiny_env;
using testutil::make_traj;

namespace {

GroupBatch make_batch(const std::string& qid, std::vector<int> paths, std::vector<double> rewards) {
  GroupBatch batch;
  batch.query_id = qid;
  for (int p : paths) batch.trajectories.push_back(make_traj(qid, p));
  batch.rewards = std::move(rewards);
  batch.advantages = grpo::compute_advantages(batch.rewards);
  return batch;
}

}  // namespace

TEST_SUITE("grpo") {
  TEST_CASE("advantages: degenerate group maps to zeros") {
    auto adv = grpo::compute_advantages({1.0, 1.0, 1.0, 1.0});
    for (double a : adv) CHECK(a == 0.0);
  }

  TEST_CASE("advantages: [1,0] against a direct-summation oracle") {
    std::vector<double> rewards = {1.0, 0.0};
    // oracle: recompute mean and population std by hand
    double mean = (1.0 + 0.0) / 2.0;
    double var = ((1.0 - mean) * (1.0 - mean) + (0.0 - mean) * (0.0 - mean)) / 2.0;
    double expected0 = (1.0 - mean) / (std::sqrt(var) + 1e-8);
    auto adv = grpo::compute_advantages(rewards);
    CHECK(adv[0] == doctest::Approx(expected0).epsilon(1e-12));
    CHECK(adv[1] == doctest::Approx(-expected0).epsilon(1e-12));
    CHECK(adv[0] == doctest::Approx(1.0).epsilon(1e-6));
  }

  TEST_CASE("advantages: zero mean and shift invariance") {
    RandomStream rng = seeded_rng(1, "grpo-test");
    for (int rep = 0; rep < 50; ++rep) {
      int n = 2 + rng.uniform_int(10);
      std::vector<double> rewards;
      for (int i = 0; i < n; ++i) rewards.push_back(rng.uniform(0.0, 2.0));
      auto adv = grpo::compute_advantages(rewards);
      double sum = 0.0;
      for (double a : adv) sum += a;
      CHECK(std::fabs(sum) < 1e-9);

      std::vector<double> shifted = rewards;
      for (double& r : shifted) r += 7.25;
      auto adv_shift = grpo::compute_advantages(shifted);
      for (std::size_t i = 0; i < adv.size(); ++i)
        CHECK(adv_shift[i] == doctest::Approx(adv[i]).epsilon(1e-9));
    }
    CHECK(grpo::compute_advantages({2.0, 1.0, 0.0, 1.0})[0] > 0.0);
    CHECK_THROWS_AS(grpo::compute_advantages({1.0}), Error);
  }

  TEST_CASE("surrogate gradient matches finite differences off-policy") {
    RandomStream rng = seeded_rng(2, "grpo-test");
    RunConfig cfg;
    cfg.beta_kl = 0.04;
    for (int rep = 0; rep < 30; ++rep) {
      int n = 3 + rng.uniform_int(6);
      std::vector<double> cur(n), old(n), ref(n);
      for (int i = 0; i < n; ++i) {
        cur[i] = rng.normal(0.0, 1.0);
        old[i] = cur[i] + rng.normal(0.0, 0.2);  // mildly off-policy
        ref[i] = rng.normal(0.0, 1.0);
      }
      auto params = make_params("q", cur);
      PolicySnapshot behavior{make_params("q", old), SnapshotRole::behavior};
      PolicySnapshot reference{make_params("q", ref), SnapshotRole::reference};

      std::vector<int> paths;
      std::vector<double> rewards;
      for (int i = 0; i < 6; ++i) {
        paths.push_back(rng.uniform_int(n));
        rewards.push_back(static_cast<double>(rng.uniform_int(3)));
      }
      GroupBatch batch = make_batch("q", paths, rewards);

      auto analytic = grpo::surrogate_grad(params, behavior, reference, batch, cfg)["q"];
      auto fd = testutil::fd_grad(params, "q", [&](const PolicyParams& p) {
        return grpo::surrogate_value(p, behavior, reference, batch, cfg);
      });
      CHECK(testutil::grad_rel_error(analytic, fd) < 1e-6);
    }
  }

  TEST_CASE("all-equal rewards leave only the KL term") {
    RunConfig cfg;
    cfg.beta_kl = 0.5;
    auto params = make_params("q", {0.4, -0.3, 0.1});
    PolicySnapshot behavior = policy::snapshot(params, SnapshotRole::behavior);
    PolicySnapshot reference{make_params("q", {0.0, 0.0, 0.0}), SnapshotRole::reference};
    GroupBatch batch = make_batch("q", {0, 1, 2, 0}, {1.0, 1.0, 1.0, 1.0});

    auto g = grpo::surrogate_grad(params, behavior, reference, batch, cfg)["q"];
    auto kl_g = policy::kl_grad(params, reference, "q");
    for (std::size_t i = 0; i < g.size(); ++i)
      CHECK(g[i] == doctest::Approx(-cfg.beta_kl * kl_g[i]).epsilon(1e-12));
  }

  TEST_CASE("a lone winning trajectory gains probability (beta_kl = 0)") {
    RandomStream rng = seeded_rng(3, "grpo-test");
    RunConfig cfg;
    cfg.beta_kl = 0.0;
    cfg.learning_rate = 0.5;
    for (int rep = 0; rep < 20; ++rep) {
      int n = 4;
      std::vector<double> logits(n);
      for (auto& l : logits) l = rng.normal(0.0, 1.0);
      auto params = make_params("q", logits);
      PolicySnapshot behavior = policy::snapshot(params, SnapshotRole::behavior);
      GroupBatch batch = make_batch("q", {0, 1, 2, 3}, {1.0, 0.0, 0.0, 0.0});

      double before = std::exp(policy::log_prob(params, "q", 0));
      auto grad = grpo::surrogate_grad(params, behavior, behavior, batch, cfg);
      policy::apply_gradient(params, grad, cfg.learning_rate);
      double after = std::exp(policy::log_prob(params, "q", 0));
      CHECK(after > before);
    }
  }

  TEST_CASE("grpo_step drives a single-correct-path environment above 0.9") {
    auto tiny = make_tiny_env("q", {true, false, false, false}, {0.9, 0.4, 0.4, 0.4});
    auto params = make_params("q", {0.0, 0.0, 0.0, 0.0});
    PolicySnapshot ref = policy::snapshot(params, SnapshotRole::reference);
    RunConfig cfg;
    cfg.group_size = 8;
    cfg.beta_kl = 0.0;
    cfg.learning_rate = 0.5;
    RandomStream rng = seeded_rng(4, "grpo-test");
    std::vector<Query> queries = {tiny.query};
    for (int step = 0; step < 300; ++step) grpo::grpo_step(params, ref, tiny.env, queries, cfg, rng);
    CHECK(std::exp(policy::log_prob(params, "q", 0)) > 0.9);
    CHECK(params.version == 300);
  }

  TEST_CASE("a heavy KL penalty keeps the policy near the reference") {
    auto tiny = make_tiny_env("q", {true, false, false, false}, {0.9, 0.4, 0.4, 0.4});
    std::vector<Query> queries = {tiny.query};

    auto run = [&](double beta_kl) {
      auto params = make_params("q", {0.0, 0.0, 0.0, 0.0});
      PolicySnapshot ref = policy::snapshot(params, SnapshotRole::reference);
      RunConfig cfg;
      cfg.group_size = 8;
      cfg.beta_kl = beta_kl;
      cfg.learning_rate = 0.05;  // small enough that the stiff KL term stays stable
      RandomStream rng = seeded_rng(5, "grpo-test");  // identical seeds across runs
      for (int step = 0; step < 100; ++step) grpo::grpo_step(params, ref, tiny.env, queries, cfg, rng);
      return policy::kl_to(params, ref, "q");
    };

    double kl_free = run(0.0);
    double kl_pinned = run(100.0);
    CHECK(kl_pinned < kl_free);
  }

  TEST_CASE("group batches carry stage-I rewards in {0,1,2}") {
    auto tiny = make_tiny_env("q", {true, false, false, false}, {0.9, 0.4, 0.4, 0.4},
                              {true, true, false, true});
    auto params = make_params("q", {0.0, 0.0, 0.0, 0.0});
    RunConfig cfg;
    cfg.group_size = 16;
    RandomStream rng = seeded_rng(6, "grpo-test");
    GroupBatch batch = grpo::make_group_batch(params, tiny.env, tiny.query, cfg, rng);
    REQUIRE(batch.trajectories.size() == 16);
    REQUIRE(batch.rewards.size() == 16);
    double sum = 0.0;
    for (double r : batch.rewards) {
      CHECK((r == 0.0 || r == 1.0 || r == 2.0));
      sum += 0.0;
    }
    for (double a : batch.advantages) sum += a;
    CHECK(std::fabs(sum) < 1e-9);
    for (const auto& t : batch.trajectories) CHECK_FALSE(t.think_text.empty());
  }

  TEST_CASE("ratio clip zeroes the gradient on the clipped side") {
    RunConfig cfg;
    cfg.beta_kl = 0.0;
    cfg.enable_ratio_clip = true;
    cfg.ratio_clip = 0.2;
    // current policy far above behavior for path 0 -> ratio >> 1.2, A > 0
    auto params = make_params("q", {2.0, 0.0});
    PolicySnapshot behavior{make_params("q", {0.0, 0.0}), SnapshotRole::behavior};
    GroupBatch batch = make_batch("q", {0, 1}, {1.0, 0.0});

    auto analytic = grpo::surrogate_grad(params, behavior, behavior, batch, cfg)["q"];
    auto fd = testutil::fd_grad(params, "q", [&](const PolicyParams& p) {
      return grpo::surrogate_value(p, behavior, behavior, batch, cfg);
    });
    CHECK(testutil::grad_rel_error(analytic, fd) < 1e-6);
  }
}
