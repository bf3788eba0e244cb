#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cmces/policy.hpp"

using namespace cmces;

namespace {

std::vector<RequestEvent> toy_events(std::uint64_t seed, std::size_t n, std::uint32_t catalog) {
  Rng rng(seed);
  std::vector<RequestEvent> ev;
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = rng.below(catalog), b = rng.below(catalog);
    ev.push_back({static_cast<Tick>(i), static_cast<ContentId>(std::min(a, b)), 0});
  }
  return ev;
}

TaskEnv toy_env(const std::vector<RequestEvent>& ev, std::size_t capacity = 2, std::size_t catalog = 8) {
  TaskEnv env;
  env.events = ev;
  env.capacity = capacity;
  env.catalog_size = catalog;
  env.window = 20;
  return env;
}

ParamVector random_params(std::uint64_t seed, std::size_t hidden = 8, double scale = 0.5) {
  Rng rng(seed);
  return init_params(ParamLayout{ParamLayout::kInputWidth, hidden}, rng, scale);
}

double relative_error(const ParamVector& a, const ParamVector& b) {
  ParamVector d = a;
  d.axpy(-1.0, b);
  return d.norm() / std::max(b.norm(), 1e-300);
}

template <class F>
ParamVector central_difference(const ParamVector& theta, F&& f, double h = 1e-5) {
  ParamVector g(theta.layout());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    ParamVector p = theta, m = theta;
    p[i] += h;
    m[i] -= h;
    g[i] = (f(p) - f(m)) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(Params, LayoutAndInit) {
  const ParamLayout L{};
  EXPECT_EQ(L.size(), 32u * 6 + 2 * 32 + 1);
  Rng rng(3);
  const auto p = init_params(L, rng, 0.05);
  for (double v : p.values()) {
    EXPECT_LE(std::abs(v), 0.05);
  }
  EXPECT_THROW(ParamVector(L, std::vector<double>(3)), std::invalid_argument);
  EXPECT_THROW(ParamVector(L).axpy(1.0, ParamVector(ParamLayout{6, 4})), std::invalid_argument);
}

TEST(Params, CheckpointRoundTrip) {
  const auto p = random_params(4, 5);
  std::stringstream s;
  write_params(p, s);
  EXPECT_EQ(s.str().size(), 4u + 4 + 3 * 8 + p.size() * 8);
  EXPECT_EQ(s.str().substr(0, 4), "CMPV");
  EXPECT_EQ(read_params(s), p);
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_params(bad), std::runtime_error);
  std::string truncated;
  {
    std::stringstream t;
    write_params(p, t);
    truncated = t.str().substr(0, 40);
  }
  std::stringstream ts(truncated);
  EXPECT_THROW(read_params(ts), std::runtime_error);
}

TEST(Featurize, EmptyCacheUnseenContent) {
  const ContentStats stats(10, 5);
  const auto x = featurize(CacheState(3), stats, 4, 0);
  EXPECT_EQ(x.dimension(), 11u);
  for (double v : x.values()) EXPECT_EQ(v, 0.0);
}

TEST(Featurize, RecencyAndFrequency) {
  ContentStats stats(10, 10);
  stats.record(1, 0);
  stats.record(2, 3);
  stats.record(2, 5);
  const CacheState c{1, 2};
  const auto x = featurize(c, stats, 2, 5);
  EXPECT_EQ(x.occupied(0), 1.0);
  EXPECT_DOUBLE_EQ(x.recency(0), 0.5);
  EXPECT_DOUBLE_EQ(x.recency(1), 0.0);
  EXPECT_DOUBLE_EQ(x.frequency(0), std::log(2.0) / std::log(11.0));
  EXPECT_DOUBLE_EQ(x.frequency(1), std::log(3.0) / std::log(11.0));
  EXPECT_DOUBLE_EQ(x.request_recency(), 0.0);
  EXPECT_DOUBLE_EQ(x.request_frequency(), x.frequency(1));
  EXPECT_EQ(featurize(c, stats, 2, 5), x);
  const auto late = featurize(c, stats, 7, 500);
  for (double v : late.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Distribution, ZeroParamsUniform) {
  const ParamVector zero(ParamLayout{});
  const auto x = featurize(CacheState{1, 2, 3}, ContentStats(5, 4), 4, 0);
  for (double p : action_distribution(zero, x)) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Distribution, HandSoftmaxAndShift) {
  const auto p = softmax({std::log(2.0), 0.0, 0.0});
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
  EXPECT_NEAR(p[2], 0.25, 1e-15);
  const auto q = softmax({std::log(2.0) + 7.5, 7.5, 7.5});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], q[i], 1e-15);
  // the output bias shifts every logit equally
  auto theta = random_params(8);
  const auto x = featurize(CacheState{1, 2}, ContentStats(8, 4), 3, 0);
  const auto before = action_distribution(theta, x);
  theta[theta.layout().b2_offset()] += 3.0;
  const auto after = action_distribution(theta, x);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(before[i], after[i], 1e-12);
}

TEST(Distribution, SimplexOverRandomDraws) {
  Rng rng(17);
  ContentStats stats(8, 6);
  for (Tick t = 0; t < 6; ++t) stats.record(static_cast<ContentId>(t % 4), t);
  const auto x = featurize(CacheState{0, 1, 2}, stats, 5, 6);
  for (int i = 0; i < 10000; ++i) {
    const auto theta = init_params(ParamLayout{6, 4}, rng, 3.0);
    const auto p = action_distribution(theta, x);
    ASSERT_EQ(p.size(), 4u);
    double s = 0;
    for (double v : p) {
      ASSERT_GT(v, 0.0);
      s += v;
    }
    ASSERT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Distribution, RejectsNonFinite) {
  auto theta = random_params(1);
  theta[0] = std::nan("");
  const auto x = featurize(CacheState{1, 2}, ContentStats(8, 4), 3, 0);
  EXPECT_THROW(action_distribution(theta, x), std::domain_error);
}

TEST(Distribution, GreedyPicksArgmax) {
  const auto theta = random_params(21);
  const auto x = featurize(CacheState{1, 2}, ContentStats(8, 4), 3, 0);
  const auto p = action_distribution(theta, x);
  EXPECT_EQ(greedy_action(theta, x), static_cast<Action>(std::max_element(p.begin(), p.end()) - p.begin()) + 1);
}

TEST(Trajectories, AllHitsForceNoop) {
  const std::vector<RequestEvent> ev{{0, 1, 0}, {1, 2, 0}, {2, 1, 0}};
  auto env = toy_env(ev);
  env.initial_cache = CacheState{1, 2};
  Rng rng(1);
  const auto trajs = sample_trajectories(env, random_params(2), 1, 3, rng);
  ASSERT_EQ(trajs.size(), 1u);
  ASSERT_EQ(trajs[0].size(), 3u);
  for (const auto& tr : trajs[0]) {
    EXPECT_EQ(tr.action, 3u);
    EXPECT_TRUE(tr.forced);
    EXPECT_EQ(tr.reward, env.weights.alpha);
  }
}

TEST(Trajectories, CountsDeterminismAndInvariants) {
  const auto ev = toy_events(5, 200, 8);
  auto env = toy_env(ev);
  env.neighbors = {CacheState{6, 7}};
  const auto theta = random_params(3);
  Rng a(9), b(9);
  const auto t1 = sample_trajectories(env, theta, 4, 30, a);
  const auto t2 = sample_trajectories(env, theta, 4, 30, b);
  ASSERT_EQ(t1.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    ASSERT_EQ(t1[k].size(), 30u);
    for (std::size_t t = 0; t < 30; ++t) {
      EXPECT_EQ(t1[k][t].action, t2[k][t].action);
      EXPECT_EQ(t1[k][t].features, t2[k][t].features);
      const double r = t1[k][t].reward;
      EXPECT_TRUE(r == 0.0 || r == env.weights.beta || r == env.weights.alpha);
      EXPECT_GE(t1[k][t].action, 1u);
      EXPECT_LE(t1[k][t].action, 3u);
      EXPECT_EQ(t1[k][t].features.empty(), t1[k][t].forced);
    }
  }
}

TEST(Trajectories, ShortTaskAndEmptyTask) {
  const auto ev = toy_events(6, 5, 8);
  const auto env = toy_env(ev);
  Rng rng(2);
  const auto t = sample_trajectories(env, random_params(1), 2, 50, rng);
  for (const auto& tau : t) EXPECT_EQ(tau.size(), 5u);
  const std::vector<RequestEvent> none;
  EXPECT_THROW(sample_trajectories(toy_env(none), random_params(1), 1, 5, rng), std::invalid_argument);
}

TEST(Loss, Examples) {
  auto traj = [](std::vector<double> rs) {
    Trajectory t;
    for (double r : rs) t.push_back(Transition{{}, 1, r, true});
    return t;
  };
  EXPECT_EQ(trajectory_loss(traj({0, 0})), 0.0);
  EXPECT_EQ(trajectory_loss(traj({5, 1, 0})), -6.0);
  const std::vector<Trajectory> batch{traj({5, 1}), traj({1, 1})};
  EXPECT_EQ(batch_loss(batch), -4.0);
  const auto g = returns_to_go(traj({1, 0, 2}), 0.5);
  EXPECT_DOUBLE_EQ(g[2], 2.0);
  EXPECT_DOUBLE_EQ(g[1], 1.0);
  EXPECT_DOUBLE_EQ(g[0], 1.5);
}

TEST(Gradient, ZeroRewardsGiveZero) {
  const auto ev = toy_events(7, 100, 8);
  auto env = toy_env(ev);
  env.weights = {0.0, 0.0};
  const auto theta = random_params(4);
  Rng rng(3);
  const auto trajs = sample_trajectories(env, theta, 3, 40, rng);
  EXPECT_EQ(policy_gradient(theta, trajs, 0.99).norm(), 0.0);
}

TEST(Gradient, SingleTransitionMatchesFiniteDifference) {
  const auto theta = random_params(5);
  ContentStats stats(8, 10);
  stats.record(3, 1);
  stats.record(4, 2);
  const Trajectory tau{Transition{featurize(CacheState{3, 4}, stats, 5, 4), 2, 1.0, false}};
  const std::vector<Trajectory> batch{tau};
  const auto g = policy_gradient(theta, batch, 0.9);
  const auto fd = central_difference(theta, [&](const ParamVector& p) {
    return -std::log(action_distribution(p, tau[0].features)[1]);
  });
  EXPECT_LT(relative_error(g, fd), 1e-5);
}

TEST(Gradient, BatchMatchesSurrogateFiniteDifference) {
  const auto ev = toy_events(8, 300, 8);
  auto env = toy_env(ev);
  env.neighbors = {CacheState{5, 6}};
  const auto theta = random_params(6);
  ASSERT_LE(theta.size(), 200u);
  Rng rng(4);
  const auto trajs = sample_trajectories(env, theta, 4, 40, rng);
  const auto g = policy_gradient(theta, trajs, 0.99);
  const auto fd = central_difference(theta, [&](const ParamVector& p) { return surrogate_loss(p, trajs, 0.99); });
  EXPECT_GT(g.norm(), 0.0);
  EXPECT_LT(relative_error(g, fd), 1e-4);
}

TEST(Gradient, LinearInRewardScale) {
  const auto ev = toy_events(9, 200, 8);
  auto env = toy_env(ev);
  env.neighbors = {CacheState{5, 6}};
  const auto theta = random_params(7);
  Rng a(5), b(5);
  const auto t1 = sample_trajectories(env, theta, 2, 50, a);
  env.weights = {15.0, 3.0};
  const auto t3 = sample_trajectories(env, theta, 2, 50, b);
  auto g1 = policy_gradient(theta, t1, 0.99);
  const auto g3 = policy_gradient(theta, t3, 0.99);
  g1.scale(3.0);
  EXPECT_LT(relative_error(g3, g1), 1e-12);
}

TEST(Gradient, SmallStepDecreasesSurrogate) {
  const auto ev = toy_events(10, 300, 8);
  const auto env = toy_env(ev);
  const auto theta = random_params(8);
  Rng rng(6);
  const auto trajs = sample_trajectories(env, theta, 4, 50, rng);
  const auto g = policy_gradient(theta, trajs, 0.99);
  const double base = surrogate_loss(theta, trajs, 0.99);
  bool decreased = false;
  for (double lr : {1e-2, 1e-3, 1e-4}) {
    ParamVector next = theta;
    next.axpy(-lr, g);
    decreased = decreased || surrogate_loss(next, trajs, 0.99) < base;
  }
  EXPECT_TRUE(decreased);
}

TEST(InnerAdapt, ZeroRateIsIdentity) {
  const auto ev = toy_events(11, 100, 8);
  const auto env = toy_env(ev);
  const auto phi = random_params(9);
  RLConfig cfg;
  cfg.inner_lr = 0.0;
  Rng rng(7);
  EXPECT_EQ(inner_adapt(phi, env, cfg, rng), phi);
}

TEST(InnerAdapt, OneStepIsOneGradientStep) {
  const auto ev = toy_events(12, 200, 8);
  const auto env = toy_env(ev);
  const auto phi = random_params(10);
  RLConfig cfg;
  cfg.M = 1;
  cfg.K = 2;
  cfg.H = 30;
  Rng a(8), b(8);
  ParamVector first;
  const auto theta = inner_adapt(phi, env, cfg, a, &first);
  const auto trajs = sample_trajectories(env, phi, cfg.K, cfg.H, b);
  const auto g = policy_gradient(phi, trajs, cfg.gamma);
  EXPECT_EQ(first, g);
  ParamVector expected = phi;
  expected.axpy(-cfg.inner_lr, g);
  EXPECT_EQ(theta, expected);
}

TEST(InnerAdapt, DefaultsAndValidation) {
  const RLConfig cfg;
  EXPECT_EQ(cfg.M, 3u);
  EXPECT_DOUBLE_EQ(cfg.inner_lr, 2e-4);
  EXPECT_DOUBLE_EQ(cfg.meta_lr, 1e-3);
  EXPECT_DOUBLE_EQ(cfg.gamma, 0.99);
  RLConfig bad;
  bad.gamma = 1.5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = RLConfig{};
  bad.M = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
