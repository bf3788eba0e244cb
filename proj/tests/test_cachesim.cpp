#include <gtest/gtest.h>

#include "cmces/cachesim.hpp"
#include "oracle.hpp"

using namespace cmces;

TEST(Lookup, LocalTakesPrecedence) {
  const CacheState local{1, 2};
  const std::vector<CacheState> nbrs{CacheState{2, 3}};
  const auto r = lookup(local, nbrs, 2, 4);
  EXPECT_TRUE(r.f_local);
  EXPECT_FALSE(r.f_neighbor);
  EXPECT_EQ(r.requested, 2u);
  EXPECT_EQ(r.node_id, 4u);
}

TEST(Lookup, NeighborHit) {
  const CacheState local(2);
  const std::vector<CacheState> nbrs{CacheState{1, 3}, CacheState{5, 9}, CacheState{4, 6}};
  const auto r = lookup(local, nbrs, 9);
  EXPECT_FALSE(r.f_local);
  EXPECT_TRUE(r.f_neighbor);
  EXPECT_TRUE(r.hit());
}

TEST(Lookup, Miss) {
  const std::vector<CacheState> nbrs{CacheState{1, 3}};
  const auto r = lookup(CacheState{4, 5}, nbrs, 8);
  EXPECT_FALSE(r.f_local);
  EXPECT_FALSE(r.f_neighbor);
}

TEST(ApplyAction, Examples) {
  CacheState s(2);
  s.put(0, 7);
  EXPECT_EQ(apply_action(s, 3, 9), s);
  const auto filled = apply_action(s, 1, 9);
  EXPECT_EQ(filled.slot(0), 9u);
  EXPECT_TRUE(filled.empty_slot(1));
  const auto r = apply_action(CacheState{7, 4}, 2, 9);
  EXPECT_EQ(r, (CacheState{7, 9}));
}

TEST(ApplyAction, RejectsOutOfRange) {
  EXPECT_THROW(apply_action(CacheState{1, 2}, 0, 5), std::out_of_range);
  EXPECT_THROW(apply_action(CacheState{1, 2}, 4, 5), std::out_of_range);
}

TEST(CacheState, Invariants) {
  EXPECT_THROW(CacheState(0), std::invalid_argument);
  EXPECT_THROW((CacheState{1, 1}), std::invalid_argument);
  CacheState s{1, 2};
  EXPECT_THROW(s.put(0, 2), std::logic_error);
  EXPECT_EQ(s.noop(), 3u);
  EXPECT_EQ(s.first_empty(), 2u);
}

TEST(CacheState, FuzzedActionsKeepInvariants) {
  Rng rng(99);
  CacheState s(5);
  for (int step = 0; step < 100000; ++step) {
    const auto req = static_cast<ContentId>(rng.below(12));
    if (s.contains(req)) continue;  // actions only happen on misses
    const Action a = 1 + rng.below(s.noop());
    const auto before = s;
    s = apply_action(s, a, req);
    if (a == before.noop()) {
      ASSERT_EQ(s, before);
    }
    ASSERT_LE(s.occupied(), s.capacity());
    ASSERT_EQ(s.capacity(), 5u);
    std::vector<ContentId> ids;
    for (auto c : s.slots())
      if (c != kEmptySlot) ids.push_back(c);
    std::sort(ids.begin(), ids.end());
    ASSERT_EQ(std::adjacent_find(ids.begin(), ids.end()), ids.end());
  }
}

TEST(Reward, Examples) {
  const RewardWeights w{5, 1};
  EXPECT_EQ(reward({true, false, 0, 0}, w), 5.0);
  EXPECT_EQ(reward({false, true, 0, 0}, w), 1.0);
  EXPECT_EQ(reward({false, false, 0, 0}, w), 0.0);
  EXPECT_THROW((RewardWeights{1, 2}.validate()), std::invalid_argument);
  EXPECT_THROW((RewardWeights{1, -1}.validate()), std::invalid_argument);
}

TEST(HitRate, Examples) {
  const HitRecord h{true, false, 0, 0}, n{false, true, 0, 0}, m{};
  EXPECT_DOUBLE_EQ(hit_rate(std::vector{h, m, n, h}), 0.75);
  EXPECT_DOUBLE_EQ(hit_rate(std::vector{m, m}), 0.0);
  EXPECT_DOUBLE_EQ(hit_rate(std::vector{h, h, h}), 1.0);
  EXPECT_THROW(hit_rate(std::vector<HitRecord>{}), std::invalid_argument);
}

TEST(ContentStats, SlidingWindow) {
  ContentStats s(4, 3);
  EXPECT_FALSE(s.seen(1));
  s.record(1, 0);
  s.record(1, 1);
  s.record(2, 2);
  EXPECT_EQ(s.window_count(1), 2u);
  EXPECT_EQ(s.last_access(1), 1);
  s.expire(3);  // tick 0 leaves the window (0, 3]
  EXPECT_EQ(s.window_count(1), 1u);
  s.record(3, 5);
  EXPECT_EQ(s.window_count(1), 0u);
  EXPECT_EQ(s.window_count(2), 0u);
  EXPECT_EQ(s.last_access(1), 1);
  EXPECT_TRUE(s.seen(1));
  EXPECT_THROW(ContentStats(4, 0), std::invalid_argument);
}

TEST(Baseline, LruEvictsOldest) {
  ContentStats s(10, 100);
  s.record(0, 1);
  s.record(1, 5);
  EXPECT_EQ(baseline_step(BaselineKind::LRU, CacheState{0, 1}, s), 1u);
}

TEST(Baseline, LfuEvictsLeastCounted) {
  ContentStats s(10, 100);
  for (Tick t : {1, 2, 3}) s.record(0, t);
  s.record(1, 4);
  EXPECT_EQ(baseline_step(BaselineKind::LFU, CacheState{0, 1}, s), 2u);
}

TEST(Baseline, FillsEmptyFirstAndNeverNoop) {
  ContentStats s(10, 100);
  CacheState c(2);
  c.put(0, 3);
  Rng rng(1);
  for (auto k : {BaselineKind::LRU, BaselineKind::LFU, BaselineKind::Random})
    EXPECT_EQ(baseline_step(k, c, s, &rng), 2u);
  for (int i = 0; i < 200; ++i) {
    const auto a = baseline_step(BaselineKind::Random, CacheState{3, 4, 5}, s, &rng);
    EXPECT_GE(a, 1u);
    EXPECT_LE(a, 3u);
  }
  EXPECT_THROW(baseline_step(BaselineKind::Random, CacheState{3, 4}, s), std::invalid_argument);
}

TEST(Baseline, TiesGoToLowestSlot) {
  ContentStats s(10, 100);
  s.record(4, 2);
  s.record(5, 2);
  EXPECT_EQ(baseline_step(BaselineKind::LRU, CacheState{4, 5}, s), 1u);
  EXPECT_EQ(baseline_step(BaselineKind::LFU, CacheState{4, 5}, s), 1u);
}

TEST(Lookup, MatchesLinearScanOnRandomStates) {
  Rng rng(2024);
  auto random_state = [&](std::size_t cap) {
    CacheState s(cap);
    for (std::size_t i = 0; i < cap; ++i) {
      const auto c = static_cast<ContentId>(rng.below(20));
      if (rng.bernoulli(0.8) && !s.contains(c)) s.put(i, c);
    }
    return s;
  };
  for (int trial = 0; trial < 5000; ++trial) {
    const std::size_t cap = 1 + rng.below(6);
    const CacheState local = random_state(cap);
    std::vector<CacheState> nbrs;
    for (std::size_t k = rng.below(4); k > 0; --k) nbrs.push_back(random_state(1 + rng.below(6)));
    const auto req = static_cast<ContentId>(rng.below(20));
    bool in_local = false, in_nbr = false;
    for (auto c : local.slots()) in_local |= c == req;
    for (const auto& n : nbrs)
      for (auto c : n.slots()) in_nbr |= c == req;
    const auto r = lookup(local, nbrs, req);
    ASSERT_EQ(r.f_local, in_local);
    ASSERT_EQ(r.f_neighbor, !in_local && in_nbr);
  }
}

TEST(Replay, RandomBaselineHasNoNeighborHits) {
  Rng rng(7);
  const auto ev = oracle::random_trace(rng, 1000, 24);
  const auto recs = replay_baseline(BaselineKind::Random, ev, 4, 24, 50, &rng);
  ASSERT_EQ(recs.size(), ev.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_FALSE(recs[i].f_neighbor);
    EXPECT_EQ(recs[i].requested, ev[i].content_id);
  }
}

TEST(Replay, LruLfuMatchResortOracle) {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial)
    for (std::size_t cap : {1, 2, 4, 8}) {
      const auto ev = oracle::random_trace(rng, 1000, 30);
      for (bool lfu : {false, true}) {
        const auto recs = replay_baseline(lfu ? BaselineKind::LFU : BaselineKind::LRU, ev, cap, 30, 40);
        std::size_t hits = 0;
        for (const auto& r : recs) hits += r.hit();
        ASSERT_EQ(hits, oracle::replay_hits(lfu, ev, cap, 40)) << "cap " << cap << " lfu " << lfu;
      }
    }
}
