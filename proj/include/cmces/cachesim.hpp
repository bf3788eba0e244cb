#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cmces/rng.hpp"
#include "cmces/workload.hpp"

namespace cmces {

/// Actions are 1-based: 1..C replace that slot, C+1 leaves the cache alone.
using Action = std::size_t;

inline constexpr ContentId kEmptySlot = std::numeric_limits<ContentId>::max();

/// Fixed-capacity array of content slots.
class CacheState {
 public:
  CacheState() = default;
  explicit CacheState(std::size_t capacity) : slots_(capacity, kEmptySlot) {
    if (capacity == 0) throw std::invalid_argument("CacheState: capacity must be positive");
  }
  CacheState(std::initializer_list<ContentId> slots) : slots_(slots) {
    if (slots_.empty()) throw std::invalid_argument("CacheState: capacity must be positive");
    check_unique();
  }

  std::size_t capacity() const noexcept { return slots_.size(); }
  Action noop() const noexcept { return slots_.size() + 1; }
  std::span<const ContentId> slots() const noexcept { return slots_; }
  ContentId slot(std::size_t i) const { return slots_.at(i); }
  bool empty_slot(std::size_t i) const { return slots_.at(i) == kEmptySlot; }

  bool contains(ContentId c) const noexcept {
    return std::find(slots_.begin(), slots_.end(), c) != slots_.end();
  }

  std::size_t occupied() const noexcept {
    return static_cast<std::size_t>(std::count_if(slots_.begin(), slots_.end(),
                                                  [](ContentId c) { return c != kEmptySlot; }));
  }

  /// Index of the first empty slot, or capacity() if full.
  std::size_t first_empty() const noexcept {
    return static_cast<std::size_t>(std::find(slots_.begin(), slots_.end(), kEmptySlot) - slots_.begin());
  }

  void put(std::size_t i, ContentId c) {
    if (c != kEmptySlot && slots_.at(i) != c && contains(c))
      throw std::logic_error("CacheState: content already cached in another slot");
    slots_.at(i) = c;
  }

  friend bool operator==(const CacheState&, const CacheState&) = default;

 private:
  void check_unique() const {
    for (std::size_t i = 0; i < slots_.size(); ++i)
      for (std::size_t j = i + 1; j < slots_.size(); ++j)
        if (slots_[i] != kEmptySlot && slots_[i] == slots_[j])
          throw std::invalid_argument("CacheState: duplicate content");
  }

  std::vector<ContentId> slots_;
};

struct HitRecord {
  bool f_local = false;
  bool f_neighbor = false;
  ContentId requested = 0;
  NodeId node_id = 0;

  bool hit() const noexcept { return f_local || f_neighbor; }
};

struct RewardWeights {
  double alpha = 5.0;
  double beta = 1.0;

  void validate() const {
    if (!(alpha >= beta && beta >= 0.0)) throw std::invalid_argument("RewardWeights: need alpha >= beta >= 0");
  }
};

/// Per-node access statistics: last access tick and a sliding-window request
/// count per content. The window covers ticks (now - window, now].
class ContentStats {
 public:
  ContentStats() = default;
  ContentStats(std::size_t catalog_size, Tick window)
      : last_access_(catalog_size, kNever), count_(catalog_size, 0), window_(window) {
    if (window <= 0) throw std::invalid_argument("ContentStats: window must be positive");
  }

  static constexpr Tick kNever = std::numeric_limits<Tick>::min();

  void record(ContentId c, Tick now) {
    expire(now);
    last_access_.at(c) = now;
    ++count_[c];
    history_.push_back({now, c});
  }

  /// Drop accesses that fell out of the window ending at `now`.
  void expire(Tick now) {
    while (!history_.empty() && history_.front().tick <= now - window_) {
      --count_[history_.front().content];
      history_.pop_front();
    }
  }

  Tick last_access(ContentId c) const { return last_access_.at(c); }
  bool seen(ContentId c) const { return last_access_.at(c) != kNever; }
  std::uint32_t window_count(ContentId c) const { return count_.at(c); }
  Tick window() const noexcept { return window_; }
  std::size_t catalog_size() const noexcept { return count_.size(); }

 private:
  struct Access {
    Tick tick;
    ContentId content;
  };
  std::vector<Tick> last_access_;
  std::vector<std::uint32_t> count_;
  std::deque<Access> history_;
  Tick window_ = 1;
};

/// Local lookup first, then neighbors; only the binary neighbor flag is kept.
inline HitRecord lookup(const CacheState& local, std::span<const CacheState* const> neighbors,
                        ContentId requested, NodeId node = 0) {
  HitRecord rec{false, false, requested, node};
  if (local.contains(requested)) {
    rec.f_local = true;
  } else {
    for (const CacheState* n : neighbors)
      if (n->contains(requested)) {
        rec.f_neighbor = true;
        break;
      }
  }
  return rec;
}

inline HitRecord lookup(const CacheState& local, std::span<const CacheState> neighbors, ContentId requested,
                        NodeId node = 0) {
  std::vector<const CacheState*> ptrs;
  ptrs.reserve(neighbors.size());
  for (const auto& n : neighbors) ptrs.push_back(&n);
  return lookup(local, std::span<const CacheState* const>(ptrs), requested, node);
}

inline CacheState apply_action(CacheState state, Action action, ContentId requested) {
  if (action < 1 || action > state.noop())
    throw std::out_of_range("apply_action: action " + std::to_string(action) + " outside [1, " +
                            std::to_string(state.noop()) + "]");
  if (action != state.noop()) state.put(action - 1, requested);
  return state;
}

inline double reward(const HitRecord& rec, const RewardWeights& w) {
  return w.alpha * (rec.f_local ? 1.0 : 0.0) + w.beta * (rec.f_neighbor ? 1.0 : 0.0);
}

inline double hit_rate(std::span<const HitRecord> records) {
  if (records.empty()) throw std::invalid_argument("hit_rate: empty record sequence");
  std::size_t hits = 0;
  for (const auto& r : records) hits += r.hit() ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

enum class BaselineKind { LRU, LFU, Random };

inline std::string_view to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::LRU: return "LRU";
    case BaselineKind::LFU: return "LFU";
    case BaselineKind::Random: return "Random";
  }
  return "?";
}

/// Eviction choice of a rule-based policy on a miss. Empty slots are filled
/// first; otherwise LRU/LFU pick the oldest / least counted slot (lowest index
/// on ties) and Random picks uniformly. Never returns the no-op action.
inline Action baseline_step(BaselineKind kind, const CacheState& state, const ContentStats& stats, Rng* rng = nullptr) {
  if (const auto e = state.first_empty(); e < state.capacity()) return e + 1;
  const std::size_t c = state.capacity();
  switch (kind) {
    case BaselineKind::LRU: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < c; ++i)
        if (stats.last_access(state.slot(i)) < stats.last_access(state.slot(best))) best = i;
      return best + 1;
    }
    case BaselineKind::LFU: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < c; ++i)
        if (stats.window_count(state.slot(i)) < stats.window_count(state.slot(best))) best = i;
      return best + 1;
    }
    case BaselineKind::Random:
      if (!rng) throw std::invalid_argument("baseline_step: Random policy needs an rng");
      return static_cast<Action>(rng->below(c)) + 1;
  }
  throw std::logic_error("baseline_step: unknown policy");
}

/// Single cache, no neighbors: serve `events` in order with a rule-based
/// policy starting from an empty cache. Statistics exclude the request being
/// decided on.
inline std::vector<HitRecord> replay_baseline(BaselineKind kind, std::span<const RequestEvent> events,
                                              std::size_t capacity, std::size_t catalog_size, Tick window,
                                              Rng* rng = nullptr) {
  CacheState cache(capacity);
  ContentStats stats(catalog_size, window);
  std::vector<HitRecord> out;
  out.reserve(events.size());
  for (const auto& e : events) {
    stats.expire(e.timestamp);
    const HitRecord rec = lookup(cache, std::span<const CacheState* const>{}, e.content_id, e.node_id);
    if (!rec.hit()) cache = apply_action(std::move(cache), baseline_step(kind, cache, stats, rng), e.content_id);
    stats.record(e.content_id, e.timestamp);
    out.push_back(rec);
  }
  return out;
}

}  // namespace cmces
