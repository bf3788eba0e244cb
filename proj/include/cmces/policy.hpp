#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmces/cachesim.hpp"
#include "cmces/rng.hpp"
#include "cmces/workload.hpp"

namespace cmces {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Shape of the slot scorer. Every action candidate (each slot, plus the
/// no-op) is scored by the same two-layer network applied to a small
/// per-candidate input; the scores go through a softmax.
///
///   W1: hidden x input_width, b1: hidden, w2: hidden, b2: scalar
struct ParamLayout {
  static constexpr std::size_t kInputWidth = 6;

  std::size_t input_width = kInputWidth;
  std::size_t hidden = 32;

  std::size_t size() const noexcept { return hidden * input_width + 2 * hidden + 1; }
  std::size_t w1_offset() const noexcept { return 0; }
  std::size_t b1_offset() const noexcept { return hidden * input_width; }
  std::size_t w2_offset() const noexcept { return b1_offset() + hidden; }
  std::size_t b2_offset() const noexcept { return w2_offset() + hidden; }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;
};

class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(ParamLayout layout) : layout_(layout), values_(layout.size(), 0.0) {}
  ParamVector(ParamLayout layout, std::vector<double> values) : layout_(layout), values_(std::move(values)) {
    if (values_.size() != layout_.size()) throw std::invalid_argument("ParamVector: length does not match layout");
  }

  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  /// this += scale * other
  ParamVector& axpy(double scale, const ParamVector& other) {
    check_layout(other);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
    return *this;
  }

  ParamVector& scale(double s) {
    for (auto& v : values_) v *= s;
    return *this;
  }

  double dot(const ParamVector& other) const {
    check_layout(other);
    double acc = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i) acc += values_[i] * other.values_[i];
    return acc;
  }

  double norm() const { return std::sqrt(dot(*this)); }

  void check_layout(const ParamVector& other) const {
    if (!(layout_ == other.layout_)) throw std::invalid_argument("ParamVector: layout mismatch");
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  ParamLayout layout_;
  std::vector<double> values_;
};

/// Uniform initialization in [-scale, scale].
inline ParamVector init_params(const ParamLayout& layout, Rng& rng, double scale = 0.05) {
  ParamVector p(layout);
  for (auto& v : p.values()) v = (2.0 * rng.uniform() - 1.0) * scale;
  return p;
}

// Checkpoint format, little-endian:
//   "CMPV" | u32 version=1 | u64 input_width | u64 hidden | u64 count | count x f64
namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("ParamVector: truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | buf[i];
  return v;
}

}  // namespace detail

inline void write_params(const ParamVector& p, std::ostream& out) {
  out.write("CMPV", 4);
  const std::uint32_t version = 1;
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((version >> (8 * i)) & 0xff));
  detail::put_u64(out, p.layout().input_width);
  detail::put_u64(out, p.layout().hidden);
  detail::put_u64(out, p.size());
  for (double v : p.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline ParamVector read_params(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "CMPV")
    throw std::runtime_error("ParamVector: bad checkpoint magic");
  unsigned char ver[4];
  if (!in.read(reinterpret_cast<char*>(ver), 4) || ver[0] != 1 || ver[1] || ver[2] || ver[3])
    throw std::runtime_error("ParamVector: unsupported checkpoint version");
  ParamLayout layout;
  layout.input_width = detail::get_u64(in);
  layout.hidden = detail::get_u64(in);
  const auto count = detail::get_u64(in);
  if (layout.input_width != ParamLayout::kInputWidth || count != layout.size())
    throw std::runtime_error("ParamVector: checkpoint layout mismatch");
  std::vector<double> values(count);
  for (auto& v : values) v = std::bit_cast<double>(detail::get_u64(in));
  return ParamVector(layout, std::move(values));
}

inline void save_params(const ParamVector& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  write_params(p, out);
}

inline ParamVector load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  return read_params(in);
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// 3 entries per slot (occupied, recency, frequency) followed by the
/// requested content's (frequency, recency). Dimension 3C+2, entries in [0,1].
class FeatureVector {
 public:
  FeatureVector() = default;
  explicit FeatureVector(std::size_t capacity) : values_(3 * capacity + 2, 0.0) {}

  std::size_t capacity() const noexcept { return values_.empty() ? 0 : (values_.size() - 2) / 3; }
  std::size_t dimension() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  double occupied(std::size_t slot) const { return values_[3 * slot]; }
  double recency(std::size_t slot) const { return values_[3 * slot + 1]; }
  double frequency(std::size_t slot) const { return values_[3 * slot + 2]; }
  double request_frequency() const { return values_[values_.size() - 2]; }
  double request_recency() const { return values_[values_.size() - 1]; }

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;

 private:
  std::vector<double> values_;
};

namespace detail {

// (now - last) / window, clamped to [0,1]; unseen content maps to 0.
inline double recency_feature(const ContentStats& stats, ContentId c, Tick now) {
  if (!stats.seen(c)) return 0.0;
  const double r = static_cast<double>(now - stats.last_access(c)) / static_cast<double>(stats.window());
  return std::clamp(r, 0.0, 1.0);
}

// Window count on a log scale: log(1+count) / log(1+window).
inline double frequency_feature(const ContentStats& stats, ContentId c) {
  const double f = std::log1p(static_cast<double>(stats.window_count(c))) /
                   std::log1p(static_cast<double>(stats.window()));
  return std::clamp(f, 0.0, 1.0);
}

}  // namespace detail

inline FeatureVector featurize(const CacheState& state, const ContentStats& stats, ContentId requested, Tick now) {
  FeatureVector x(state.capacity());
  auto v = x.values();
  for (std::size_t i = 0; i < state.capacity(); ++i) {
    if (state.empty_slot(i)) continue;
    const ContentId c = state.slot(i);
    v[3 * i] = 1.0;
    v[3 * i + 1] = detail::recency_feature(stats, c, now);
    v[3 * i + 2] = detail::frequency_feature(stats, c);
  }
  v[v.size() - 2] = detail::frequency_feature(stats, requested);
  v[v.size() - 1] = detail::recency_feature(stats, requested, now);
  return x;
}

// ---------------------------------------------------------------------------
// Scorer network
// ---------------------------------------------------------------------------

namespace detail {

// Scorer input of candidate `a` (0-based; a == C is the no-op).
inline void candidate_input(const FeatureVector& x, std::size_t a, double* u) {
  const std::size_t c = x.capacity();
  if (a < c) {
    u[0] = x.occupied(a);
    u[1] = x.recency(a);
    u[2] = x.frequency(a);
    u[5] = 0.0;
  } else {
    u[0] = u[1] = u[2] = 0.0;
    u[5] = 1.0;
  }
  u[3] = x.request_frequency();
  u[4] = x.request_recency();
}

inline void check_policy_input(const ParamVector& theta, const FeatureVector& x) {
  if (theta.layout().input_width != ParamLayout::kInputWidth || theta.size() != theta.layout().size())
    throw std::invalid_argument("policy: parameter layout mismatch");
  if (x.empty()) throw std::invalid_argument("policy: empty feature vector");
  if (!theta.all_finite()) throw std::domain_error("policy: non-finite parameters");
}

// Hidden activations (tanh) for one candidate, written to h[0..hidden).
inline double candidate_score(const ParamVector& theta, const double* u, double* h) {
  const auto& L = theta.layout();
  const double* w1 = &theta.values()[L.w1_offset()];
  const double* b1 = &theta.values()[L.b1_offset()];
  const double* w2 = &theta.values()[L.w2_offset()];
  double s = theta.values()[L.b2_offset()];
  for (std::size_t k = 0; k < L.hidden; ++k) {
    double pre = b1[k];
    const double* row = w1 + k * L.input_width;
    for (std::size_t j = 0; j < L.input_width; ++j) pre += row[j] * u[j];
    h[k] = std::tanh(pre);
    s += w2[k] * h[k];
  }
  return s;
}

inline void softmax_inplace(std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (auto& v : z) total += (v = std::exp(v - m));
  for (auto& v : z) v /= total;
}

}  // namespace detail

/// Raw scores for the C+1 actions.
inline std::vector<double> action_logits(const ParamVector& theta, const FeatureVector& x) {
  detail::check_policy_input(theta, x);
  const std::size_t n = x.capacity() + 1;
  std::vector<double> logits(n);
  std::vector<double> h(theta.layout().hidden);
  double u[ParamLayout::kInputWidth];
  for (std::size_t a = 0; a < n; ++a) {
    detail::candidate_input(x, a, u);
    logits[a] = detail::candidate_score(theta, u, h.data());
  }
  return logits;
}

inline std::vector<double> softmax(std::vector<double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  detail::softmax_inplace(logits);
  return logits;
}

/// pi_theta(. | x): probabilities of actions 1..C+1 (index 0 is action 1).
inline std::vector<double> action_distribution(const ParamVector& theta, const FeatureVector& x) {
  return softmax(action_logits(theta, x));
}

/// grad += scale * d/dtheta log pi(action | x). `action` is 1-based.
inline void accumulate_log_prob_grad(const ParamVector& theta, const FeatureVector& x, Action action, double scale,
                                     ParamVector& grad) {
  detail::check_policy_input(theta, x);
  theta.check_layout(grad);
  const auto& L = theta.layout();
  const std::size_t n = x.capacity() + 1;
  if (action < 1 || action > n) throw std::out_of_range("accumulate_log_prob_grad: action out of range");

  std::vector<double> hidden(n * L.hidden);
  std::vector<double> inputs(n * L.input_width);
  std::vector<double> probs(n);
  for (std::size_t a = 0; a < n; ++a) {
    detail::candidate_input(x, a, &inputs[a * L.input_width]);
    probs[a] = detail::candidate_score(theta, &inputs[a * L.input_width], &hidden[a * L.hidden]);
  }
  detail::softmax_inplace(probs);

  const double* w2 = &theta.values()[L.w2_offset()];
  auto g = grad.values();
  for (std::size_t a = 0; a < n; ++a) {
    // d log pi(action) / d score_a
    const double ds = scale * ((a + 1 == action ? 1.0 : 0.0) - probs[a]);
    if (ds == 0.0) continue;
    const double* h = &hidden[a * L.hidden];
    const double* u = &inputs[a * L.input_width];
    g[L.b2_offset()] += ds;
    for (std::size_t k = 0; k < L.hidden; ++k) {
      g[L.w2_offset() + k] += ds * h[k];
      const double dpre = ds * w2[k] * (1.0 - h[k] * h[k]);
      g[L.b1_offset() + k] += dpre;
      double* row = &g[L.w1_offset() + k * L.input_width];
      for (std::size_t j = 0; j < L.input_width; ++j) row[j] += dpre * u[j];
    }
  }
}

inline Action sample_action(const ParamVector& theta, const FeatureVector& x, Rng& rng) {
  const auto p = action_distribution(theta, x);
  return rng.categorical(p) + 1;
}

/// Highest-probability action, lowest index on ties.
inline Action greedy_action(const ParamVector& theta, const FeatureVector& x) {
  const auto z = action_logits(theta, x);
  return static_cast<Action>(std::max_element(z.begin(), z.end()) - z.begin()) + 1;
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct Transition {
  FeatureVector features;  // empty on forced (hit) steps
  Action action = 0;
  double reward = 0.0;
  bool forced = false;
};

using Trajectory = std::vector<Transition>;

struct RLConfig {
  double gamma = 0.99;
  std::size_t K = 1;           // trajectories per batch
  std::size_t H = 100;         // horizon
  double inner_lr = 2e-4;      // step size of the inner adaptation
  std::size_t M = 3;           // inner gradient steps
  double meta_lr = 1e-3;       // meta / combination step size

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("RLConfig: gamma must be in (0,1]");
    if (K == 0 || H == 0 || M == 0) throw std::invalid_argument("RLConfig: K, H and M must be >= 1");
    if (!(inner_lr >= 0.0) || !(meta_lr >= 0.0)) throw std::invalid_argument("RLConfig: negative learning rate");
  }
};

/// One node's view of a task: its request stream plus the context needed to
/// replay it (prior history for warm statistics, neighbor cache snapshots).
struct TaskEnv {
  std::span<const RequestEvent> events;
  std::span<const RequestEvent> history;  // earlier events of the same node
  std::size_t capacity = 20;
  std::size_t catalog_size = 1;
  Tick window = 1;
  std::vector<CacheState> neighbors;
  RewardWeights weights;
  // Cache contents at the start of every trajectory. When unset each
  // trajectory starts from distinct contents drawn uniformly from the catalog.
  std::optional<CacheState> initial_cache;
};

namespace detail {

// Statistics as of the first event at `start`, built from the window of
// events preceding it (history first, then the task prefix).
inline ContentStats warm_stats(const TaskEnv& env, std::size_t start) {
  ContentStats stats(env.catalog_size, env.window);
  if (env.events.empty()) return stats;
  const Tick now = start < env.events.size() ? env.events[start].timestamp : env.events.back().timestamp + 1;
  const Tick from = now - env.window;
  auto feed = [&](std::span<const RequestEvent> evs) {
    auto it = std::upper_bound(evs.begin(), evs.end(), from,
                               [](Tick t, const RequestEvent& e) { return t < e.timestamp; });
    for (; it != evs.end(); ++it) stats.record(it->content_id, it->timestamp);
  };
  feed(env.history);
  feed(env.events.subspan(0, std::min(start, env.events.size())));
  return stats;
}

inline CacheState most_frequent(const ContentStats& stats, std::size_t capacity) {
  std::vector<ContentId> ids;
  for (ContentId c = 0; c < stats.catalog_size(); ++c)
    if (stats.window_count(c) > 0) ids.push_back(c);
  const std::size_t k = std::min(capacity, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](ContentId a, ContentId b) {
                      const auto ca = stats.window_count(a), cb = stats.window_count(b);
                      return ca != cb ? ca > cb : a < b;
                    });
  CacheState s(capacity);
  for (std::size_t i = 0; i < k; ++i) s.put(i, ids[i]);
  return s;
}

// `capacity` distinct contents drawn uniformly from the whole catalog.
inline CacheState random_cache(std::size_t catalog_size, std::size_t capacity, Rng& rng) {
  CacheState s(capacity);
  const std::size_t k = std::min(capacity, catalog_size);
  for (std::size_t i = 0; i < k; ++i) {
    ContentId c;
    do {
      c = static_cast<ContentId>(rng.below(catalog_size));
    } while (s.contains(c));
    s.put(i, c);
  }
  return s;
}

}  // namespace detail

/// Roll out one trajectory of at most H steps starting at event `start`.
/// Hits force the no-op action, a miss with a free slot forces filling the
/// first free slot, and other misses sample from pi_theta.
inline Trajectory rollout(const TaskEnv& env, const ParamVector& theta, std::size_t start, std::size_t H, Rng& rng) {
  ContentStats stats = detail::warm_stats(env, start);
  CacheState cache = env.initial_cache ? *env.initial_cache : detail::random_cache(env.catalog_size, env.capacity, rng);
  if (cache.capacity() != env.capacity) throw std::invalid_argument("rollout: initial cache capacity mismatch");
  std::vector<const CacheState*> nbrs;
  for (const auto& n : env.neighbors) nbrs.push_back(&n);

  Trajectory tau;
  const std::size_t end = std::min(env.events.size(), start + H);
  tau.reserve(end - start);
  for (std::size_t t = start; t < end; ++t) {
    const auto& ev = env.events[t];
    stats.expire(ev.timestamp);
    const HitRecord rec = lookup(cache, nbrs, ev.content_id, ev.node_id);
    Transition tr;
    tr.reward = reward(rec, env.weights);
    if (rec.hit()) {
      tr.action = cache.noop();
      tr.forced = true;
    } else if (const auto e = cache.first_empty(); e < cache.capacity()) {
      tr.action = e + 1;
      tr.forced = true;
      cache.put(e, ev.content_id);
    } else {
      tr.features = featurize(cache, stats, ev.content_id, ev.timestamp);
      tr.action = sample_action(theta, tr.features, rng);
      if (tr.action != cache.noop()) cache.put(tr.action - 1, ev.content_id);
    }
    stats.record(ev.content_id, ev.timestamp);
    tau.push_back(std::move(tr));
  }
  return tau;
}

/// K independent trajectories, each starting at a uniformly drawn offset.
inline std::vector<Trajectory> sample_trajectories(const TaskEnv& env, const ParamVector& theta, std::size_t K,
                                                   std::size_t H, Rng& rng) {
  if (env.events.empty()) throw std::invalid_argument("sample_trajectories: task has no events");
  if (K == 0 || H == 0) throw std::invalid_argument("sample_trajectories: K and H must be >= 1");
  const std::size_t n = env.events.size();
  const std::size_t starts = n > H ? n - H + 1 : 1;
  std::vector<Trajectory> out;
  out.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    const auto start = static_cast<std::size_t>(rng.below(starts));
    out.push_back(rollout(env, theta, start, H, rng));
  }
  return out;
}

/// L(tau) = -sum of rewards.
inline double trajectory_loss(const Trajectory& tau) {
  double total = 0.0;
  for (const auto& tr : tau) total += tr.reward;
  return -total;
}

/// Batch loss: mean of trajectory losses.
inline double batch_loss(std::span<const Trajectory> trajs) {
  if (trajs.empty()) throw std::invalid_argument("batch_loss: empty batch");
  double total = 0.0;
  for (const auto& t : trajs) total += trajectory_loss(t);
  return total / static_cast<double>(trajs.size());
}

/// G_t = sum_{t' >= t} gamma^(t'-t) r_t'
inline std::vector<double> returns_to_go(const Trajectory& tau, double gamma) {
  std::vector<double> g(tau.size());
  double acc = 0.0;
  for (std::size_t t = tau.size(); t-- > 0;) g[t] = (acc = tau[t].reward + gamma * acc);
  return g;
}

/// REINFORCE gradient of the loss:
///   -(1/K) sum_k sum_t grad log pi(a_t | x_t) * G_t
/// Forced steps are skipped. Assumes the batch was sampled under theta.
inline ParamVector policy_gradient(const ParamVector& theta, std::span<const Trajectory> trajs, double gamma) {
  ParamVector grad(theta.layout());
  if (trajs.empty()) return grad;
  const double inv_k = 1.0 / static_cast<double>(trajs.size());
  for (const auto& tau : trajs) {
    const auto G = returns_to_go(tau, gamma);
    for (std::size_t t = 0; t < tau.size(); ++t) {
      if (tau[t].forced || G[t] == 0.0) continue;
      accumulate_log_prob_grad(theta, tau[t].features, tau[t].action, -inv_k * G[t], grad);
    }
  }
  return grad;
}

/// Frozen-batch surrogate whose gradient is policy_gradient:
///   -(1/K) sum_k sum_t log pi_theta(a_t | x_t) * G_t
inline double surrogate_loss(const ParamVector& theta, std::span<const Trajectory> trajs, double gamma) {
  if (trajs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& tau : trajs) {
    const auto G = returns_to_go(tau, gamma);
    for (std::size_t t = 0; t < tau.size(); ++t) {
      if (tau[t].forced) continue;
      const auto p = action_distribution(theta, tau[t].features);
      total += std::log(p[tau[t].action - 1]) * G[t];
    }
  }
  return -total / static_cast<double>(trajs.size());
}

/// M policy-gradient descent steps from phi, resampling K trajectories under
/// the current iterate before each step. If `first_grad` is given it receives
/// the gradient of the first step (taken at phi).
inline ParamVector inner_adapt(const ParamVector& phi, const TaskEnv& env, const RLConfig& cfg, Rng& rng,
                               ParamVector* first_grad = nullptr) {
  cfg.validate();
  ParamVector theta = phi;
  for (std::size_t m = 0; m < cfg.M; ++m) {
    const auto trajs = sample_trajectories(env, theta, cfg.K, cfg.H, rng);
    const auto g = policy_gradient(theta, trajs, cfg.gamma);
    if (m == 0 && first_grad) *first_grad = g;
    theta.axpy(-cfg.inner_lr, g);
  }
  return theta;
}

}  // namespace cmces
