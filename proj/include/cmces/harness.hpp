#pragma once

// Experiment orchestration: the multi-node simulation loop, learned and
// rule-based methods, ablations, communication accounting, CSV reports and
// key=value configuration.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmces/cachesim.hpp"
#include "cmces/meta.hpp"
#include "cmces/policy.hpp"
#include "cmces/sampling.hpp"
#include "cmces/workload.hpp"

namespace cmces {

enum class Method { LRU, LFU, Random, LocalRL, MetaOnly, MetaCollab, CMCES };

inline constexpr Method kAllMethods[] = {Method::LRU,      Method::LFU,        Method::Random, Method::LocalRL,
                                         Method::MetaOnly, Method::MetaCollab, Method::CMCES};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::LRU: return "LRU";
    case Method::LFU: return "LFU";
    case Method::Random: return "Random";
    case Method::LocalRL: return "LocalRL";
    case Method::MetaOnly: return "MetaOnly";
    case Method::MetaCollab: return "MetaCollab";
    case Method::CMCES: return "CMCES";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method: " + std::string(s));
}

inline bool is_rule_based(Method m) { return m == Method::LRU || m == Method::LFU || m == Method::Random; }
inline bool is_meta(Method m) { return m == Method::MetaOnly || m == Method::MetaCollab || m == Method::CMCES; }
inline bool is_collaborative(Method m) { return m == Method::MetaCollab || m == Method::CMCES; }

struct ExperimentConfig {
  SyntheticConfig workload;
  std::string trace_path;  // when set, the trace is loaded instead of generated
  std::size_t cache_size = 20;
  std::vector<std::size_t> node_cache_sizes;  // optional per-node override
  std::optional<std::uint32_t> neighbor_count;  // default: every other node
  RewardWeights reward;
  MetaConfig meta;
  std::size_t hidden = 32;
  double z_fraction = 0.5;
  double feedback_step = 0.1;
  bool identity_combination = false;  // B = I: nobody is ever sampled
  Tick stats_window = 0;              // 0: one day of ticks
  bool greedy_serving = true;
  Method method = Method::CMCES;
  std::vector<std::uint64_t> seeds{1};
  bool keep_hit_log = false;

  void validate() const {
    if (trace_path.empty()) workload.validate();
    if (cache_size == 0) throw std::invalid_argument("cache_size must be positive");
    for (auto c : node_cache_sizes)
      if (c == 0) throw std::invalid_argument("cache sizes must be positive");
    reward.validate();
    meta.validate();
    if (!(meta.lambda > 0.0 && meta.lambda < 1.0)) throw std::invalid_argument("lambda must be in (0,1)");
    if (hidden == 0) throw std::invalid_argument("hidden width must be positive");
    if (!(z_fraction >= 0.0 && z_fraction <= 1.0)) throw std::invalid_argument("z fraction must be in [0,1]");
    if (stats_window < 0) throw std::invalid_argument("stats window must be non-negative");
    if (seeds.empty()) throw std::invalid_argument("at least one seed is required");
  }
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct NodeDayMetric {
  std::uint32_t day = 0;
  NodeId node = 0;
  std::uint64_t requests = 0;
  std::uint64_t local_hits = 0;
  std::uint64_t neighbor_hits = 0;

  double hit_rate() const {
    return requests ? static_cast<double>(local_hits + neighbor_hits) / static_cast<double>(requests) : 0.0;
  }
};

struct CommRound {
  std::uint32_t round = 0;  // the day served with the combined model
  std::uint64_t floats_sent = 0;
  std::uint64_t messages = 0;
  std::uint64_t broadcast_floats = 0;  // what sending to every neighbor would cost
};

struct LinkCounter {
  std::uint64_t floats = 0;
  std::uint64_t messages = 0;
};

struct RunReport {
  Method method = Method::LRU;
  std::uint64_t seed = 0;
  std::uint32_t first_online_day = 0;
  std::vector<NodeDayMetric> metrics;  // day-major
  std::vector<CommRound> comms;
  std::map<std::pair<NodeId, NodeId>, LinkCounter> links;  // (sender, receiver)
  std::uint64_t events_consumed = 0;
  std::size_t pretrain_epochs = 0;
  double pretrain_seconds = 0.0;
  double online_seconds = 0.0;
  std::vector<HitRecord> hit_log;  // only with keep_hit_log
  std::vector<std::uint32_t> hit_log_day;

  /// Hits over requests on days >= first_online_day, all nodes pooled.
  double online_hit_rate() const { return pooled_hit_rate(first_online_day); }

  double pooled_hit_rate(std::uint32_t from_day = 0) const {
    std::uint64_t req = 0, hits = 0;
    for (const auto& m : metrics)
      if (m.day >= from_day) {
        req += m.requests;
        hits += m.local_hits + m.neighbor_hits;
      }
    return req ? static_cast<double>(hits) / static_cast<double>(req) : 0.0;
  }

  std::uint64_t total_floats_sent() const {
    std::uint64_t s = 0;
    for (const auto& c : comms) s += c.floats_sent;
    return s;
  }
};

struct MetricsReport {
  std::vector<RunReport> runs;
};

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<NodeId>> ring_neighbors(std::uint32_t num_nodes, std::uint32_t count) {
  if (count >= num_nodes && num_nodes > 0)
    throw std::invalid_argument("neighbor count " + std::to_string(count) + " needs more than " +
                                std::to_string(num_nodes) + " nodes");
  std::vector<std::vector<NodeId>> out(num_nodes);
  for (NodeId j = 0; j < num_nodes; ++j)
    for (std::uint32_t k = 1; k <= count; ++k) out[j].push_back((j + k) % num_nodes);
  return out;
}

struct Fleet {
  std::vector<CacheState> caches;
  std::vector<ContentStats> stats;
};

// Replays one day of the global trace. Events sharing a timestamp are looked
// up against the caches as they stood at the start of that tick, then applied
// in trace order. `decide(node, cache, stats, content, now)` is consulted on
// misses only.
template <class Decide>
void stream_events(std::span<const RequestEvent> events, std::uint32_t day, Fleet& fleet,
                   const std::vector<std::vector<NodeId>>& nbrs, Decide&& decide, std::vector<NodeDayMetric>& tally,
                   RunReport* log) {
  std::vector<HitRecord> recs;
  std::vector<const CacheState*> view;
  std::size_t i = 0;
  while (i < events.size()) {
    std::size_t j = i;
    while (j < events.size() && events[j].timestamp == events[i].timestamp) ++j;
    recs.clear();
    for (std::size_t k = i; k < j; ++k) {
      const auto& e = events[k];
      view.clear();
      for (NodeId n : nbrs[e.node_id]) view.push_back(&fleet.caches[n]);
      recs.push_back(lookup(fleet.caches[e.node_id], view, e.content_id, e.node_id));
    }
    for (std::size_t k = i; k < j; ++k) {
      const auto& e = events[k];
      const auto& rec = recs[k - i];
      auto& t = tally[e.node_id];
      ++t.requests;
      t.local_hits += rec.f_local;
      t.neighbor_hits += rec.f_neighbor;
      auto& cache = fleet.caches[e.node_id];
      auto& stats = fleet.stats[e.node_id];
      stats.expire(e.timestamp);
      if (!rec.hit()) {
        const Action a = decide(e.node_id, cache, stats, e.content_id, e.timestamp);
        if (a != cache.noop()) cache.put(a - 1, e.content_id);
      }
      stats.record(e.content_id, e.timestamp);
      if (log) {
        log->hit_log.push_back(rec);
        log->hit_log_day.push_back(day);
      }
    }
    i = j;
  }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Stream tags for derive_seed.
enum : std::uint64_t {
  kStreamPretrain = 0x5052'4554ULL,
  kStreamAdapt = 0x4144'4150ULL,
  kStreamSample = 0x5341'4d50ULL,
  kStreamServe = 0x5345'5256ULL,
  kStreamInit = 0x494e'4954ULL,
};

}  // namespace detail

/// Everything derived from the config and one seed before any method runs.
struct PreparedRun {
  Trace trace;
  TaskGrid grid;
  std::vector<std::size_t> capacities;
  std::vector<std::vector<NodeId>> neighbors;
  Tick window = 1;
  std::vector<std::size_t> day_begin;  // index of each day's first event, plus end

  std::uint32_t num_nodes() const { return grid.num_nodes; }
  std::uint32_t num_days() const { return grid.num_days; }
};

inline PreparedRun prepare_run(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PreparedRun p;
  if (cfg.trace_path.empty()) {
    SyntheticConfig w = cfg.workload;
    w.seed = seed;
    p.trace = generate_trace(w);
  } else {
    p.trace = load_trace(cfg.trace_path);
  }
  const auto& h = p.trace.header;
  p.grid = split_tasks(p.trace, h.num_days, h.num_nodes);
  p.capacities.assign(h.num_nodes, cfg.cache_size);
  if (!cfg.node_cache_sizes.empty()) {
    if (cfg.node_cache_sizes.size() != h.num_nodes)
      throw std::invalid_argument("per-node cache sizes: expected " + std::to_string(h.num_nodes) + " values");
    p.capacities = cfg.node_cache_sizes;
  }
  const std::uint32_t e = cfg.neighbor_count.value_or(h.num_nodes - 1);
  p.neighbors = detail::ring_neighbors(h.num_nodes, e);
  p.window = cfg.stats_window > 0 ? cfg.stats_window : p.grid.day_length;

  p.day_begin.assign(h.num_days + 1, p.trace.events.size());
  for (std::size_t i = p.trace.events.size(); i-- > 0;) {
    const auto d = static_cast<std::size_t>((p.trace.events[i].timestamp - p.grid.origin) / p.grid.day_length);
    p.day_begin[d] = i;
  }
  for (std::size_t d = h.num_days; d-- > 0;) p.day_begin[d] = std::min(p.day_begin[d], p.day_begin[d + 1]);
  return p;
}

inline TaskContext make_context(const PreparedRun& p, const ExperimentConfig& cfg) {
  return TaskContext(p.grid, p.capacities, p.trace.header.catalog_size, p.window, cfg.reward, p.neighbors);
}

/// Stage-1 result: one meta-initialization shared by every node.
struct Pretrained {
  ParamVector phi;
  std::size_t epochs = 0;
  std::vector<double> validation;
  double seconds = 0.0;
};

/// Every node's task pairs: local-local only, or local-local plus
/// neighbor-local pairs for the node's neighbors.
inline std::vector<TaskPair> pretraining_pairs(const PreparedRun& p, std::uint32_t num_days, bool collaborative) {
  std::vector<TaskPair> pairs;
  for (NodeId j = 0; j < p.num_nodes(); ++j) {
    const auto mine = build_task_pairs(p.grid, num_days, j, collaborative ? p.neighbors[j] : std::vector<NodeId>{});
    pairs.insert(pairs.end(), mine.begin(), mine.end());
  }
  return pairs;
}

/// Meta-pretraining on the first N days.
inline Pretrained pretrain(const ExperimentConfig& cfg, const PreparedRun& p, bool collaborative, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.meta.num_pretrain_days > p.num_days())
    throw std::invalid_argument("trace has fewer days than the pretraining window");
  const TaskContext ctx = make_context(p, cfg);
  const auto pairs = pretraining_pairs(p, cfg.meta.num_pretrain_days, collaborative);
  auto r = meta_pretrain(pairs, ctx, cfg.meta, derive_seed(seed, {detail::kStreamPretrain}),
                         ParamLayout{ParamLayout::kInputWidth, cfg.hidden});
  Pretrained out{std::move(r.phi), r.epochs, std::move(r.validation), 0.0};
  out.seconds = detail::seconds_since(t0);
  return out;
}

inline NeighborSampler make_sampler(const ExperimentConfig& cfg, Method method, std::size_t neighbor_count) {
  const std::size_t n = neighbor_count + 1;  // index 0 is the local node
  Matrix b = cfg.identity_combination ? identity_matrix(n) : make_uniform_b(n);
  const CombineMode mode = method == Method::CMCES        ? CombineMode::Sampled
                           : method == Method::MetaCollab ? CombineMode::Broadcast
                                                          : CombineMode::Local;
  return NeighborSampler(mode, CombinationMatrix::with_z_fraction(std::move(b), cfg.z_fraction), 0,
                         cfg.feedback_step);
}

/// One method, one seed. `pretrained` lets callers share an identical
/// Stage-1 result between methods.
inline RunReport run_single(const ExperimentConfig& cfg, Method method, std::uint64_t seed,
                            const PreparedRun& p, const Pretrained* pretrained = nullptr) {
  RunReport rep;
  rep.method = method;
  rep.seed = seed;
  const std::uint32_t days = p.num_days();
  const std::uint32_t nodes = p.num_nodes();
  const bool learned = !is_rule_based(method);
  const std::uint32_t first_online = cfg.meta.num_pretrain_days;
  if (learned && first_online >= days)
    throw std::invalid_argument("learned methods need at least one day after the pretraining window");
  rep.first_online_day = first_online;

  detail::Fleet fleet;
  for (NodeId j = 0; j < nodes; ++j) {
    fleet.caches.emplace_back(p.capacities[j]);
    fleet.stats.emplace_back(p.trace.header.catalog_size, p.window);
  }
  rep.metrics.reserve(static_cast<std::size_t>(days) * nodes);
  RunReport* log = cfg.keep_hit_log ? &rep : nullptr;
  auto day_span = [&](std::uint32_t d) {
    return std::span<const RequestEvent>(p.trace.events).subspan(p.day_begin[d], p.day_begin[d + 1] - p.day_begin[d]);
  };
  auto new_tally = [&](std::uint32_t d) {
    std::vector<NodeDayMetric> t(nodes);
    for (NodeId j = 0; j < nodes; ++j) t[j] = {d, j, 0, 0, 0};
    return t;
  };
  auto flush = [&](std::vector<NodeDayMetric>& t) {
    for (auto& m : t) rep.metrics.push_back(m);
  };

  if (!learned) {
    const auto kind = method == Method::LRU ? BaselineKind::LRU
                      : method == Method::LFU ? BaselineKind::LFU
                                              : BaselineKind::Random;
    std::vector<Rng> rngs;
    for (NodeId j = 0; j < nodes; ++j) rngs.emplace_back(derive_seed(seed, {detail::kStreamServe, j}));
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint32_t d = 0; d < days; ++d) {
      auto tally = new_tally(d);
      detail::stream_events(
          day_span(d), d, fleet, p.neighbors,
          [&](NodeId n, const CacheState& c, const ContentStats& s, ContentId, Tick) {
            return baseline_step(kind, c, s, &rngs[n]);
          },
          tally, log);
      flush(tally);
    }
    rep.online_seconds = detail::seconds_since(t0);
    rep.events_consumed = p.trace.events.size();
    return rep;
  }

  const ParamLayout layout{ParamLayout::kInputWidth, cfg.hidden};
  std::vector<ParamVector> phi(nodes);
  if (is_meta(method)) {
    Pretrained local;
    if (!pretrained) {
      local = pretrain(cfg, p, is_collaborative(method), seed);
      pretrained = &local;
    }
    phi.assign(nodes, pretrained->phi);
    rep.pretrain_epochs = pretrained->epochs;
    rep.pretrain_seconds = pretrained->seconds;
  } else {
    for (NodeId j = 0; j < nodes; ++j) {
      Rng r(derive_seed(seed, {detail::kStreamInit, j}));
      phi[j] = init_params(layout, r, cfg.meta.init_scale);
    }
  }

  std::vector<ParamVector> serving = phi;
  std::vector<Rng> serve_rng;
  for (NodeId j = 0; j < nodes; ++j) serve_rng.emplace_back(derive_seed(seed, {detail::kStreamServe, j}));
  auto decide = [&](NodeId n, const CacheState& c, const ContentStats& s, ContentId req, Tick now) {
    if (const auto e = c.first_empty(); e < c.capacity()) return Action{e + 1};
    const auto x = featurize(c, s, req, now);
    return cfg.greedy_serving ? greedy_action(serving[n], x) : sample_action(serving[n], x, serve_rng[n]);
  };

  const auto t0 = std::chrono::steady_clock::now();
  // Pretraining days are replayed with phi* so the online phase starts warm.
  for (std::uint32_t d = 0; d < first_online; ++d) {
    auto tally = new_tally(d);
    detail::stream_events(day_span(d), d, fleet, p.neighbors, decide, tally, log);
    flush(tally);
  }

  std::vector<NeighborSampler> samplers;
  for (NodeId j = 0; j < nodes; ++j) samplers.push_back(make_sampler(cfg, method, p.neighbors[j].size()));
  const TaskContext ctx = make_context(p, cfg);
  const std::uint64_t param_floats = layout.size();

  for (std::uint32_t d = first_online; d < days; ++d) {
    // Each node adapts on the day that just finished; neighbor caches are
    // the live ones at the end of that day.
    std::vector<ParamVector> adapted(nodes), grads(nodes);
    for (NodeId j = 0; j < nodes; ++j) {
      TaskEnv env = ctx.env(d - 1, j);
      env.neighbors.clear();
      for (NodeId n : p.neighbors[j]) env.neighbors.push_back(fleet.caches[n]);
      if (env.events.empty()) {
        adapted[j] = method == Method::LocalRL ? serving[j] : phi[j];
        grads[j] = ParamVector(layout);
        continue;
      }
      Rng rng(derive_seed(seed, {detail::kStreamAdapt, d, j}));
      const ParamVector& start = method == Method::LocalRL ? serving[j] : phi[j];
      adapted[j] = inner_adapt(start, env, cfg.meta.rl, rng, &grads[j]);
    }

    CommRound round{d, 0, 0, 0};
    for (NodeId j = 0; j < nodes; ++j) {
      if (!is_collaborative(method)) {
        serving[j] = adapted[j];
        continue;
      }
      auto& sampler = samplers[j];
      std::vector<ParamVector> local_view(sampler.size());
      local_view[0] = grads[j];
      for (std::size_t k = 0; k < p.neighbors[j].size(); ++k) local_view[k + 1] = grads[p.neighbors[j][k]];
      Rng rng(derive_seed(seed, {detail::kStreamSample, d, j}));
      const RealizedWeights w = sampler.realize(rng);
      serving[j] = combine_adapted(phi[j], adapted[j], w, local_view, cfg.meta.rl.meta_lr);
      sampler.feedback(grads[j], local_view, w);

      for (std::size_t k = 0; k < p.neighbors[j].size(); ++k) {
        const NodeId from = p.neighbors[j][k];
        round.broadcast_floats += param_floats;
        if (!w.sampled[k + 1]) continue;
        round.floats_sent += param_floats;
        ++round.messages;
        auto& link = rep.links[{from, j}];
        link.floats += param_floats;
        ++link.messages;
      }
    }
    if (is_collaborative(method)) rep.comms.push_back(round);

    auto tally = new_tally(d);
    detail::stream_events(day_span(d), d, fleet, p.neighbors, decide, tally, log);
    flush(tally);
  }
  rep.online_seconds = detail::seconds_since(t0);
  rep.events_consumed = p.trace.events.size();
  return rep;
}

/// Runs `cfg.method` for every seed.
inline MetricsReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  MetricsReport out;
  for (auto seed : cfg.seeds) {
    const PreparedRun p = prepare_run(cfg, seed);
    out.runs.push_back(run_single(cfg, cfg.method, seed, p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct AblationReport {
  std::vector<Method> methods{Method::MetaOnly, Method::MetaCollab, Method::CMCES};
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> online_hit_rate;  // [method][seed]
  std::vector<double> medians;
  MetricsReport runs;

  /// Seeds where CMCES > MetaCollab > MetaOnly.
  std::size_t strictly_ordered_seeds() const {
    std::size_t c = 0;
    for (std::size_t s = 0; s < seeds.size(); ++s)
      if (online_hit_rate[2][s] > online_hit_rate[1][s] && online_hit_rate[1][s] > online_hit_rate[0][s]) ++c;
    return c;
  }
};

/// MetaOnly, MetaCollab and CMCES on identical workloads. MetaCollab and
/// CMCES share the same pretraining (their Stage 1 is identical).
inline AblationReport ablation_suite(const ExperimentConfig& cfg) {
  cfg.validate();
  AblationReport rep;
  rep.seeds = cfg.seeds;
  rep.online_hit_rate.assign(3, {});
  for (auto seed : cfg.seeds) {
    const PreparedRun p = prepare_run(cfg, seed);
    RunReport only = run_single(cfg, Method::MetaOnly, seed, p);
    const Pretrained shared = pretrain(cfg, p, true, seed);
    RunReport collab = run_single(cfg, Method::MetaCollab, seed, p, &shared);
    RunReport full = run_single(cfg, Method::CMCES, seed, p, &shared);
    rep.online_hit_rate[0].push_back(only.online_hit_rate());
    rep.online_hit_rate[1].push_back(collab.online_hit_rate());
    rep.online_hit_rate[2].push_back(full.online_hit_rate());
    rep.runs.runs.push_back(std::move(only));
    rep.runs.runs.push_back(std::move(collab));
    rep.runs.runs.push_back(std::move(full));
  }
  for (const auto& row : rep.online_hit_rate) rep.medians.push_back(median(row));
  return rep;
}

// ---------------------------------------------------------------------------
// Communication accounting
// ---------------------------------------------------------------------------

struct CommTotals {
  std::uint64_t floats_sent = 0;
  std::uint64_t messages = 0;
  std::uint64_t broadcast_floats = 0;
};

/// Floats transmitted per method, summed over seeds and rounds. One gradient
/// vector is counted per sampled neighbor per round; `broadcast_floats` is
/// what sending every neighbor's gradient would have cost.
inline std::map<Method, CommTotals> comm_cost(const MetricsReport& report) {
  std::map<Method, CommTotals> out;
  for (const auto& run : report.runs) {
    auto& t = out[run.method];
    for (const auto& c : run.comms) {
      t.floats_sent += c.floats_sent;
      t.messages += c.messages;
      t.broadcast_floats += c.broadcast_floats;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const MetricsReport& report, std::ostream& out) {
  out << "method,seed,day,node,hit_rate\n";
  for (const auto& run : report.runs)
    for (const auto& m : run.metrics)
      out << to_string(run.method) << ',' << run.seed << ',' << m.day << ',' << m.node << ','
          << format_real(m.hit_rate()) << '\n';
}

inline void write_comms_csv(const MetricsReport& report, std::ostream& out) {
  out << "method,seed,round,floats_sent\n";
  for (const auto& run : report.runs)
    for (const auto& c : run.comms)
      out << to_string(run.method) << ',' << run.seed << ',' << c.round << ',' << c.floats_sent << '\n';
}

struct ReportPaths {
  std::filesystem::path metrics;
  std::filesystem::path comms;
};

/// Writes `metrics.csv` and `comms.csv` into directory `dir`.
inline ReportPaths write_report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create report directory " + dir.string() + ": " + ec.message());
  ReportPaths paths{dir / "metrics.csv", dir / "comms.csv"};
  auto emit = [](const std::filesystem::path& path, auto&& writer) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    writer(out);
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + path.string());
  };
  emit(paths.metrics, [&](std::ostream& o) { write_metrics_csv(report, o); });
  emit(paths.comms, [&](std::ostream& o) { write_comms_csv(report, o); });
  return paths;
}

struct MetricRow {
  std::string method;
  std::uint64_t seed = 0;
  std::uint32_t day = 0;
  NodeId node = 0;
  double hit_rate = 0.0;
};

inline std::vector<MetricRow> read_metrics_csv(std::istream& in, const std::string& name = "metrics.csv") {
  std::vector<MetricRow> rows;
  std::string line;
  if (!std::getline(in, line) || line != "method,seed,day,node,hit_rate")
    throw std::runtime_error(name + ": missing or unexpected header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    MetricRow r;
    std::string seed, day, node, rate;
    if (!std::getline(ss, r.method, ',') || !std::getline(ss, seed, ',') || !std::getline(ss, day, ',') ||
        !std::getline(ss, node, ',') || !std::getline(ss, rate))
      throw std::runtime_error(name + ": line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      r.seed = std::stoull(seed);
      r.day = static_cast<std::uint32_t>(std::stoul(day));
      r.node = static_cast<NodeId>(std::stoul(node));
      r.hit_rate = std::stod(rate);
    } catch (const std::exception&) {
      throw std::runtime_error(name + ": line " + std::to_string(lineno) + ": malformed number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Per method: mean hit rate over rows with day >= from_day for each seed,
/// then the median across seeds.
struct MethodSummary {
  std::string method;
  std::map<std::uint64_t, double> per_seed;
  double median = 0.0;
};

inline std::vector<MethodSummary> summarize(const std::vector<MetricRow>& rows, std::uint32_t from_day) {
  std::map<std::string, std::map<std::uint64_t, std::pair<double, std::size_t>>> acc;
  for (const auto& r : rows) {
    if (r.day < from_day) continue;
    auto& a = acc[r.method][r.seed];
    a.first += r.hit_rate;
    ++a.second;
  }
  std::vector<MethodSummary> out;
  for (const auto& [method, seeds] : acc) {
    MethodSummary s{method, {}, 0.0};
    std::vector<double> vals;
    for (const auto& [seed, a] : seeds) {
      s.per_seed[seed] = a.first / static_cast<double>(a.second);
      vals.push_back(s.per_seed[seed]);
    }
    s.median = median(vals);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
T parse_number(std::string_view key, const std::string& value) {
  try {
    std::size_t used = 0;
    T out{};
    if constexpr (std::is_floating_point_v<T>) {
      out = static_cast<T>(std::stod(value, &used));
    } else {
      if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<T>(std::stoull(value, &used));
    }
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw std::invalid_argument("bad value for " + std::string(key) + ": '" + value + "'");
  }
}

template <class T>
std::vector<T> parse_list(std::string_view key, const std::string& value) {
  std::vector<T> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, item));
  if (out.empty()) throw std::invalid_argument("empty list for " + std::string(key));
  return out;
}

inline bool parse_bool(std::string_view key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw std::invalid_argument("bad boolean for " + std::string(key) + ": '" + v + "'");
}

}  // namespace detail

/// Keys accepted by apply_setting; CLI flags use the same names.
inline const std::vector<std::string>& setting_keys() {
  static const std::vector<std::string> keys{
      "method",       "seed",          "seeds",        "trace",        "catalog",      "nodes",
      "requests-per-day", "days",      "zipf",         "drift",        "heterogeneity", "cache-size",
      "cache-sizes",  "neighbors",     "alpha",        "beta",         "gamma",        "meta-lr",
      "adapt-lr",     "inner-steps",   "trajectories", "horizon",      "lambda",       "pretrain-days",
      "eval-trajectories", "max-epochs", "patience",   "convergence-tol", "hidden",    "z-frac",
      "feedback-step", "combination",  "stats-window", "serve"};
  return keys;
}

inline void apply_setting(ExperimentConfig& cfg, std::string_view key, const std::string& value) {
  using detail::parse_number;
  auto& rl = cfg.meta.rl;
  if (key == "method") cfg.method = parse_method(value);
  else if (key == "seed") cfg.seeds = {parse_number<std::uint64_t>(key, value)};
  else if (key == "seeds") cfg.seeds = detail::parse_list<std::uint64_t>(key, value);
  else if (key == "trace") cfg.trace_path = value;
  else if (key == "catalog") cfg.workload.catalog_size = parse_number<std::uint32_t>(key, value);
  else if (key == "nodes") cfg.workload.num_nodes = parse_number<std::uint32_t>(key, value);
  else if (key == "requests-per-day") cfg.workload.requests_per_day_per_node = parse_number<std::uint32_t>(key, value);
  else if (key == "days") cfg.workload.num_days = parse_number<std::uint32_t>(key, value);
  else if (key == "zipf") cfg.workload.zipf_exponent = parse_number<double>(key, value);
  else if (key == "drift") cfg.workload.drift_fraction = parse_number<double>(key, value);
  else if (key == "heterogeneity") cfg.workload.heterogeneity = parse_number<double>(key, value);
  else if (key == "cache-size") cfg.cache_size = parse_number<std::size_t>(key, value);
  else if (key == "cache-sizes") cfg.node_cache_sizes = detail::parse_list<std::size_t>(key, value);
  else if (key == "neighbors") cfg.neighbor_count = parse_number<std::uint32_t>(key, value);
  else if (key == "alpha") cfg.reward.alpha = parse_number<double>(key, value);
  else if (key == "beta") cfg.reward.beta = parse_number<double>(key, value);
  else if (key == "gamma") rl.gamma = parse_number<double>(key, value);
  else if (key == "meta-lr") rl.meta_lr = parse_number<double>(key, value);
  else if (key == "adapt-lr") rl.inner_lr = parse_number<double>(key, value);
  else if (key == "inner-steps") rl.M = parse_number<std::size_t>(key, value);
  else if (key == "trajectories") rl.K = parse_number<std::size_t>(key, value);
  else if (key == "horizon") rl.H = parse_number<std::size_t>(key, value);
  else if (key == "lambda") cfg.meta.lambda = parse_number<double>(key, value);
  else if (key == "pretrain-days") cfg.meta.num_pretrain_days = parse_number<std::uint32_t>(key, value);
  else if (key == "eval-trajectories") cfg.meta.eval_trajectories = parse_number<std::size_t>(key, value);
  else if (key == "max-epochs") cfg.meta.max_epochs = parse_number<std::size_t>(key, value);
  else if (key == "patience") cfg.meta.patience = parse_number<std::size_t>(key, value);
  else if (key == "convergence-tol") cfg.meta.convergence_tol = parse_number<double>(key, value);
  else if (key == "hidden") cfg.hidden = parse_number<std::size_t>(key, value);
  else if (key == "z-frac") cfg.z_fraction = parse_number<double>(key, value);
  else if (key == "feedback-step") cfg.feedback_step = parse_number<double>(key, value);
  else if (key == "combination") {
    if (value == "identity") cfg.identity_combination = true;
    else if (value == "uniform") cfg.identity_combination = false;
    else throw std::invalid_argument("combination must be 'uniform' or 'identity'");
  } else if (key == "stats-window") cfg.stats_window = parse_number<Tick>(key, value);
  else if (key == "serve") {
    if (value == "greedy") cfg.greedy_serving = true;
    else if (value == "sample") cfg.greedy_serving = false;
    else throw std::invalid_argument("serve must be 'greedy' or 'sample'");
  } else throw std::invalid_argument("unknown setting: " + std::string(key));
}

/// `key = value` lines; blank lines and `#` comments are ignored.
inline void apply_config(ExperimentConfig& cfg, std::istream& in, const std::string& name = "config") {
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(name + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void load_config(ExperimentConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  apply_config(cfg, in, path);
}

}  // namespace cmces
