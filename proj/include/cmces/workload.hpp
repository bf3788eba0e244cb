#pragma once

// Request traces: synthetic generation with drifting, per-node heterogeneous
// Zipf popularity, a plain-text file format, and day x node task slicing.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cmces/rng.hpp"

namespace cmces {

using ContentId = std::uint32_t;
using NodeId = std::uint32_t;
using Tick = std::int64_t;

struct RequestEvent {
  Tick timestamp = 0;
  ContentId content_id = 0;
  NodeId node_id = 0;

  friend bool operator==(const RequestEvent&, const RequestEvent&) = default;
};

struct TraceHeader {
  std::uint32_t num_nodes = 1;
  std::uint32_t catalog_size = 1;
  std::uint32_t num_days = 1;

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

struct Trace {
  TraceHeader header;
  std::vector<RequestEvent> events;

  friend bool operator==(const Trace&, const Trace&) = default;
};

struct SyntheticConfig {
  std::uint32_t catalog_size = 500;
  std::uint32_t num_nodes = 8;
  std::uint32_t requests_per_day_per_node = 5000;
  std::uint32_t num_days = 13;
  double zipf_exponent = 1.0;
  double drift_fraction = 0.3;
  double heterogeneity = 0.4;
  std::uint64_t seed = 1;

  void validate() const {
    if (catalog_size == 0 || num_nodes == 0 || requests_per_day_per_node == 0 || num_days == 0)
      throw std::invalid_argument("SyntheticConfig: counts must be positive");
    if (!(zipf_exponent > 0.0) || !std::isfinite(zipf_exponent))
      throw std::invalid_argument("SyntheticConfig: zipf_exponent must be positive");
    if (!(drift_fraction >= 0.0 && drift_fraction <= 1.0))
      throw std::invalid_argument("SyntheticConfig: drift_fraction must be in [0,1]");
    if (!(heterogeneity >= 0.0 && heterogeneity <= 1.0))
      throw std::invalid_argument("SyntheticConfig: heterogeneity must be in [0,1]");
  }
};

/// Error raised while reading a trace file. `line()` is 1-based, 0 if unknown.
class TraceError : public std::runtime_error {
 public:
  TraceError(std::size_t line, const std::string& what)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Zipf probabilities for ranks 1..n, proportional to rank^-s.
inline std::vector<double> zipf_pmf(std::size_t n, double s) {
  if (n == 0) throw std::invalid_argument("zipf_pmf: n must be >= 1");
  if (!(s >= 0.0) || !std::isfinite(s)) throw std::invalid_argument("zipf_pmf: s must be >= 0");
  std::vector<double> p(n);
  for (std::size_t r = 0; r < n; ++r) p[r] = std::pow(static_cast<double>(r + 1), -s);
  // sum smallest-first for accuracy
  double total = 0.0;
  for (std::size_t r = n; r-- > 0;) total += p[r];
  for (auto& x : p) x /= total;
  return p;
}

namespace detail {

inline std::vector<double> cumulative(const std::vector<double>& pmf) {
  std::vector<double> cdf(pmf.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pmf.size(); ++i) cdf[i] = (acc += pmf[i]);
  cdf.back() = 1.0;
  return cdf;
}

inline std::size_t sample_cdf(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.uniform();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return it == cdf.end() ? cdf.size() - 1 : static_cast<std::size_t>(it - cdf.begin());
}

// Pick `count` distinct positions of [0, n) and randomly permute the values
// held at those positions.
template <class T>
void permute_subset(std::vector<T>& v, std::size_t count, Rng& rng) {
  const std::size_t n = v.size();
  count = std::min(count, n);
  if (count < 2) return;
  std::vector<std::size_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = i;
  // partial Fisher-Yates: the first `count` entries become a uniform sample
  for (std::size_t i = 0; i < count; ++i) std::swap(pos[i], pos[i + rng.below(n - i)]);
  pos.resize(count);
  std::sort(pos.begin(), pos.end());
  std::vector<T> vals(count);
  for (std::size_t i = 0; i < count; ++i) vals[i] = v[pos[i]];
  rng.shuffle(vals.begin(), vals.end());
  for (std::size_t i = 0; i < count; ++i) v[pos[i]] = vals[i];
}

inline std::size_t fraction_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

}  // namespace detail

/// Per-node content ranking for each day: `rank_to_content[day][node][rank]`.
/// Exposed so tests can check popularity structure without sampling noise.
inline std::vector<std::vector<std::vector<ContentId>>> popularity_rankings(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, {0x5241'4e4bULL}));
  const std::size_t n = cfg.catalog_size;

  std::vector<ContentId> global(n);
  for (std::size_t i = 0; i < n; ++i) global[i] = static_cast<ContentId>(i);
  rng.shuffle(global.begin(), global.end());

  // node-specific rank permutation, fixed for the whole trace
  std::vector<std::vector<std::size_t>> node_perm(cfg.num_nodes);
  for (auto& perm : node_perm) {
    perm.resize(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    detail::permute_subset(perm, detail::fraction_count(cfg.heterogeneity, n), rng);
  }

  std::vector<std::vector<std::vector<ContentId>>> out(cfg.num_days);
  for (std::uint32_t day = 0; day < cfg.num_days; ++day) {
    if (day > 0) detail::permute_subset(global, detail::fraction_count(cfg.drift_fraction, n), rng);
    out[day].resize(cfg.num_nodes);
    for (std::uint32_t node = 0; node < cfg.num_nodes; ++node) {
      auto& ranking = out[day][node];
      ranking.resize(n);
      for (std::size_t r = 0; r < n; ++r) ranking[r] = global[node_perm[node][r]];
    }
  }
  return out;
}

/// Synthetic trace. Day d occupies ticks [d*R, (d+1)*R) with R requests per
/// node per day; at each tick every node issues one request, in node order.
inline Trace generate_trace(const SyntheticConfig& cfg) {
  cfg.validate();
  const auto rankings = popularity_rankings(cfg);
  const auto cdf = detail::cumulative(zipf_pmf(cfg.catalog_size, cfg.zipf_exponent));
  Rng rng(derive_seed(cfg.seed, {0x5245'5155ULL}));

  Trace trace;
  trace.header = {cfg.num_nodes, cfg.catalog_size, cfg.num_days};
  const Tick per_day = cfg.requests_per_day_per_node;
  trace.events.reserve(static_cast<std::size_t>(per_day) * cfg.num_nodes * cfg.num_days);
  for (std::uint32_t day = 0; day < cfg.num_days; ++day) {
    for (Tick r = 0; r < per_day; ++r) {
      for (std::uint32_t node = 0; node < cfg.num_nodes; ++node) {
        const auto rank = detail::sample_cdf(cdf, rng);
        trace.events.push_back({day * per_day + r, rankings[day][node][rank], node});
      }
    }
  }
  return trace;
}

inline void write_trace(const Trace& trace, std::ostream& out) {
  out << trace.header.num_nodes << ',' << trace.header.catalog_size << ',' << trace.header.num_days << '\n';
  for (const auto& e : trace.events) out << e.timestamp << ',' << e.content_id << ',' << e.node_id << '\n';
}

inline void write_trace(const Trace& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open trace for writing: " + path);
  write_trace(trace, out);
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace detail {

// Parse exactly three comma-separated base-10 integers.
template <class A, class B, class C>
bool parse_triple(std::string_view line, A& a, B& b, C& c) {
  const char* p = line.data();
  const char* end = p + line.size();
  auto field = [&](auto& v, bool last) {
    auto [q, ec] = std::from_chars(p, end, v);
    if (ec != std::errc() || q == p) return false;
    p = q;
    if (last) return p == end;
    if (p == end || *p != ',') return false;
    ++p;
    return true;
  };
  return field(a, false) && field(b, false) && field(c, true);
}

}  // namespace detail

inline Trace load_trace(std::istream& in) {
  Trace trace;
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw TraceError(1, "missing header");
  if (!detail::parse_triple(line, trace.header.num_nodes, trace.header.catalog_size, trace.header.num_days))
    throw TraceError(1, "malformed header, expected num_nodes,catalog_size,num_days");
  if (trace.header.num_nodes == 0 || trace.header.catalog_size == 0 || trace.header.num_days == 0)
    throw TraceError(1, "header counts must be positive");

  while (std::getline(in, line)) {
    ++lineno;
    RequestEvent e;
    if (!detail::parse_triple(line, e.timestamp, e.content_id, e.node_id))
      throw TraceError(lineno, "malformed record, expected timestamp,content_id,node_id");
    if (e.content_id >= trace.header.catalog_size)
      throw TraceError(lineno, "content_id " + std::to_string(e.content_id) + " out of range");
    if (e.node_id >= trace.header.num_nodes)
      throw TraceError(lineno, "node_id " + std::to_string(e.node_id) + " out of range");
    if (!trace.events.empty() && e.timestamp < trace.events.back().timestamp)
      throw TraceError(lineno, "timestamp " + std::to_string(e.timestamp) + " precedes timestamp " +
                                   std::to_string(trace.events.back().timestamp) + " on line " +
                                   std::to_string(lineno - 1));
    trace.events.push_back(e);
  }
  return trace;
}

inline Trace load_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TraceError(0, "cannot open trace: " + path);
  return load_trace(in);
}

struct Task {
  std::uint32_t day_index = 0;
  NodeId node_id = 0;
  std::vector<RequestEvent> events;
};

/// Tasks laid out day-major: task (day, node) lives at `day * num_nodes + node`.
struct TaskGrid {
  std::uint32_t num_days = 0;
  std::uint32_t num_nodes = 0;
  Tick day_length = 1;
  Tick origin = 0;
  std::vector<Task> tasks;

  const Task& at(std::uint32_t day, NodeId node) const {
    if (day >= num_days || node >= num_nodes) throw std::out_of_range("TaskGrid::at: no such task");
    return tasks[static_cast<std::size_t>(day) * num_nodes + node];
  }
};

/// Slice a trace into per-day, per-node tasks. The day length is derived from
/// the trace's timestamp span so that the span divides into `num_days`
/// equal windows; events on a day boundary belong to the later day.
inline TaskGrid split_tasks(const Trace& trace, std::uint32_t num_days, std::uint32_t num_nodes) {
  if (num_days == 0 || num_nodes == 0) throw std::invalid_argument("split_tasks: empty grid");
  TaskGrid grid;
  grid.num_days = num_days;
  grid.num_nodes = num_nodes;
  grid.tasks.resize(static_cast<std::size_t>(num_days) * num_nodes);
  for (std::uint32_t d = 0; d < num_days; ++d)
    for (NodeId n = 0; n < num_nodes; ++n) {
      auto& t = grid.tasks[static_cast<std::size_t>(d) * num_nodes + n];
      t.day_index = d;
      t.node_id = n;
    }
  if (trace.events.empty()) return grid;

  grid.origin = trace.events.front().timestamp;
  const Tick span = trace.events.back().timestamp - grid.origin;
  grid.day_length = span / num_days + 1;
  for (const auto& e : trace.events) {
    if (e.node_id >= num_nodes) throw std::invalid_argument("split_tasks: node id outside grid");
    const auto day = static_cast<std::uint32_t>((e.timestamp - grid.origin) / grid.day_length);
    grid.tasks[static_cast<std::size_t>(day) * num_nodes + e.node_id].events.push_back(e);
  }
  return grid;
}

}  // namespace cmces
