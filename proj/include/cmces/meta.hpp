#pragma once

// Meta-learning over consecutive-day task pairs: local-local pairs
// (T[i,local] -> T[i+1,local]) and neighbor-local pairs
// (T[i,neighbor] -> T[i+1,local]), first-order meta-gradients, the pretraining
// loop and the per-round adaptation used online.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmces/cachesim.hpp"
#include "cmces/policy.hpp"
#include "cmces/sampling.hpp"
#include "cmces/workload.hpp"

namespace cmces {

enum class PairKind { LocalLocal, NeighborLocal };

struct TaskPair {
  std::uint32_t source_day = 0;
  NodeId source_node = 0;
  std::uint32_t target_day = 1;
  NodeId target_node = 0;
  PairKind kind = PairKind::LocalLocal;
};

struct MetaConfig {
  double lambda = 0.5;
  std::uint32_t num_pretrain_days = 5;
  RLConfig rl;
  std::size_t eval_trajectories = 1;  // Monte-Carlo width on the target task
  std::size_t max_epochs = 200;
  double convergence_tol = 1e-3;      // relative improvement of the validation loss
  std::size_t patience = 3;           // consecutive epochs below tolerance
  double init_scale = 0.05;

  void validate() const {
    rl.validate();
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("MetaConfig: lambda must be in [0,1]");
    if (num_pretrain_days < 2) throw std::invalid_argument("MetaConfig: need at least 2 pretraining days");
    if (eval_trajectories == 0) throw std::invalid_argument("MetaConfig: eval_trajectories must be >= 1");
  }
};

/// Everything needed to turn a (day, node) cell of the grid into a TaskEnv.
struct TaskContext {
  const TaskGrid* grid = nullptr;
  std::vector<std::size_t> capacities;  // per node
  std::size_t catalog_size = 1;
  Tick window = 1;
  RewardWeights weights;
  std::vector<std::vector<NodeId>> neighbors_of;  // empty: no neighbor caches

  TaskContext() = default;
  TaskContext(const TaskGrid& g, std::vector<std::size_t> caps, std::size_t catalog, Tick win, RewardWeights w,
              std::vector<std::vector<NodeId>> nbrs = {})
      : grid(&g), capacities(std::move(caps)), catalog_size(catalog), window(win), weights(w),
        neighbors_of(std::move(nbrs)) {
    if (capacities.size() != g.num_nodes) throw std::invalid_argument("TaskContext: one capacity per node");
    reference_.resize(g.tasks.size());
    for (std::size_t i = 0; i < g.tasks.size(); ++i) {
      ContentStats s(catalog, std::numeric_limits<Tick>::max() / 4);
      for (const auto& e : g.tasks[i].events) s.record(e.content_id, e.timestamp);
      reference_[i] = detail::most_frequent(s, capacities[i % g.num_nodes]);
    }
  }
  TaskContext(const TaskGrid& g, std::size_t capacity, std::size_t catalog, Tick win, RewardWeights w,
              std::vector<std::vector<NodeId>> nbrs = {})
      : TaskContext(g, std::vector<std::size_t>(g.num_nodes, capacity), catalog, win, w, std::move(nbrs)) {}

  std::size_t capacity_of(NodeId node) const { return capacities.at(node); }

  /// Neighbor caches during offline replay are stood in for by each
  /// neighbor's most requested contents of that day.
  const CacheState& reference_cache(std::uint32_t day, NodeId node) const {
    return reference_.at(static_cast<std::size_t>(day) * grid->num_nodes + node);
  }

  TaskEnv env(std::uint32_t day, NodeId node) const {
    const Task& t = grid->at(day, node);
    TaskEnv e;
    e.events = t.events;
    if (day > 0) e.history = grid->at(day - 1, node).events;
    e.capacity = capacity_of(node);
    e.catalog_size = catalog_size;
    e.window = window;
    e.weights = weights;
    if (node < neighbors_of.size())
      for (NodeId n : neighbors_of[node]) e.neighbors.push_back(reference_cache(day, n));
    return e;
  }

 private:
  std::vector<CacheState> reference_;
};

/// For each day i < N-1: one local-local pair and one neighbor-local pair per
/// listed neighbor, all targeting T[i+1, local].
inline std::vector<TaskPair> build_task_pairs(const TaskGrid& grid, std::uint32_t num_days, NodeId local,
                                              const std::vector<NodeId>& neighbors) {
  if (num_days < 2) throw std::invalid_argument("build_task_pairs: need at least 2 days");
  if (num_days > grid.num_days) throw std::invalid_argument("build_task_pairs: grid is missing days");
  if (local >= grid.num_nodes) throw std::invalid_argument("build_task_pairs: missing local node");
  for (NodeId n : neighbors)
    if (n >= grid.num_nodes || n == local) throw std::invalid_argument("build_task_pairs: bad neighbor id");
  std::vector<TaskPair> pairs;
  pairs.reserve((num_days - 1) * (1 + neighbors.size()));
  for (std::uint32_t i = 0; i + 1 < num_days; ++i) {
    pairs.push_back({i, local, i + 1, local, PairKind::LocalLocal});
    for (NodeId n : neighbors) pairs.push_back({i, n, i + 1, local, PairKind::NeighborLocal});
  }
  return pairs;
}

/// All other nodes of the grid act as neighbors.
inline std::vector<TaskPair> build_task_pairs(const TaskGrid& grid, std::uint32_t num_days, NodeId local) {
  std::vector<NodeId> others;
  for (NodeId n = 0; n < grid.num_nodes; ++n)
    if (n != local) others.push_back(n);
  return build_task_pairs(grid, num_days, local, others);
}

struct PairEvaluation {
  double loss = 0.0;
  ParamVector adapted;        // theta^M
  ParamVector meta_gradient;  // first-order: loss gradient at theta^M
  std::vector<Trajectory> evaluation;
};

/// Adapt on the source task, evaluate on the target task.
inline PairEvaluation evaluate_pair(const ParamVector& phi, const TaskPair& pair, const TaskContext& ctx,
                                    const MetaConfig& cfg, Rng& rng, bool with_gradient = true) {
  const TaskEnv src = ctx.env(pair.source_day, pair.source_node);
  const TaskEnv dst = ctx.env(pair.target_day, pair.target_node);
  if (src.events.empty() || dst.events.empty()) throw std::invalid_argument("pair_meta_loss: empty task in pair");
  PairEvaluation out;
  out.adapted = inner_adapt(phi, src, cfg.rl, rng);
  out.evaluation = sample_trajectories(dst, out.adapted, cfg.eval_trajectories, cfg.rl.H, rng);
  out.loss = batch_loss(out.evaluation);
  if (with_gradient) out.meta_gradient = policy_gradient(out.adapted, out.evaluation, cfg.rl.gamma);
  return out;
}

inline double pair_meta_loss(const ParamVector& phi, const TaskPair& pair, const TaskContext& ctx,
                             const MetaConfig& cfg, Rng& rng) {
  return evaluate_pair(phi, pair, ctx, cfg, rng, false).loss;
}

inline double pair_weight(const TaskPair& p, double lambda) {
  return p.kind == PairKind::LocalLocal ? 1.0 : lambda;
}

struct MetaLoss {
  double total = 0.0;
  double local_sum = 0.0;     // local-local pair losses
  double neighbor_sum = 0.0;  // neighbor-local pair losses (unweighted)
};

/// Combine per-pair losses: sum(local-local) + lambda * sum(neighbor-local).
inline MetaLoss combine_pair_losses(const std::vector<TaskPair>& pairs, const std::vector<double>& losses,
                                    double lambda) {
  if (pairs.size() != losses.size()) throw std::invalid_argument("combine_pair_losses: size mismatch");
  MetaLoss m;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    (pairs[i].kind == PairKind::LocalLocal ? m.local_sum : m.neighbor_sum) += losses[i];
  m.total = m.local_sum + lambda * m.neighbor_sum;
  return m;
}

struct MetaGradient {
  MetaLoss loss;
  ParamVector gradient;
  std::vector<double> pair_losses;
};

namespace detail {

// Pair losses (and optionally the first-order meta-gradient) for a whole pair
// list. The inner adaptation only depends on phi and the source task, so it
// runs once per distinct source and is shared by every pair reading from it.
// Source (d, n) adapts on stream derive_seed(seed, {0, d, n}); pair k
// evaluates on stream derive_seed(seed, {1, k}).
inline MetaGradient evaluate_pairs(const ParamVector& phi, const std::vector<TaskPair>& pairs,
                                   const TaskContext& ctx, const MetaConfig& cfg, std::uint64_t seed,
                                   bool with_gradient) {
  MetaGradient out;
  if (with_gradient) out.gradient = ParamVector(phi.layout());
  out.pair_losses.resize(pairs.size());
  std::map<std::pair<std::uint32_t, NodeId>, ParamVector> adapted;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const TaskPair& p = pairs[k];
    const TaskEnv dst = ctx.env(p.target_day, p.target_node);
    if (dst.events.empty()) throw std::invalid_argument("pair_meta_loss: empty task in pair");
    auto it = adapted.find({p.source_day, p.source_node});
    if (it == adapted.end()) {
      const TaskEnv src = ctx.env(p.source_day, p.source_node);
      if (src.events.empty()) throw std::invalid_argument("pair_meta_loss: empty task in pair");
      Rng rng(derive_seed(seed, {0, p.source_day, p.source_node}));
      it = adapted.emplace(std::pair{p.source_day, p.source_node}, inner_adapt(phi, src, cfg.rl, rng)).first;
    }
    Rng rng(derive_seed(seed, {1, k}));
    const auto eval = sample_trajectories(dst, it->second, cfg.eval_trajectories, cfg.rl.H, rng);
    out.pair_losses[k] = batch_loss(eval);
    if (with_gradient) out.gradient.axpy(pair_weight(p, cfg.lambda), policy_gradient(it->second, eval, cfg.rl.gamma));
  }
  out.loss = combine_pair_losses(pairs, out.pair_losses, cfg.lambda);
  return out;
}

}  // namespace detail

/// Meta-loss over a pair list. A fixed seed freezes all randomness.
inline MetaLoss total_meta_loss(const ParamVector& phi, const std::vector<TaskPair>& pairs, const TaskContext& ctx,
                                const MetaConfig& cfg, std::uint64_t seed) {
  return detail::evaluate_pairs(phi, pairs, ctx, cfg, seed, false).loss;
}

/// First-order meta-gradient: each pair contributes its target-loss gradient
/// at theta^M, treating d theta^M / d phi as the identity.
inline MetaGradient meta_gradient(const ParamVector& phi, const std::vector<TaskPair>& pairs,
                                  const TaskContext& ctx, const MetaConfig& cfg, std::uint64_t seed) {
  return detail::evaluate_pairs(phi, pairs, ctx, cfg, seed, true);
}

struct PretrainResult {
  ParamVector phi;
  ParamVector initial;
  std::size_t epochs = 0;
  std::vector<double> validation;  // validation meta-loss, index 0 = before training
};

/// Stage-1 pretraining. One meta step per epoch over all pairs; stops when the
/// frozen-seed validation loss improves by less than `convergence_tol`
/// (relative to the best so far) for `patience` consecutive epochs, or after
/// `max_epochs`.
inline PretrainResult meta_pretrain(const std::vector<TaskPair>& pairs, const TaskContext& ctx,
                                    const MetaConfig& cfg, std::uint64_t seed, ParamLayout layout = {}) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("meta_pretrain: no task pairs");
  Rng init_rng(derive_seed(seed, {0x494e4954ULL}));
  PretrainResult out;
  out.initial = init_params(layout, init_rng, cfg.init_scale);
  out.phi = out.initial;

  const std::uint64_t val_seed = derive_seed(seed, {0x56414cULL});
  double best = total_meta_loss(out.phi, pairs, ctx, cfg, val_seed).total;
  out.validation.push_back(best);
  std::size_t stalled = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto mg = meta_gradient(out.phi, pairs, ctx, cfg, derive_seed(seed, {0x45504fULL, epoch}));
    if (!std::isfinite(mg.loss.total) || !mg.gradient.all_finite()) {
      std::ostringstream msg;
      msg << "meta_pretrain: non-finite meta-loss at epoch " << epoch << " (loss " << mg.loss.total
          << ", gradient norm " << mg.gradient.norm() << ", parameter norm " << out.phi.norm() << ")";
      throw std::runtime_error(msg.str());
    }
    out.phi.axpy(-cfg.rl.meta_lr, mg.gradient);
    out.epochs = epoch;

    const double v = total_meta_loss(out.phi, pairs, ctx, cfg, val_seed).total;
    out.validation.push_back(v);
    const double improvement = (best - v) / std::max(std::abs(best), 1e-12);
    stalled = improvement < cfg.convergence_tol ? stalled + 1 : 0;
    best = std::min(best, v);
    if (stalled >= cfg.patience) break;
  }
  return out;
}

/// theta^M moved by the realized combination: the local adaptation
/// displacement is scaled by the self weight and each weighted neighbor
/// gradient is subtracted with step eta,
///   theta = theta^M + (w_local - 1)(theta^M - phi) - eta * sum_{j != local} w_j g_j.
/// With w_local = 1 and no neighbor weight this returns theta^M unchanged.
inline ParamVector combine_adapted(const ParamVector& phi, const ParamVector& adapted, const RealizedWeights& w,
                                   std::span<const ParamVector> neighbor_grads, double eta) {
  ParamVector out = adapted;
  const double self = w.w.at(w.local);
  if (self != 1.0) {
    ParamVector delta = adapted;
    delta.axpy(-1.0, phi);
    out.axpy(self - 1.0, delta);
  }
  std::vector<double> others = w.w;
  others[w.local] = 0.0;
  return combine_update(out, neighbor_grads, others, eta);
}

struct AdaptOutcome {
  ParamVector theta;       // serving parameters
  ParamVector adapted;     // theta^M before combination
  ParamVector local_grad;  // gradient at phi*, shared with neighbors
  RealizedWeights weights;
};

/// Local inner adaptation from phi* on the newest task, followed by the
/// combination with neighbor gradients. `neighbor_grads` is indexed like the
/// sampler's matrix; the local entry is ignored.
inline AdaptOutcome meta_adapt_step(const ParamVector& phi_star, const TaskEnv& task,
                                    std::span<const ParamVector> neighbor_grads, NeighborSampler& sampler,
                                    const MetaConfig& cfg, Rng& rng) {
  AdaptOutcome out;
  out.adapted = inner_adapt(phi_star, task, cfg.rl, rng, &out.local_grad);
  out.weights = sampler.realize(rng);
  std::vector<ParamVector> grads(neighbor_grads.begin(), neighbor_grads.end());
  if (grads.size() != sampler.size()) throw std::invalid_argument("meta_adapt_step: gradient count mismatch");
  out.theta = combine_adapted(phi_star, out.adapted, out.weights, grads, cfg.rl.meta_lr);
  grads[sampler.local()] = out.local_grad;
  sampler.feedback(out.local_grad, grads, out.weights);
  return out;
}

}  // namespace cmces
