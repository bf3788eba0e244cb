#pragma once

// Edge neighbor sampling over a combination matrix.
//
// Weights are indexed (i, local): entry (i, local) is the weight the local
// node gives to node i. B is the doubly-stochastic reference matrix, D the
// evolving reference weights (initialized to B), W the weights realized in
// the latest round, P the appear probabilities 1 / (1 + z / b).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "cmces/policy.hpp"
#include "cmces/rng.hpp"

namespace cmces {

/// Dense square matrix, row-major.
class Matrix {
 public:
  Matrix() = default;
  explicit Matrix(std::size_t n, double fill = 0.0) : n_(n), a_(n * n, fill) {}

  std::size_t size() const noexcept { return n_; }
  double& operator()(std::size_t i, std::size_t j) { return a_[i * n_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a_[i * n_ + j]; }

  double row_sum(std::size_t i) const {
    double s = 0.0;
    for (std::size_t j = 0; j < n_; ++j) s += (*this)(i, j);
    return s;
  }
  double col_sum(std::size_t j) const {
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) s += (*this)(i, j);
    return s;
  }

  Matrix operator*(const Matrix& o) const {
    if (o.n_ != n_) throw std::invalid_argument("Matrix: size mismatch");
    Matrix r(n_);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t k = 0; k < n_; ++k) {
        const double a = (*this)(i, k);
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < n_; ++j) r(i, j) += a * o(k, j);
      }
    return r;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<double> a_;
};

inline Matrix make_uniform_b(std::size_t n) {
  if (n == 0) throw std::invalid_argument("make_uniform_b: n must be >= 1");
  return Matrix(n, 1.0 / static_cast<double>(n));
}

inline Matrix identity_matrix(std::size_t n) {
  Matrix m(n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

inline bool is_doubly_stochastic(const Matrix& b, double tol = 1e-9) {
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (std::abs(b.row_sum(i) - 1.0) > tol || std::abs(b.col_sum(i) - 1.0) > tol) return false;
    for (std::size_t j = 0; j < b.size(); ++j)
      if (b(i, j) < 0.0) return false;
  }
  return true;
}

/// Alternately normalize rows and columns of a positive matrix until both
/// sum to 1 within `tol`.
inline Matrix sinkhorn_normalize(Matrix m, double tol = 1e-13, std::size_t max_iters = 10000) {
  const std::size_t n = m.size();
  for (std::size_t it = 0; it < max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      const double s = m.row_sum(i);
      for (std::size_t j = 0; j < n; ++j) m(i, j) /= s;
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double s = m.col_sum(j);
      for (std::size_t i = 0; i < n; ++i) m(i, j) /= s;
    }
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(m.row_sum(i) - 1.0));
    if (err < tol) break;
  }
  return m;
}

/// min over nonzero b_ij of [B^2]_ij / (2 b_ij)
inline double z_upper_bound(const Matrix& b) {
  const Matrix b2 = b * b;
  double bound = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (b(i, j) != 0.0) bound = std::min(bound, b2(i, j) / (2.0 * b(i, j)));
  return bound;
}

inline double appear_probability(double b, double z) {
  if (!(b > 0.0)) throw std::invalid_argument("appear_probability: b must be positive");
  if (!(z >= 0.0)) throw std::invalid_argument("appear_probability: z must be non-negative");
  return 1.0 / (1.0 + z / b);
}

struct CombinationMatrix {
  Matrix B, D, W, P;
  double z = 0.0;

  CombinationMatrix() = default;

  CombinationMatrix(Matrix b, double z_value) : B(std::move(b)), z(z_value) {
    if (!is_doubly_stochastic(B)) throw std::invalid_argument("CombinationMatrix: B must be doubly stochastic");
    const double bound = z_upper_bound(B);
    if (!(z >= 0.0) || z > bound * (1.0 + 1e-12))
      throw std::invalid_argument("CombinationMatrix: z outside [0, z_upper_bound(B)]");
    D = B;
    W = Matrix(B.size());
    P = Matrix(B.size());
    for (std::size_t i = 0; i < B.size(); ++i)
      for (std::size_t j = 0; j < B.size(); ++j)
        if (B(i, j) > 0.0) P(i, j) = appear_probability(B(i, j), z);
  }

  /// z as a fraction of the admissible upper bound.
  static CombinationMatrix with_z_fraction(Matrix b, double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("z fraction must be in [0,1]");
    const double z = fraction * z_upper_bound(b);
    return CombinationMatrix(std::move(b), z);
  }

  std::size_t size() const noexcept { return B.size(); }
};

/// Outcome of one sampling round for a local node.
struct RealizedWeights {
  std::vector<double> w;       // w[i]: weight the local node gives node i
  std::vector<bool> sampled;   // neighbors whose gradient is exchanged
  std::size_t local = 0;
  // Importance-weighted row before the self-weight clamp; raw[local] is
  // 1 minus the other entries and may be negative.
  std::vector<double> raw;

  std::size_t sampled_count() const {
    return static_cast<std::size_t>(std::count(sampled.begin(), sampled.end(), true));
  }
};

/// Self-weight closure: w_local = 1 - sum of the other weights. A negative value is
/// clamped to 0 and the row renormalized to sum 1. Returns the weight written.
inline double self_weight(std::span<double> w, std::size_t local) {
  if (local >= w.size()) throw std::out_of_range("self_weight: local index out of range");
  double others = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j)
    if (j != local) others += w[j];
  const double self = 1.0 - others;
  if (self >= 0.0) {
    w[local] = self;
    return self;
  }
  w[local] = 0.0;
  for (auto& v : w) v /= others;
  return 0.0;
}

/// Bernoulli-sample the local node's neighbors. A sampled neighbor i gets
/// d(i,local) / p(i,local); D itself is left untouched. Also stores the
/// realized weights in column `local` of M.W.
inline RealizedWeights sample_neighbors(CombinationMatrix& M, std::size_t local, Rng& rng) {
  const std::size_t n = M.size();
  if (local >= n) throw std::out_of_range("sample_neighbors: local index out of range");
  RealizedWeights out{std::vector<double>(n, 0.0), std::vector<bool>(n, false), local, {}};
  for (std::size_t i = 0; i < n; ++i) {
    if (i == local || M.B(i, local) <= 0.0) continue;
    const double p = M.P(i, local);
    if (rng.bernoulli(p)) {
      out.sampled[i] = true;
      out.w[i] = M.D(i, local) / p;
    }
  }
  out.raw = out.w;
  double others = 0.0;
  for (std::size_t i = 0; i < n; ++i) others += i == local ? 0.0 : out.raw[i];
  out.raw[local] = 1.0 - others;
  self_weight(out.w, local);
  for (std::size_t i = 0; i < n; ++i) M.W(i, local) = out.w[i];
  return out;
}

/// theta - eta * sum_j w_j * grad_j. Nodes with zero weight are skipped and
/// may pass an empty gradient.
inline ParamVector combine_update(const ParamVector& theta, std::span<const ParamVector> grads,
                                  std::span<const double> w, double eta) {
  if (grads.size() != w.size()) throw std::invalid_argument("combine_update: weight/gradient count mismatch");
  ParamVector out = theta;
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (w[j] == 0.0) continue;
    out.axpy(-eta * w[j], grads[j]);
  }
  return out;
}

inline double cosine_similarity(const ParamVector& a, const ParamVector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

/// Multiplicative-weights feedback on the local node's reference weights:
/// each sampled neighbor j is scaled by exp(step * cos(grad_j, grad_local)),
/// then column `local` of D is renormalized to sum 1. `grads[j]` is only read
/// for sampled j. Returns the updated column.
inline std::vector<double> feedback_update(CombinationMatrix& M, std::size_t local, const ParamVector& grad_local,
                                           std::span<const ParamVector> grads, const std::vector<bool>& sampled,
                                           double step) {
  const std::size_t n = M.size();
  if (local >= n || grads.size() != n || sampled.size() != n)
    throw std::invalid_argument("feedback_update: size mismatch");
  for (std::size_t j = 0; j < n; ++j) {
    if (j == local || !sampled[j]) continue;
    M.D(j, local) *= std::exp(step * cosine_similarity(grads[j], grad_local));
  }
  const double s = M.D.col_sum(local);
  std::vector<double> col(n);
  for (std::size_t i = 0; i < n; ++i) col[i] = (M.D(i, local) /= s);
  return col;
}

/// How a node mixes neighbor gradients into its adapted model.
enum class CombineMode {
  Local,      // no collaboration
  Broadcast,  // every neighbor, fixed reference weights
  Sampled,    // Bernoulli sampling with importance rescaling and feedback
};

class NeighborSampler {
 public:
  NeighborSampler() = default;
  NeighborSampler(CombineMode mode, CombinationMatrix matrix, std::size_t local, double feedback_step = 0.1)
      : mode_(mode), matrix_(std::move(matrix)), local_(local), feedback_step_(feedback_step) {
    if (local_ >= matrix_.size()) throw std::out_of_range("NeighborSampler: local index out of range");
  }

  /// Sampler for a node without neighbors.
  static NeighborSampler isolated() { return NeighborSampler(CombineMode::Local, CombinationMatrix(make_uniform_b(1), 0.0), 0); }

  RealizedWeights realize(Rng& rng) {
    const std::size_t n = matrix_.size();
    switch (mode_) {
      case CombineMode::Local: {
        RealizedWeights r{std::vector<double>(n, 0.0), std::vector<bool>(n, false), local_, {}};
        r.w[local_] = 1.0;
        r.raw = r.w;
        return r;
      }
      case CombineMode::Broadcast: {
        RealizedWeights r{std::vector<double>(n, 0.0), std::vector<bool>(n, false), local_, {}};
        for (std::size_t i = 0; i < n; ++i) {
          if (i == local_ || matrix_.D(i, local_) <= 0.0) continue;
          r.w[i] = matrix_.D(i, local_);
          r.sampled[i] = true;
        }
        self_weight(r.w, local_);
        r.raw = r.w;
        return r;
      }
      case CombineMode::Sampled:
        return sample_neighbors(matrix_, local_, rng);
    }
    throw std::logic_error("NeighborSampler: unknown mode");
  }

  void feedback(const ParamVector& grad_local, std::span<const ParamVector> grads, const RealizedWeights& r) {
    if (mode_ != CombineMode::Sampled) return;
    feedback_update(matrix_, local_, grad_local, grads, r.sampled, feedback_step_);
  }

  CombineMode mode() const noexcept { return mode_; }
  std::size_t local() const noexcept { return local_; }
  std::size_t size() const noexcept { return matrix_.size(); }
  const CombinationMatrix& matrix() const noexcept { return matrix_; }

 private:
  CombineMode mode_ = CombineMode::Local;
  CombinationMatrix matrix_;
  std::size_t local_ = 0;
  double feedback_step_ = 0.1;
};

/// Row-major dump, comma-separated, 17 significant digits.
inline void dump_matrix(const Matrix& m, std::ostream& out) {
  char buf[40];
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = 0; j < m.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace cmces
