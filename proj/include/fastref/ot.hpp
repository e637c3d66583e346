#pragma once

#include "fastref/linalg.hpp"

#include <optional>
#include <vector>

namespace fastref {

enum class CostMetric { sq_euclidean, cosine_dist };

CostMetric cost_metric_for(MetricMode mode);

// m x n pairwise costs; every entry finite and >= 0.
class CostMatrix {
 public:
  CostMatrix(Matrix values, CostMetric metric);

  Eigen::Index rows() const noexcept { return values_.rows(); }
  Eigen::Index cols() const noexcept { return values_.cols(); }
  const Matrix &values() const noexcept { return values_; }
  CostMetric metric() const noexcept { return metric_; }

 private:
  Matrix values_;
  CostMetric metric_;
};

// sq_euclidean: ||a_i - b_j||^2.  cosine_dist: (1 - cos(a_i, b_j)) / 2.
CostMatrix cost_matrix(const Matrix &a, const Matrix &b, CostMetric metric);

// Entries of an m x n plan with uniform marginals (1/m rows, 1/n columns).
using TransportPlan = Matrix;

struct SinkhornConfig {
  // Unset means auto: 0.05 * median(C), recomputed on every call.
  std::optional<double> epsilon;
  int max_inner_iters = 10;
  double marginal_tol = 1e-6;
};

double auto_epsilon(const CostMatrix &cost);
double resolve_epsilon(const CostMatrix &cost, const SinkhornConfig &config);

// Log-domain scalings: T_ij = exp((f_i + g_j - C_ij) / eps).
struct DualPotentials {
  Vector f;
  Vector g;
};

struct SinkhornResult {
  TransportPlan plan;
  double ot_value = 0.0;  // <T, C> + eps * sum T ln T
  double transport_cost = 0.0;  // <T, C>
  double epsilon = 0.0;
  int iterations = 0;
  double row_residual = 0.0;  // L-inf
  double col_residual = 0.0;  // L-inf
  // L1 column-marginal error after each column+row sweep.
  std::vector<double> residual_history;
  DualPotentials potentials;
};

// Alternating column/row scaling in the log domain, stopped after
// max_inner_iters sweeps or once both L-inf marginal residuals are within
// marginal_tol. Every sweep ends on the rows, so row sums are exactly 1/m.
// `warm_start` seeds the row potential f.
SinkhornResult sinkhorn(const CostMatrix &cost, const SinkhornConfig &config,
                        const DualPotentials *warm_start = nullptr);

// Nearest-feasible rounding onto the uniform-marginal polytope: rows and
// columns above their target are scaled down, then the deficits are restored
// by a rank-one term. Exact marginals up to rounding error; entries stay >= 0.
TransportPlan round_to_marginals(const TransportPlan &plan);

// sum T ln T with 0 ln 0 = 0.
double neg_entropy(const TransportPlan &plan);

// <T, C> + eps * sum T ln T, with 0 ln 0 = 0.
double entropic_ot_value(const Matrix &cost, const TransportPlan &plan, double epsilon);

struct ExactOtResult {
  TransportPlan plan;
  double value = 0.0;
};

// Unregularized OT with uniform marginals by enumerating every basic feasible
// solution (spanning trees of K_{m,n}). Test oracle; m, n <= 4.
ExactOtResult exact_ot_small(const CostMatrix &cost);

}  // namespace fastref
