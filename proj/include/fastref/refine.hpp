#pragma once

#include "fastref/linalg.hpp"
#include "fastref/ot.hpp"
#include "fastref/tensor_io.hpp"

#include <vector>

namespace fastref {

// m x n; refined prototypes are W * M.
using TransformMatrix = Matrix;

// Read-only per-bank state shared by every query refined against it:
// the metric-prepared bank M, its Gram matrix G = M M^T, and the ridge-shifted
// inverse (G + ridge * tr(G)/n * I)^-1.
class BankSystem {
 public:
  BankSystem(Matrix bank, double ridge, MetricMode metric);
  BankSystem(const PrototypeBank &bank, double ridge);

  const Matrix &bank() const noexcept { return bank_; }
  const Matrix &gram() const noexcept { return gram_; }
  const Matrix &gram_inverse() const noexcept { return gram_inverse_; }
  const Vector &bank_sq_norms() const noexcept { return bank_sq_norms_; }
  // [G Ginv | G Ginv G], n x 2n.
  const Matrix &projection_pair() const noexcept { return projection_pair_; }
  Eigen::Index count() const noexcept { return bank_.rows(); }
  Eigen::Index channels() const noexcept { return bank_.cols(); }
  MetricMode metric() const noexcept { return metric_; }
  double ridge() const noexcept { return ridge_; }
  double ridge_shift() const noexcept { return ridge_shift_; }

 private:
  Matrix bank_;
  Matrix gram_;
  Matrix gram_inverse_;
  Matrix projection_pair_;
  Vector bank_sq_norms_;
  MetricMode metric_;
  double ridge_;
  double ridge_shift_;
};

// Per-query products reused across outer iterations. In cosine mode F is
// taken with unit rows.
struct QueryContext {
  Matrix cross;     // F M^T, m x n
  Vector sq_norms;  // ||F_i||^2
};

QueryContext make_query_context(const Matrix &query, const BankSystem &bank);

struct RefineConfig {
  double lambda = 0.3;
  int outer_iters = 2;
  SinkhornConfig sinkhorn;
  double ridge = 1e-6;
  MetricMode metric = MetricMode::euclidean;
  // Seed each Sinkhorn solve with the previous column potential.
  bool warm_start = true;
  // Keep the previous plan when a truncated Sinkhorn solve would raise the
  // objective, so the trace never increases.
  bool descent_guard = true;
};

// Defaults for a metric: lambda 0.3 (euclidean) or 0.1 (cosine).
RefineConfig default_refine_config(MetricMode metric);

// W0 = F M^T (G + ridge term)^-1: ridge-stabilized least squares.
TransformMatrix init_transform(const QueryContext &query, const BankSystem &bank);
TransformMatrix init_transform(const Matrix &query, const Matrix &bank, double ridge);

// Closed-form minimizer of the W-subproblem with T fixed:
//   W = (F M^T + lambda T G)(G + ridge term)^-1, row i / (1 + lambda sum_j T_ij).
TransformMatrix update_transform(const QueryContext &query, const BankSystem &bank,
                                 const TransportPlan &plan, double lambda);
TransformMatrix update_transform(const Matrix &query, const Matrix &bank,
                                 const TransportPlan &plan, double lambda, double ridge);

struct ObjectiveTerms {
  double total = 0.0;
  double recon = 0.0;
  double ot = 0.0;
};

// Direct evaluation of recon(F, W M) + lambda * OT_eps(T; C(W M, M)).
// Euclidean recon is sum ||F_i - (WM)_i||^2; cosine recon sum (1 - cos)/2.
ObjectiveTerms objective_value(const Matrix &query, const Matrix &bank, const TransformMatrix &w,
                               const TransportPlan &plan, double lambda, double epsilon,
                               MetricMode metric);

struct StageTimes {
  double init_ms = 0.0;
  double sinkhorn_ms = 0.0;
  double update_ms = 0.0;
};

// With a ridge the W-step minimizes L(W, T) + rho * sum_i (1 + lambda r_i) ||W_i||^2,
// rho = ridge * tr(G)/n and r_i the row sums of T. Trace objectives include
// that penalty; it vanishes when ridge = 0.
struct TraceStep {
  double objective = 0.0;  // L(W_{l+1}, T_{l+1}) + ridge_penalty
  double recon = 0.0;
  double ot = 0.0;
  double ridge_penalty = 0.0;
  double transform_change = 0.0;  // ||W_{l+1} - W_l||_F
  int sinkhorn_iterations = 0;
  bool plan_accepted = true;
};

struct RefineTrace {
  double initial_objective = 0.0;  // L(W_0, T_1) + its ridge penalty
  std::vector<TraceStep> steps;    // one per outer iteration
  StageTimes times;
};

struct RefineResult {
  TransformMatrix transform;  // W*
  Vector refined_sq_norms;    // ||(W* M)_i||^2
  TransportPlan plan;
  double epsilon = 0.0;
  RefineTrace trace;
};

// Alternates T_{l+1} = Sinkhorn(C(W_l M, M)) and W_{l+1} = update_transform(T_{l+1})
// for outer_iters rounds from W_0. With auto epsilon, eps is fixed from the
// first cost matrix so every step minimizes the same objective.
RefineResult fastref_refine(const QueryContext &query, const BankSystem &bank,
                            const RefineConfig &config);
RefineResult fastref_refine(const FlatFeatures &query, const PrototypeBank &bank,
                            const RefineConfig &config);

// Refined prototypes W M, m x c.
Matrix refined_prototypes(const TransformMatrix &transform, const BankSystem &bank);

struct TttConfig {
  double lambda = 0.3;
  int fp_iters = 100;
  double fp_tol = 1e-8;
};

struct TttResult {
  Matrix refined;
  TransformMatrix transform;
  int iterations = 0;
  double residual = 0.0;
};

// Mean-alignment baseline: minimizes
//   sum_i ||F_i - W_i M||^2 + lambda ||mu_M - mean_i (W M)_i||^2
// by the row-parallel fixed point
//   W = [2m^2 F + 2 lambda m mu - 2 lambda (sum_r W_r M) + 2 lambda W M] M^T (G+ridge)^-1
//       / (2m^2 + 2 lambda)
// started from least squares. Throws NonConvergenceError past fp_iters.
TttResult ttt_refine(const QueryContext &query, const BankSystem &bank, const TttConfig &config);

}  // namespace fastref
