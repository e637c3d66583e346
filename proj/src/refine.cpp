#include "fastref/refine.hpp"

#include "fastref/error.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <string>

namespace fastref {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

Matrix prepare(const Matrix &m, MetricMode metric) {
  return metric == MetricMode::cosine ? normalize_rows(m) : m;
}

// W G and the squared norms of the refined rows, ||(W M)_i||^2 = (W G W^T)_ii.
struct RefinedGeometry {
  Matrix wg;
  Vector sq_norms;
};

// For W0 = (F M^T) Ginv, W0 G = F M^T - ridge_shift * W0 because
// Ginv G = I - ridge_shift * Ginv.
RefinedGeometry initial_geometry(const QueryContext &query, const TransformMatrix &w0,
                                 const BankSystem &bank) {
  RefinedGeometry geo;
  geo.wg = query.cross - bank.ridge_shift() * w0;
  geo.sq_norms = (geo.wg.array() * w0.array()).rowwise().sum().max(0.0).matrix();
  return geo;
}

double cosine_cost(double dot, double norm_a, double norm_b) {
  if (!(norm_a > 0.0) || !(norm_b > 0.0)) return 0.5;
  return std::clamp(0.5 * (1.0 - dot / (norm_a * norm_b)), 0.0, 1.0);
}

// C(W M, M) from W G without forming W M.
CostMatrix factored_cost(const RefinedGeometry &geo, const BankSystem &bank) {
  const Eigen::Index m = geo.wg.rows();
  const Eigen::Index n = geo.wg.cols();
  Matrix c(m, n);
  if (bank.metric() == MetricMode::euclidean) {
    const Vector &bank_sq = bank.bank_sq_norms();
    for (Eigen::Index j = 0; j < n; ++j) {
      c.col(j) = (geo.sq_norms.array() - 2.0 * geo.wg.col(j).array() + bank_sq(j)).max(0.0);
    }
  } else {
    // A zero-norm row gets inverse norm 0 and hence cost 1/2.
    const auto inverse_norms = [](const Vector &sq) {
      const Eigen::ArrayXd norms = sq.array().sqrt();
      return Eigen::ArrayXd((norms > 0.0).select(norms.inverse(), 0.0));
    };
    const Eigen::ArrayXd inv_r = inverse_norms(geo.sq_norms);
    const Eigen::ArrayXd inv_b = inverse_norms(bank.bank_sq_norms());
    for (Eigen::Index j = 0; j < n; ++j) {
      c.col(j) = (0.5 - (0.5 * inv_b(j)) * (geo.wg.col(j).array() * inv_r)).max(0.0).min(1.0);
    }
  }
  return CostMatrix(std::move(c), cost_metric_for(bank.metric()));
}

double factored_recon(const QueryContext &query, const TransformMatrix &w,
                      const RefinedGeometry &geo, MetricMode metric) {
  const Vector dots = (query.cross.array() * w.array()).rowwise().sum().matrix();
  if (metric == MetricMode::euclidean) {
    return std::max(0.0, query.sq_norms.sum() - 2.0 * dots.sum() + geo.sq_norms.sum());
  }
  double recon = 0.0;
  for (Eigen::Index i = 0; i < dots.size(); ++i) {
    recon += cosine_cost(dots(i), std::sqrt(query.sq_norms(i)), std::sqrt(geo.sq_norms(i)));
  }
  return recon;
}

double ridge_penalty(const TransformMatrix &w, const TransportPlan &plan, double lambda,
                     const BankSystem &bank) {
  if (bank.ridge_shift() == 0.0) return 0.0;
  const Eigen::ArrayXd weights = 1.0 + lambda * plan.rowwise().sum().array();
  return bank.ridge_shift() * (weights * w.rowwise().squaredNorm().array()).sum();
}

void check_plan_shape(const TransportPlan &plan, Eigen::Index m, Eigen::Index n) {
  if (plan.rows() != m || plan.cols() != n) {
    fail(ErrorCode::invalid_input, "transport plan must be " + std::to_string(m) + " x " +
                                       std::to_string(n));
  }
}

}  // namespace

BankSystem::BankSystem(Matrix bank, double ridge, MetricMode metric)
    : bank_(prepare(bank, metric)), metric_(metric), ridge_(ridge) {
  if (bank_.rows() == 0 || bank_.cols() == 0) fail(ErrorCode::invalid_input, "empty bank");
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) {
    fail(ErrorCode::invalid_input, "ridge must be finite and >= 0");
  }
  const auto n = bank_.rows();
  gram_.noalias() = bank_ * bank_.transpose();
  bank_sq_norms_ = gram_.diagonal();
  ridge_shift_ = ridge * gram_.trace() / static_cast<double>(n);

  Matrix shifted = gram_;
  shifted.diagonal().array() += ridge_shift_;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(shifted);
  if (eig.info() != Eigen::Success) {
    fail(ErrorCode::singular_matrix, "Gram eigendecomposition failed");
  }
  const Vector &values = eig.eigenvalues();
  const double largest = std::max(values.maxCoeff(), 0.0);
  if (!(values.minCoeff() > 1e-12 * largest) || !(largest > 0.0)) {
    fail(ErrorCode::singular_matrix,
         "prototype Gram matrix is singular; use a positive ridge");
  }
  gram_inverse_ = eig.eigenvectors() * values.cwiseInverse().asDiagonal() *
                  eig.eigenvectors().transpose();
  projection_pair_.resize(n, 2 * n);
  projection_pair_.leftCols(n).noalias() = gram_ * gram_inverse_;
  projection_pair_.rightCols(n).noalias() = projection_pair_.leftCols(n) * gram_;
}

BankSystem::BankSystem(const PrototypeBank &bank, double ridge)
    : BankSystem(to_matrix(bank), ridge, bank.metric()) {}

QueryContext make_query_context(const Matrix &query, const BankSystem &bank) {
  if (query.cols() != bank.channels()) {
    fail(ErrorCode::invalid_input, "query has " + std::to_string(query.cols()) +
                                       " channels, bank has " + std::to_string(bank.channels()));
  }
  if (query.rows() == 0) fail(ErrorCode::invalid_input, "empty query");
  QueryContext ctx;
  ctx.cross.noalias() = query * bank.bank().transpose();
  ctx.sq_norms = row_squared_norms(query);
  if (bank.metric() == MetricMode::cosine) {
    // Unit rows: scale F M^T instead of normalizing F.
    for (Eigen::Index i = 0; i < ctx.sq_norms.size(); ++i) {
      if (!(ctx.sq_norms(i) > 0.0)) {
        fail(ErrorCode::invalid_input, "query row " + std::to_string(i) + " has zero norm");
      }
    }
    ctx.cross = ctx.sq_norms.cwiseSqrt().cwiseInverse().asDiagonal() * ctx.cross;
    ctx.sq_norms.setOnes();
  }
  return ctx;
}

RefineConfig default_refine_config(MetricMode metric) {
  RefineConfig config;
  config.metric = metric;
  config.lambda = metric == MetricMode::cosine ? 0.1 : 0.3;
  return config;
}

TransformMatrix init_transform(const QueryContext &query, const BankSystem &bank) {
  return query.cross * bank.gram_inverse();
}

TransformMatrix init_transform(const Matrix &query, const Matrix &bank, double ridge) {
  const BankSystem system(bank, ridge, MetricMode::euclidean);
  return init_transform(make_query_context(query, system), system);
}

TransformMatrix update_transform(const QueryContext &query, const BankSystem &bank,
                                 const TransportPlan &plan, double lambda) {
  check_plan_shape(plan, query.cross.rows(), bank.count());
  if (!(lambda >= 0.0)) fail(ErrorCode::invalid_input, "lambda must be >= 0");
  Matrix rhs = query.cross;
  if (lambda > 0.0) rhs.noalias() += lambda * (plan * bank.gram());
  TransformMatrix w = rhs * bank.gram_inverse();
  const Vector scale = (1.0 + lambda * plan.rowwise().sum().array()).inverse().matrix();
  return scale.asDiagonal() * w;
}

TransformMatrix update_transform(const Matrix &query, const Matrix &bank,
                                 const TransportPlan &plan, double lambda, double ridge) {
  const BankSystem system(bank, ridge, MetricMode::euclidean);
  return update_transform(make_query_context(query, system), system, plan, lambda);
}

ObjectiveTerms objective_value(const Matrix &query, const Matrix &bank, const TransformMatrix &w,
                               const TransportPlan &plan, double lambda, double epsilon,
                               MetricMode metric) {
  if (query.cols() != bank.cols() || w.rows() != query.rows() || w.cols() != bank.rows()) {
    fail(ErrorCode::invalid_input, "objective_value shape mismatch");
  }
  check_plan_shape(plan, query.rows(), bank.rows());
  const Matrix refined = w * bank;

  ObjectiveTerms terms;
  Matrix cost(query.rows(), bank.rows());
  if (metric == MetricMode::euclidean) {
    terms.recon = (query - refined).squaredNorm();
    cost = cost_matrix(refined, bank, CostMetric::sq_euclidean).values();
  } else {
    for (Eigen::Index i = 0; i < query.rows(); ++i) {
      terms.recon += cosine_cost(query.row(i).dot(refined.row(i)), query.row(i).norm(),
                                 refined.row(i).norm());
      for (Eigen::Index j = 0; j < bank.rows(); ++j) {
        cost(i, j) = cosine_cost(refined.row(i).dot(bank.row(j)), refined.row(i).norm(),
                                 bank.row(j).norm());
      }
    }
  }
  terms.ot = entropic_ot_value(cost, plan, epsilon);
  terms.total = terms.recon + lambda * terms.ot;
  return terms;
}

RefineResult fastref_refine(const QueryContext &query, const BankSystem &bank,
                            const RefineConfig &config) {
  if (!(config.lambda >= 0.0)) fail(ErrorCode::invalid_input, "lambda must be >= 0");
  if (config.outer_iters < 1) fail(ErrorCode::invalid_input, "outer_iters must be >= 1");
  if (config.metric != bank.metric()) {
    fail(ErrorCode::invalid_input, "refine metric does not match the bank system metric");
  }
  const Eigen::Index n = bank.count();
  const double lambda = config.lambda;

  RefineResult result;
  auto &trace = result.trace;

  // W_{l+1} = D (W0 + lambda T G Ginv) and W_{l+1} G = D (W0 G + lambda T G Ginv G),
  // so each step costs one m x n x 2n product.
  auto t0 = Clock::now();
  const TransformMatrix w0 = init_transform(query, bank);
  const RefinedGeometry geo0 = initial_geometry(query, w0, bank);
  trace.times.init_ms += elapsed_ms(t0);

  t0 = Clock::now();
  CostMatrix cost = factored_cost(geo0, bank);
  SinkhornConfig sinkhorn_config = config.sinkhorn;
  if (!sinkhorn_config.epsilon) sinkhorn_config.epsilon = auto_epsilon(cost);
  const double eps = *sinkhorn_config.epsilon;
  trace.times.sinkhorn_ms += elapsed_ms(t0);

  TransformMatrix w;
  RefinedGeometry geo;
  DualPotentials potentials;
  TransportPlan plan;
  Matrix projected;
  for (int l = 0; l < config.outer_iters; ++l) {
    t0 = Clock::now();
    SinkhornResult ot =
        sinkhorn(cost, sinkhorn_config, config.warm_start && l > 0 ? &potentials : nullptr);
    potentials = std::move(ot.potentials);
    TransportPlan candidate = round_to_marginals(ot.plan);
    const double entropy_term = eps * neg_entropy(candidate);
    const double candidate_ot =
        (candidate.array() * cost.values().array()).sum() + entropy_term;
    trace.times.sinkhorn_ms += elapsed_ms(t0);

    if (l == 0) {
      trace.initial_objective = factored_recon(query, w0, geo0, config.metric) +
                                lambda * candidate_ot + ridge_penalty(w0, candidate, lambda, bank);
    } else if (config.descent_guard && !(candidate_ot <= trace.steps.back().ot)) {
      // The truncated solve did not improve on T_l for this cost; keep (W_l, T_l).
      TraceStep step = trace.steps.back();
      step.transform_change = 0.0;
      step.sinkhorn_iterations = ot.iterations;
      step.plan_accepted = false;
      trace.steps.push_back(step);
      continue;
    }
    plan = std::move(candidate);

    t0 = Clock::now();
    const Vector scale = (1.0 + lambda * plan.rowwise().sum().array()).inverse().matrix();
    projected.noalias() = plan * bank.projection_pair();
    TransformMatrix next = scale.asDiagonal() * (w0 + lambda * projected.leftCols(n));
    geo.wg.noalias() = scale.asDiagonal() * (geo0.wg + lambda * projected.rightCols(n));
    geo.sq_norms = (geo.wg.array() * next.array()).rowwise().sum().max(0.0).matrix();
    trace.times.update_ms += elapsed_ms(t0);

    t0 = Clock::now();
    cost = factored_cost(geo, bank);
    trace.times.sinkhorn_ms += elapsed_ms(t0);

    TraceStep step;
    step.recon = factored_recon(query, next, geo, config.metric);
    step.ot = (plan.array() * cost.values().array()).sum() + entropy_term;
    step.ridge_penalty = ridge_penalty(next, plan, lambda, bank);
    step.objective = step.recon + lambda * step.ot + step.ridge_penalty;
    step.transform_change = (next - (l == 0 ? w0 : w)).norm();
    step.sinkhorn_iterations = ot.iterations;
    trace.steps.push_back(step);
    w = std::move(next);
  }

  result.epsilon = eps;
  result.refined_sq_norms = std::move(geo.sq_norms);
  result.transform = std::move(w);
  result.plan = std::move(plan);
  return result;
}

Matrix refined_prototypes(const TransformMatrix &transform, const BankSystem &bank) {
  if (transform.cols() != bank.count()) {
    fail(ErrorCode::invalid_input, "transform columns do not match the bank size");
  }
  return transform * bank.bank();
}

RefineResult fastref_refine(const FlatFeatures &query, const PrototypeBank &bank,
                            const RefineConfig &config) {
  const BankSystem system(to_matrix(bank), config.ridge, config.metric);
  return fastref_refine(make_query_context(to_matrix(query), system), system, config);
}

TttResult ttt_refine(const QueryContext &query, const BankSystem &bank, const TttConfig &config) {
  if (!(config.lambda >= 0.0)) fail(ErrorCode::invalid_input, "lambda must be >= 0");
  if (config.fp_iters < 1) fail(ErrorCode::invalid_input, "fp_iters must be >= 1");
  const Eigen::Index m = query.cross.rows();
  const double md = static_cast<double>(m);
  const double lambda = config.lambda;

  // mu_M M^T is the mean row of G; (sum_r W_r M) M^T = 1^T W G.
  const Vector mu_g = bank.gram().colwise().mean().transpose();
  const Matrix fixed_part = 2.0 * md * md * query.cross +
                            (2.0 * lambda * md * mu_g.transpose()).replicate(m, 1);
  const double denom = 2.0 * md * md + 2.0 * lambda;

  TttResult result;
  TransformMatrix w = init_transform(query, bank);
  double residual = std::numeric_limits<double>::infinity();
  for (int it = 0; it < config.fp_iters; ++it) {
    const Matrix wg = w * bank.gram();
    const Vector sum_wg = wg.colwise().sum().transpose();
    Matrix rhs = fixed_part + 2.0 * lambda * wg;
    rhs.rowwise() -= 2.0 * lambda * sum_wg.transpose();
    TransformMatrix next = (rhs * bank.gram_inverse()) / denom;
    residual = (next - w).norm();
    w = std::move(next);
    result.iterations = it + 1;
    if (residual <= config.fp_tol) break;
  }
  if (!(residual <= config.fp_tol)) {
    throw NonConvergenceError("ttt fixed point did not converge, residual " +
                                  std::to_string(residual),
                              residual);
  }
  result.residual = residual;
  result.refined = refined_prototypes(w, bank);
  result.transform = std::move(w);
  return result;
}

}  // namespace fastref
