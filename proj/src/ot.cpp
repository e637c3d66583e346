#include "fastref/ot.hpp"

#include "fastref/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>

namespace fastref {

CostMetric cost_metric_for(MetricMode mode) {
  return mode == MetricMode::cosine ? CostMetric::cosine_dist : CostMetric::sq_euclidean;
}

CostMatrix::CostMatrix(Matrix values, CostMetric metric)
    : values_(std::move(values)), metric_(metric) {
  if (values_.size() == 0) fail(ErrorCode::invalid_input, "cost matrix is empty");
  if (!values_.allFinite()) fail(ErrorCode::non_finite, "cost matrix has non-finite entries");
  if (values_.minCoeff() < 0.0) fail(ErrorCode::invalid_input, "cost matrix has negative entries");
}

CostMatrix cost_matrix(const Matrix &a, const Matrix &b, CostMetric metric) {
  if (a.cols() != b.cols()) {
    fail(ErrorCode::invalid_input, "cost_matrix channel mismatch: " + std::to_string(a.cols()) +
                                       " vs " + std::to_string(b.cols()));
  }
  if (a.rows() == 0 || b.rows() == 0) fail(ErrorCode::invalid_input, "cost_matrix on empty set");

  Matrix c(a.rows(), b.rows());
  if (metric == CostMetric::sq_euclidean) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      c.col(j) = (a.rowwise() - b.row(j)).rowwise().squaredNorm();
    }
  } else {
    const Vector na = a.rowwise().norm();
    const Vector nb = b.rowwise().norm();
    if (na.minCoeff() <= 0.0 || nb.minCoeff() <= 0.0) {
      fail(ErrorCode::invalid_input, "cosine cost on a zero-norm row");
    }
    const Matrix dots = a * b.transpose();
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      for (Eigen::Index i = 0; i < c.rows(); ++i) {
        const double cosine = dots(i, j) / (na(i) * nb(j));
        c(i, j) = std::clamp(0.5 * (1.0 - cosine), 0.0, 1.0);
      }
    }
  }
  return CostMatrix(std::move(c), metric);
}

namespace {

// Order-preserving key of a non-negative double.
std::uint64_t order_key(double x) { return x > 0.0 ? std::bit_cast<std::uint64_t>(x) : 0; }

// Median of non-negative values: a histogram pass on the top 16 key bits
// narrows the search to the buckets holding the middle ranks.
double median_nonneg(std::span<const double> values) {
  const std::size_t size = values.size();
  const std::size_t hi_rank = size / 2;
  const std::size_t lo_rank = size % 2 == 0 ? hi_rank - 1 : hi_rank;

  std::vector<std::uint32_t> counts(std::size_t{1} << 16, 0);
  for (double x : values) ++counts[order_key(x) >> 48];
  std::size_t before = 0;
  std::size_t bucket = 0;
  while (before + counts[bucket] <= lo_rank) before += counts[bucket++];
  std::size_t last = bucket;
  std::size_t through = before + counts[bucket];
  while (through <= hi_rank) through += counts[++last];

  // Keys in [bucket, last] are exactly the values in [lower, upper).
  const double lower = bucket == 0 ? -1.0 : std::bit_cast<double>(std::uint64_t{bucket} << 48);
  const double upper = std::bit_cast<double>(std::uint64_t{last + 1} << 48);
  std::vector<double> candidates(through - before + 1);
  std::size_t kept = 0;
  for (double x : values) {
    candidates[kept] = x;
    kept += static_cast<std::size_t>((x >= lower) & (x < upper));
  }
  candidates.resize(kept);
  const auto nth = [&](std::size_t rank) {
    const auto it = candidates.begin() + static_cast<std::ptrdiff_t>(rank - before);
    std::nth_element(candidates.begin(), it, candidates.end());
    return *it;
  };
  const double hi = nth(hi_rank);
  return lo_rank == hi_rank ? hi : 0.5 * (hi + nth(lo_rank));
}

}  // namespace

double auto_epsilon(const CostMatrix &cost) {
  const Matrix &c = cost.values();
  const double median = median_nonneg({c.data(), static_cast<std::size_t>(c.size())});
  if (median > 0.0) return 0.05 * median;
  // More than half the costs are zero: fall back to the mean, then to 1.
  const double mean = c.mean();
  return mean > 0.0 ? 0.05 * mean : 1.0;
}

double resolve_epsilon(const CostMatrix &cost, const SinkhornConfig &config) {
  if (!config.epsilon) return auto_epsilon(cost);
  const double eps = *config.epsilon;
  if (!(eps > 0.0) || !std::isfinite(eps)) {
    fail(ErrorCode::invalid_input, "sinkhorn epsilon must be positive and finite");
  }
  return eps;
}

TransportPlan round_to_marginals(const TransportPlan &plan) {
  if (plan.size() == 0) fail(ErrorCode::invalid_input, "empty transport plan");
  if (!plan.allFinite() || plan.minCoeff() < 0.0) {
    fail(ErrorCode::invalid_input, "transport plan must be finite and >= 0");
  }
  const double row_target = 1.0 / static_cast<double>(plan.rows());
  const double col_target = 1.0 / static_cast<double>(plan.cols());
  // Y = diag(a) T diag(s); only its marginals are needed before forming it.
  const Eigen::ArrayXd rs = plan.rowwise().sum().array();
  const Eigen::ArrayXd a = (rs > row_target).select(row_target / rs, 1.0);
  const Eigen::ArrayXd cs = (plan.transpose() * a.matrix()).array();
  const Eigen::ArrayXd s = (cs > col_target).select(col_target / cs, 1.0);
  const Eigen::ArrayXd y_rows = a * (plan * s.matrix()).array();
  const Vector row_deficit = (row_target - y_rows).max(0.0).matrix();
  const Vector col_deficit = (col_target - cs * s).max(0.0).matrix();
  const double total = row_deficit.sum();

  TransportPlan out = a.matrix().asDiagonal() * plan * s.matrix().asDiagonal();
  if (total > 0.0) out.noalias() += row_deficit * (col_deficit.transpose() / total);
  return out;
}

double neg_entropy(const TransportPlan &plan) {
  // 0 * ln(min normal) is 0, so zero entries need no special case.
  const auto t = plan.array();
  return (t * t.max(std::numeric_limits<double>::min()).log()).sum();
}

double entropic_ot_value(const Matrix &cost, const TransportPlan &plan, double epsilon) {
  double linear = 0.0;
  double neg_entropy = 0.0;
  for (Eigen::Index j = 0; j < plan.cols(); ++j) {
    for (Eigen::Index i = 0; i < plan.rows(); ++i) {
      const double t = plan(i, j);
      linear += cost(i, j) * t;
      if (t > 0.0) neg_entropy += t * std::log(t);
    }
  }
  return linear + epsilon * neg_entropy;
}

namespace {

// Exact log-domain half-steps. Each returns the refreshed kernel
// K_ij = exp((f_i + g_j - C_ij) / eps) built from the same exponentials as
// the log-sum-exp, so the kernel has exact row (resp. column) marginals.
void log_row_update(const Matrix &cost, const Vector &g, double eps, double ln_a, Vector &f,
                    Eigen::ArrayXXd &kernel) {
  kernel = ((-cost).rowwise() + g.transpose()).array() / eps;
  const Eigen::ArrayXd mx = kernel.rowwise().maxCoeff();
  kernel.colwise() -= mx;
  kernel = kernel.exp();
  const Eigen::ArrayXd sums = kernel.rowwise().sum();
  f = (eps * (ln_a - mx - sums.log())).matrix();
  kernel.colwise() *= (sums * std::exp(-ln_a)).inverse();
}

void log_col_update(const Matrix &cost, const Vector &f, double eps, double ln_b, Vector &g,
                    Eigen::ArrayXXd &kernel) {
  kernel = ((-cost).colwise() + f).array() / eps;
  const Eigen::ArrayXd mx = kernel.colwise().maxCoeff().transpose();
  kernel.rowwise() -= mx.transpose();
  kernel = kernel.exp();
  const Eigen::ArrayXd sums = kernel.colwise().sum().transpose();
  g = (eps * (ln_b - mx - sums.log())).matrix();
  kernel.rowwise() *= (sums * std::exp(-ln_b)).inverse().transpose();
}

// Scalings beyond e^{+-kAbsorb} are folded back into the log potentials.
constexpr double kAbsorb = 50.0;
constexpr double kTiny = 1e-250;

}  // namespace

SinkhornResult sinkhorn(const CostMatrix &cost, const SinkhornConfig &config,
                        const DualPotentials *warm_start) {
  if (config.max_inner_iters < 1) fail(ErrorCode::invalid_input, "max_inner_iters must be >= 1");
  const Matrix &c = cost.values();
  const Eigen::Index m = c.rows();
  const Eigen::Index n = c.cols();
  const double eps = resolve_epsilon(cost, config);
  if (!std::isfinite(c.maxCoeff() / eps)) {
    fail(ErrorCode::degenerate_kernel, "C / eps overflows; epsilon too small");
  }

  const double ln_a = -std::log(static_cast<double>(m));
  const double ln_b = -std::log(static_cast<double>(n));
  const double row_target = 1.0 / static_cast<double>(m);
  const double col_target = 1.0 / static_cast<double>(n);

  SinkhornResult result;
  result.epsilon = eps;
  Vector f = Vector::Zero(m);
  Vector g(n);
  if (warm_start != nullptr && warm_start->f.size() == m && warm_start->f.allFinite()) {
    f = warm_start->f;
  }

  // Log-stabilized scaling: the plan is diag(u) K diag(v) with the large
  // dynamic range kept in (f, g); u and v stay near 1 and are absorbed
  // whenever they drift, so no kernel row or column underflows as a whole.
  // Each sweep is a column then a row normalization, so the returned plan
  // carries every query row's mass exactly.
  Eigen::ArrayXXd kernel(m, n);
  log_col_update(c, f, eps, ln_b, g, kernel);
  Eigen::ArrayXd u = Eigen::ArrayXd::Ones(m);
  Eigen::ArrayXd v = Eigen::ArrayXd::Ones(n);

  for (int it = 0; it < config.max_inner_iters; ++it) {
    const Eigen::ArrayXd kv = (kernel.matrix() * v.matrix()).array();
    if (!(kv.minCoeff() > kTiny) || !kv.allFinite()) {
      g.array() += eps * v.log();
      log_row_update(c, g, eps, ln_a, f, kernel);
      u.setOnes();
      v.setOnes();
    } else {
      u = row_target / kv;
    }

    const Eigen::ArrayXd ktu = (kernel.matrix().transpose() * u.matrix()).array();
    const Eigen::ArrayXd err = (v * ktu - col_target).abs();
    result.residual_history.push_back(err.sum());
    result.iterations = it + 1;
    if (!(err.maxCoeff() > config.marginal_tol) || it + 1 == config.max_inner_iters) break;

    if (!(ktu.minCoeff() > kTiny) || !ktu.allFinite()) {
      f.array() += eps * u.log();
      log_col_update(c, f, eps, ln_b, g, kernel);
      u.setOnes();
      v.setOnes();
      continue;
    }
    v = col_target / ktu;
    if (u.log().abs().maxCoeff() > kAbsorb || v.log().abs().maxCoeff() > kAbsorb) {
      // Absorbing v is exactly the log-domain column update.
      f.array() += eps * u.log();
      log_col_update(c, f, eps, ln_b, g, kernel);
      u.setOnes();
      v.setOnes();
    }
  }

  f.array() += eps * u.log();
  g.array() += eps * v.log();
  Matrix plan = (kernel.colwise() * u).rowwise() * v.transpose();
  const Vector rs = plan.rowwise().sum();
  const Vector cs = plan.colwise().sum().transpose();
  if (!plan.allFinite() || !f.allFinite() || !g.allFinite() || !(rs.minCoeff() > 0.0) ||
      !(cs.minCoeff() > 0.0)) {
    fail(ErrorCode::degenerate_kernel, "kernel underflows an entire row or column");
  }

  result.transport_cost = (plan.array() * c.array()).sum();
  // sum T ln T = sum T_ij (f_i + g_j - C_ij) / eps, exact even where T underflows.
  const double neg_entropy = (rs.dot(f) + cs.dot(g) - result.transport_cost) / eps;
  result.ot_value = result.transport_cost + eps * neg_entropy;
  result.row_residual = (rs.array() - row_target).abs().maxCoeff();
  result.col_residual = (cs.array() - col_target).abs().maxCoeff();
  result.plan = std::move(plan);
  result.potentials = {std::move(f), std::move(g)};
  return result;
}

namespace {

// Flows on a spanning tree of K_{m,n} meeting uniform marginals; nullopt if
// any flow is negative.
std::optional<Matrix> solve_tree(int m, int n, unsigned edges) {
  const int nodes = m + n;
  std::vector<double> supply(static_cast<std::size_t>(nodes));
  for (int i = 0; i < m; ++i) supply[static_cast<std::size_t>(i)] = 1.0 / m;
  for (int j = 0; j < n; ++j) supply[static_cast<std::size_t>(m + j)] = 1.0 / n;

  Matrix flow = Matrix::Zero(m, n);
  unsigned remaining = edges;
  std::vector<int> degree(static_cast<std::size_t>(nodes), 0);
  for (int e = 0; e < m * n; ++e) {
    if (remaining & (1u << e)) {
      ++degree[static_cast<std::size_t>(e / n)];
      ++degree[static_cast<std::size_t>(m + e % n)];
    }
  }
  while (remaining != 0) {
    bool progressed = false;
    for (int e = 0; e < m * n && !progressed; ++e) {
      if (!(remaining & (1u << e))) continue;
      const int r = e / n;
      const int col = m + e % n;
      int leaf = -1, other = -1;
      if (degree[static_cast<std::size_t>(r)] == 1) {
        leaf = r;
        other = col;
      } else if (degree[static_cast<std::size_t>(col)] == 1) {
        leaf = col;
        other = r;
      }
      if (leaf < 0) continue;
      const double amount = supply[static_cast<std::size_t>(leaf)];
      if (amount < -1e-12) return std::nullopt;
      flow(r, e % n) = std::max(amount, 0.0);
      supply[static_cast<std::size_t>(leaf)] = 0.0;
      supply[static_cast<std::size_t>(other)] -= amount;
      --degree[static_cast<std::size_t>(r)];
      --degree[static_cast<std::size_t>(col)];
      remaining &= ~(1u << e);
      progressed = true;
    }
    if (!progressed) return std::nullopt;
  }
  return flow;
}

bool is_spanning_tree(int m, int n, unsigned edges) {
  std::vector<int> parent(static_cast<std::size_t>(m + n));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      x = parent[static_cast<std::size_t>(x)] =
          parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    }
    return x;
  };
  for (int e = 0; e < m * n; ++e) {
    if (!(edges & (1u << e))) continue;
    const int a = find(e / n);
    const int b = find(m + e % n);
    if (a == b) return false;
    parent[static_cast<std::size_t>(a)] = b;
  }
  return true;
}

}  // namespace

ExactOtResult exact_ot_small(const CostMatrix &cost) {
  const int m = static_cast<int>(cost.rows());
  const int n = static_cast<int>(cost.cols());
  if (m > 4 || n > 4) {
    fail(ErrorCode::unsupported_size, "exact_ot_small supports at most 4 x 4");
  }
  const int basis = m + n - 1;
  ExactOtResult best;
  best.value = std::numeric_limits<double>::infinity();
  for (unsigned mask = 0; mask < (1u << (m * n)); ++mask) {
    if (std::popcount(mask) != basis || !is_spanning_tree(m, n, mask)) continue;
    auto flow = solve_tree(m, n, mask);
    if (!flow) continue;
    const double value = (flow->array() * cost.values().array()).sum();
    if (value < best.value) {
      best.value = value;
      best.plan = std::move(*flow);
    }
  }
  return best;
}

}  // namespace fastref
