#include "fastref/scoring.hpp"

#include "fastref/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace fastref {

ScoreMap::ScoreMap(std::size_t height, std::size_t width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (height == 0 || width == 0) fail(ErrorCode::invalid_input, "score map dims must be positive");
  if (values_.size() != height * width) {
    fail(ErrorCode::invalid_input, "score map has " + std::to_string(values_.size()) +
                                       " values for a " + std::to_string(height) + " x " +
                                       std::to_string(width) + " grid");
  }
  for (double v : values_) {
    if (!std::isfinite(v) || v < 0.0) {
      fail(ErrorCode::invalid_input, "score map values must be finite and >= 0");
    }
  }
}

namespace {

constexpr Eigen::Index kScoreBlock = 128;

// Row minima over k of dis(f_j, r_k), where a_j . b_k = f_j . r_k.
//
// Distances are written d_jk = alpha_k + beta_j - gamma_j delta_k (a_j . b_k).
// Blocks of products are formed in single precision, whose error is at most
// (d + 2) u |a_j| |b_k|; every entry that could be the row minimum under that
// bound is then re-evaluated in double, so the result is the double-precision
// minimum.
std::vector<double> min_distances(const Matrix &a, const Matrix &b, const Vector &query_sq,
                                  const Vector &refined_sq, MetricMode metric) {
  const Eigen::Index m = a.rows();
  const Eigen::Index k = b.rows();
  Eigen::ArrayXd alpha(k), delta(k), beta(m), gamma(m);
  if (metric == MetricMode::euclidean) {
    alpha = refined_sq.array();
    delta.setOnes();
    beta = query_sq.array();
    gamma.setConstant(2.0);
  } else {
    const Eigen::ArrayXd rn = refined_sq.array().sqrt();
    alpha.setConstant(0.5);
    delta = (rn > 0.0).select(rn.inverse(), 0.0);
    beta.setZero();
    gamma = 0.5 / query_sq.array().sqrt();
  }

  const double unit = 1.01 * static_cast<double>(a.cols() + 2) * std::ldexp(1.0, -24);
  const double col_scale = (delta * b.rowwise().norm().array()).maxCoeff();
  const double offset_scale = alpha.abs().maxCoeff() + beta.abs().maxCoeff();
  const Eigen::ArrayXd slack =
      unit * gamma * a.rowwise().norm().array() * col_scale + 1e-12 * offset_scale;

  const Eigen::MatrixXf a_single = a.cast<float>();
  const Eigen::MatrixXf b_single = b.cast<float>();

  Eigen::ArrayXd best = Eigen::ArrayXd::Constant(m, std::numeric_limits<double>::infinity());
  Eigen::ArrayXd block_min(m);
  Eigen::MatrixXf dots(m, std::min(kScoreBlock, k));
  for (Eigen::Index r0 = 0; r0 < k; r0 += kScoreBlock) {
    const Eigen::Index count = std::min(kScoreBlock, k - r0);
    dots.leftCols(count).noalias() = a_single * b_single.middleRows(r0, count).transpose();
    block_min.setConstant(std::numeric_limits<double>::infinity());
    for (Eigen::Index r = 0; r < count; ++r) {
      block_min = block_min.min(alpha(r0 + r) -
                                delta(r0 + r) * (gamma * dots.col(r).cast<double>().array()));
    }
    block_min += beta;

    for (Eigen::Index j = 0; j < m; ++j) {
      if (!(block_min(j) - slack(j) < best(j))) continue;
      const double limit = block_min(j) + 2.0 * slack(j);
      for (Eigen::Index r = 0; r < count; ++r) {
        const Eigen::Index c = r0 + r;
        const double approx = alpha(c) - delta(c) * (gamma(j) * dots(j, r)) + beta(j);
        if (approx > limit) continue;
        const double exact =
            alpha(c) - delta(c) * (gamma(j) * a.row(j).dot(b.row(c))) + beta(j);
        best(j) = std::min(best(j), exact);
      }
    }
  }
  best = best.max(0.0);
  if (metric == MetricMode::cosine) best = best.min(1.0);
  return {best.data(), best.data() + m};
}

void check_query_norms(const Vector &query_sq, MetricMode metric) {
  if (metric == MetricMode::cosine && query_sq.size() > 0 && !(query_sq.minCoeff() > 0.0)) {
    fail(ErrorCode::invalid_input, "cosine scoring of a zero-norm query row");
  }
}

}  // namespace

ScoreMap score_map(const Matrix &query, const Matrix &refined, MetricMode metric,
                   std::size_t height, std::size_t width) {
  if (static_cast<std::size_t>(query.rows()) != height * width) {
    fail(ErrorCode::invalid_input, "query rows do not match the " + std::to_string(height) +
                                       " x " + std::to_string(width) + " grid");
  }
  if (query.cols() != refined.cols()) {
    fail(ErrorCode::invalid_input, "query and refined bank channel mismatch");
  }
  if (refined.rows() == 0) fail(ErrorCode::invalid_input, "empty refined bank");
  const Vector query_sq = row_squared_norms(query);
  check_query_norms(query_sq, metric);
  return ScoreMap(height, width,
                  min_distances(query, refined, query_sq, refined.rowwise().squaredNorm(), metric));
}

ScoreMap score_map(const FlatFeatures &query, const Matrix &refined, MetricMode metric,
                   std::size_t height, std::size_t width) {
  return score_map(to_matrix(query), refined, metric, height, width);
}

std::vector<double> patch_scores_factored(const Matrix &cross, const Vector &query_sq_norms,
                                          const Matrix &transform, const Vector &refined_sq_norms,
                                          MetricMode metric) {
  if (cross.cols() != transform.cols() || refined_sq_norms.size() != transform.rows() ||
      query_sq_norms.size() != cross.rows()) {
    fail(ErrorCode::invalid_input, "patch_scores_factored shape mismatch");
  }
  if (transform.rows() == 0) fail(ErrorCode::invalid_input, "empty refined bank");
  check_query_norms(query_sq_norms, metric);
  return min_distances(cross, transform, query_sq_norms, refined_sq_norms, metric);
}

std::vector<double> patch_scores_factored(const Matrix &cross, const Vector &query_sq_norms,
                                          const Matrix &transform, MetricMode metric,
                                          const Matrix &gram) {
  const Matrix wg = transform * gram;
  const Vector refined_sq = (wg.array() * transform.array()).rowwise().sum().max(0.0).matrix();
  return patch_scores_factored(cross, query_sq_norms, transform, refined_sq, metric);
}

double image_score(const ScoreMap &map) {
  return *std::max_element(map.values().begin(), map.values().end());
}

ScoreMap upsample_bilinear(const ScoreMap &map, std::size_t target_h, std::size_t target_w) {
  if (target_h == 0 || target_w == 0) {
    fail(ErrorCode::invalid_input, "upsample target dims must be positive");
  }
  if (target_h < map.height() || target_w < map.width()) {
    fail(ErrorCode::invalid_input, "upsample target is smaller than the source map");
  }
  const std::size_t h = map.height();
  const std::size_t w = map.width();
  auto source_coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    if (dst == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
  };

  std::vector<double> out(target_h * target_w);
  for (std::size_t y = 0; y < target_h; ++y) {
    const double sy = source_coord(y, h, target_h);
    const auto y0 = std::min(static_cast<std::size_t>(sy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_w; ++x) {
      const double sx = source_coord(x, w, target_w);
      const auto x0 = std::min(static_cast<std::size_t>(sx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = sx - static_cast<double>(x0);
      const double top = (1.0 - wx) * map.at(y0, x0) + wx * map.at(y0, x1);
      const double bottom = (1.0 - wx) * map.at(y1, x0) + wx * map.at(y1, x1);
      out[y * target_w + x] = (1.0 - wy) * top + wy * bottom;
    }
  }
  return ScoreMap(target_h, target_w, std::move(out));
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    fail(ErrorCode::invalid_input, "gaussian sigma must be positive");
  }
  const auto radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    const double v = std::exp(-static_cast<double>(k * k) / (2.0 * sigma * sigma));
    kernel[static_cast<std::size_t>(k + radius)] = v;
    total += v;
  }
  for (auto &v : kernel) v /= total;
  return kernel;
}

namespace {

// Half-sample symmetric reflection: ... c b a | a b c ... | c b a ...
std::size_t reflect(long i, long n) {
  const long period = 2 * n;
  long r = i % period;
  if (r < 0) r += period;
  return static_cast<std::size_t>(r < n ? r : period - 1 - r);
}

}  // namespace

ScoreMap gaussian_smooth(const ScoreMap &map, double sigma) {
  const auto kernel = gaussian_kernel(sigma);
  const long radius = static_cast<long>(kernel.size() / 2);
  const long h = static_cast<long>(map.height());
  const long w = static_cast<long>(map.width());

  std::vector<double> tmp(map.values().size());
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] *
               map.at(static_cast<std::size_t>(y), reflect(x + k, w));
      }
      tmp[static_cast<std::size_t>(y * w + x)] = acc;
    }
  }
  std::vector<double> out(tmp.size());
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] *
               tmp[reflect(y + k, h) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)];
      }
      out[static_cast<std::size_t>(y * w + x)] = std::max(acc, 0.0);
    }
  }
  return ScoreMap(map.height(), map.width(), std::move(out));
}

double combine_zero_shot(double s_zero, const ScoreMap &map) {
  if (!(s_zero >= 0.0 && s_zero <= 1.0)) {
    fail(ErrorCode::invalid_input, "zero-shot score must lie in [0, 1]");
  }
  const double peak = image_score(map);
  if (peak > 1.0) fail(ErrorCode::invalid_input, "score map exceeds 1; zero-shot fusion needs cosine scores");
  return 0.5 * (s_zero + peak);
}

ScoreMap pixel_map(const ScoreMap &patch_map, std::size_t image_h, std::size_t image_w,
                   double sigma) {
  return gaussian_smooth(upsample_bilinear(patch_map, image_h, image_w), sigma);
}

}  // namespace fastref
