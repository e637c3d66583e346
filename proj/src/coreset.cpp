#include "fastref/coreset.hpp"

#include "fastref/error.hpp"
#include "fastref/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace fastref {

std::size_t coreset_target_size(std::size_t rows, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    fail(ErrorCode::invalid_input, "coreset ratio must lie in (0, 1]");
  }
  const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(rows)));
  return std::clamp<std::size_t>(target, 1, rows);
}

CoresetResult select_coreset(const FlatFeatures &features, const CoresetConfig &config,
                             MetricMode metric) {
  const std::size_t rows = features.rows();
  const std::size_t target = coreset_target_size(rows, config.ratio);

  Matrix points = to_matrix(features);
  if (metric == MetricMode::cosine) points = normalize_rows(points);

  std::size_t start = 0;
  if (config.start_rule == StartRule::seeded_random) {
    // mt19937_64 output is fully specified, so the start index is portable.
    std::mt19937_64 rng(config.seed);
    start = static_cast<std::size_t>(rng() % rows);
  }

  std::vector<std::size_t> selected;
  selected.reserve(target);
  std::vector<double> min_dist(rows, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(rows, false);

  std::size_t current = start;
  while (true) {
    selected.push_back(current);
    taken[current] = true;
    if (selected.size() == target) break;

    const auto anchor = points.row(static_cast<Eigen::Index>(current));
    std::size_t best = rows;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < rows; ++i) {
      if (taken[i]) continue;
      double d = 0.0;
      for (Eigen::Index k = 0; k < points.cols(); ++k) {
        const double diff = points(static_cast<Eigen::Index>(i), k) - anchor(k);
        d += diff * diff;
      }
      if (d < min_dist[i]) min_dist[i] = d;
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    current = best;
  }

  RowMatrixF bank(static_cast<Eigen::Index>(target), points.cols());
  for (std::size_t r = 0; r < target; ++r) {
    const auto src = static_cast<Eigen::Index>(selected[r]);
    if (metric == MetricMode::cosine) {
      bank.row(static_cast<Eigen::Index>(r)) = points.row(src).cast<float>();
    } else {
      bank.row(static_cast<Eigen::Index>(r)) = features.matrix().row(src);
    }
  }
  return {PrototypeBank(std::move(bank), metric), std::move(selected)};
}

}  // namespace fastref
