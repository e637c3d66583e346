#pragma once

#include "fastref/linalg.hpp"
#include "fastref/tensor_io.hpp"

#include <cstddef>
#include <vector>

namespace fastref {

// Row-major grid of non-negative anomaly scores.
class ScoreMap {
 public:
  ScoreMap(std::size_t height, std::size_t width, std::vector<double> values);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  const std::vector<double> &values() const noexcept { return values_; }
  double at(std::size_t y, std::size_t x) const { return values_[y * width_ + x]; }

 private:
  std::size_t height_;
  std::size_t width_;
  std::vector<double> values_;
};

// s_j = min_r dis(f_j, r) over the rows r of `refined`, reshaped to h x w.
// Euclidean dis = ||.||^2, cosine dis = (1 - cos) / 2.
ScoreMap score_map(const Matrix &query, const Matrix &refined, MetricMode metric,
                   std::size_t height, std::size_t width);
ScoreMap score_map(const FlatFeatures &query, const Matrix &refined, MetricMode metric,
                   std::size_t height, std::size_t width);

// Same scores for refined = W M, computed from F M^T, ||F_j||^2, W and the
// refined squared norms without forming W M (m*n*m work instead of m*c*m).
std::vector<double> patch_scores_factored(const Matrix &cross, const Vector &query_sq_norms,
                                          const Matrix &transform, const Vector &refined_sq_norms,
                                          MetricMode metric);
// As above, with the refined norms taken from G = M M^T.
std::vector<double> patch_scores_factored(const Matrix &cross, const Vector &query_sq_norms,
                                          const Matrix &transform, MetricMode metric,
                                          const Matrix &gram);

double image_score(const ScoreMap &map);

// Corner-aligned bilinear resampling to target_h x target_w.
ScoreMap upsample_bilinear(const ScoreMap &map, std::size_t target_h, std::size_t target_w);

std::vector<double> gaussian_kernel(double sigma);

// Separable Gaussian blur, radius ceil(3 sigma), reflect (half-sample
// symmetric) borders.
ScoreMap gaussian_smooth(const ScoreMap &map, double sigma);

// (s0 + max_j s_j) / 2; s0 and the map must lie in [0, 1].
double combine_zero_shot(double s_zero, const ScoreMap &map);

// Pixel-level output: upsample to the image size, then smooth.
ScoreMap pixel_map(const ScoreMap &patch_map, std::size_t image_h, std::size_t image_w,
                   double sigma);

}  // namespace fastref
