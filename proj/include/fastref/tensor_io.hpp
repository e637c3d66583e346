#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

namespace fastref {

enum class MetricMode { euclidean, cosine };

using RowMatrixF =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// h x w grid of c-dimensional features, row-major over (h, w, c).
class FeatureMap {
 public:
  FeatureMap(std::size_t height, std::size_t width, std::size_t channels,
             std::vector<float> data);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::span<const float> data() const noexcept { return data_; }

  float at(std::size_t y, std::size_t x, std::size_t ch) const {
    return data_[(y * width_ + x) * channels_ + ch];
  }

  friend bool operator==(const FeatureMap &, const FeatureMap &) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t channels_;
  std::vector<float> data_;
};

// m x c feature matrix; rows are patches.
class FlatFeatures {
 public:
  explicit FlatFeatures(RowMatrixF data);

  std::size_t rows() const noexcept { return static_cast<std::size_t>(data_.rows()); }
  std::size_t channels() const noexcept { return static_cast<std::size_t>(data_.cols()); }
  const RowMatrixF &matrix() const noexcept { return data_; }

  friend bool operator==(const FlatFeatures &a, const FlatFeatures &b) {
    return a.data_.rows() == b.data_.rows() && a.data_.cols() == b.data_.cols() &&
           a.data_ == b.data_;
  }

 private:
  RowMatrixF data_;
};

// Normal prototype bank M_s (n x c). Cosine banks hold unit-norm rows.
class PrototypeBank {
 public:
  PrototypeBank(RowMatrixF data, MetricMode metric);

  std::size_t count() const noexcept { return static_cast<std::size_t>(data_.rows()); }
  std::size_t channels() const noexcept { return static_cast<std::size_t>(data_.cols()); }
  MetricMode metric() const noexcept { return metric_; }
  const RowMatrixF &matrix() const noexcept { return data_; }

 private:
  RowMatrixF data_;
  MetricMode metric_;
};

using Tensor = std::variant<FeatureMap, FlatFeatures>;

FlatFeatures flatten_map(const FeatureMap &map);
FeatureMap reshape_flat(const FlatFeatures &flat, std::size_t height, std::size_t width);

// FTZ layout: "FREF", u16 version (1), u8 dtype (0 = f32), u8 rank (2|3),
// rank x u32 dims, row-major f32 payload. All little-endian.
inline constexpr std::uint16_t kFtzVersion = 1;
inline constexpr std::uint8_t kFtzDtypeF32 = 0;
std::size_t ftz_header_size(std::size_t rank);

std::vector<std::uint8_t> encode_tensor(const Tensor &tensor);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

Tensor read_tensor(const std::filesystem::path &path);
void write_tensor(const Tensor &tensor, const std::filesystem::path &path);

// Typed readers; a rank mismatch is an invalid-input error.
FeatureMap read_feature_map(const std::filesystem::path &path);
FlatFeatures read_flat_features(const std::filesystem::path &path);

}  // namespace fastref
