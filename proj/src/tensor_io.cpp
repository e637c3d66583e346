#include "fastref/tensor_io.hpp"

#include "fastref/error.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

namespace fastref {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return "invalid-input";
    case ErrorCode::io_failure: return "io-failure";
    case ErrorCode::bad_magic: return "bad-magic";
    case ErrorCode::unsupported_version: return "unsupported-version";
    case ErrorCode::unsupported_dtype: return "unsupported-dtype";
    case ErrorCode::unsupported_rank: return "unsupported-rank";
    case ErrorCode::truncated_payload: return "truncated-payload";
    case ErrorCode::trailing_bytes: return "trailing-bytes";
    case ErrorCode::dims_overflow: return "dims-overflow";
    case ErrorCode::non_finite: return "non-finite";
    case ErrorCode::bad_manifest: return "bad-manifest";
    case ErrorCode::singular_matrix: return "singular-matrix";
    case ErrorCode::degenerate_kernel: return "degenerate-kernel";
    case ErrorCode::unsupported_size: return "unsupported-size";
    case ErrorCode::non_convergence: return "non-convergence";
    case ErrorCode::undefined_metric: return "undefined-metric";
  }
  return "unknown";
}

namespace {

constexpr char kMagic[4] = {'F', 'R', 'E', 'F'};

void require_finite(std::span<const float> values, const char *what) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      fail(ErrorCode::non_finite, std::string(what) + " contains NaN or Inf");
    }
  }
}

template <typename T>
void put_le(std::vector<std::uint8_t> &out, T value) {
  using U = std::make_unsigned_t<T>;
  U bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

template <typename U>
U get_le(const std::uint8_t *p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  }
  return value;
}

void put_floats(std::vector<std::uint8_t> &out, std::span<const float> values) {
  out.reserve(out.size() + 4 * values.size());
  for (float v : values) put_le(out, std::bit_cast<std::uint32_t>(v));
}

}  // namespace

FeatureMap::FeatureMap(std::size_t height, std::size_t width, std::size_t channels,
                       std::vector<float> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height == 0 || width == 0 || channels == 0) {
    fail(ErrorCode::invalid_input, "feature map dimensions must be positive");
  }
  if (data_.size() != height * width * channels) {
    fail(ErrorCode::invalid_input, "feature map data length does not match h*w*c");
  }
  require_finite(data_, "feature map");
}

FlatFeatures::FlatFeatures(RowMatrixF data) : data_(std::move(data)) {
  if (data_.rows() == 0 || data_.cols() == 0) {
    fail(ErrorCode::invalid_input, "flat features must have positive rows and channels");
  }
  require_finite({data_.data(), static_cast<std::size_t>(data_.size())}, "flat features");
}

PrototypeBank::PrototypeBank(RowMatrixF data, MetricMode metric)
    : data_(std::move(data)), metric_(metric) {
  if (data_.rows() == 0 || data_.cols() == 0) {
    fail(ErrorCode::invalid_input, "prototype bank must be non-empty");
  }
  require_finite({data_.data(), static_cast<std::size_t>(data_.size())}, "prototype bank");
  if (metric_ == MetricMode::cosine) {
    for (Eigen::Index i = 0; i < data_.rows(); ++i) {
      const double norm = data_.row(i).cast<double>().norm();
      if (std::abs(norm - 1.0) > 1e-5) {
        fail(ErrorCode::invalid_input, "cosine bank row " + std::to_string(i) +
                                           " is not unit-norm");
      }
    }
  }
}

FlatFeatures flatten_map(const FeatureMap &map) {
  const auto rows = static_cast<Eigen::Index>(map.height() * map.width());
  const auto cols = static_cast<Eigen::Index>(map.channels());
  RowMatrixF out(rows, cols);
  // Row-major storage makes (y, x, ch) -> (y * w + x, ch) a straight copy.
  std::memcpy(out.data(), map.data().data(), map.data().size() * sizeof(float));
  return FlatFeatures(std::move(out));
}

FeatureMap reshape_flat(const FlatFeatures &flat, std::size_t height, std::size_t width) {
  if (height * width != flat.rows()) {
    fail(ErrorCode::invalid_input, "reshape grid does not match flat row count");
  }
  const auto &m = flat.matrix();
  std::vector<float> data(m.data(), m.data() + m.size());
  return FeatureMap(height, width, flat.channels(), std::move(data));
}

std::size_t ftz_header_size(std::size_t rank) { return 8 + 4 * rank; }

std::vector<std::uint8_t> encode_tensor(const Tensor &tensor) {
  std::vector<std::size_t> sizes;
  std::span<const float> payload;
  if (const auto *map = std::get_if<FeatureMap>(&tensor)) {
    sizes = {map->height(), map->width(), map->channels()};
    payload = map->data();
  } else {
    const auto &flat = std::get<FlatFeatures>(tensor);
    sizes = {flat.rows(), flat.channels()};
    payload = {flat.matrix().data(), static_cast<std::size_t>(flat.matrix().size())};
  }
  std::vector<std::uint32_t> dims;
  for (std::size_t d : sizes) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      fail(ErrorCode::dims_overflow, "dimension does not fit in u32");
    }
    dims.push_back(static_cast<std::uint32_t>(d));
  }

  std::vector<std::uint8_t> out;
  out.reserve(ftz_header_size(dims.size()) + 4 * payload.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_le(out, kFtzVersion);
  out.push_back(kFtzDtypeF32);
  out.push_back(static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) put_le(out, d);
  put_floats(out, payload);
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::bad_magic, "missing FREF magic");
  }
  if (bytes.size() < 8) fail(ErrorCode::truncated_payload, "header truncated");
  const auto version = get_le<std::uint16_t>(bytes.data() + 4);
  if (version != kFtzVersion) {
    fail(ErrorCode::unsupported_version, "unsupported FTZ version " + std::to_string(version));
  }
  const std::uint8_t dtype = bytes[6];
  if (dtype != kFtzDtypeF32) {
    fail(ErrorCode::unsupported_dtype, "unsupported dtype " + std::to_string(dtype));
  }
  const std::uint8_t rank = bytes[7];
  if (rank != 2 && rank != 3) {
    fail(ErrorCode::unsupported_rank, "unsupported rank " + std::to_string(rank));
  }
  const std::size_t header = ftz_header_size(rank);
  if (bytes.size() < header) fail(ErrorCode::truncated_payload, "dims truncated");

  std::vector<std::size_t> dims(rank);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = get_le<std::uint32_t>(bytes.data() + 8 + 4 * i);
    if (dims[i] == 0) fail(ErrorCode::invalid_input, "zero dimension in header");
    if (count > std::numeric_limits<std::uint64_t>::max() / 4 / dims[i]) {
      fail(ErrorCode::dims_overflow, "element count overflows");
    }
    count *= dims[i];
  }
  const std::uint64_t payload_bytes = 4 * count;
  const std::uint64_t available = bytes.size() - header;
  if (available < payload_bytes) {
    fail(ErrorCode::truncated_payload, "payload has " + std::to_string(available) +
                                           " bytes, header requires " +
                                           std::to_string(payload_bytes));
  }
  if (available > payload_bytes) {
    fail(ErrorCode::trailing_bytes, "unexpected bytes after payload");
  }

  std::vector<float> values(count);
  const std::uint8_t *p = bytes.data() + header;
  for (std::size_t i = 0; i < count; ++i) {
    values[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
  }
  require_finite(values, "tensor payload");

  if (rank == 3) return FeatureMap(dims[0], dims[1], dims[2], std::move(values));
  RowMatrixF m = Eigen::Map<RowMatrixF>(values.data(), static_cast<Eigen::Index>(dims[0]),
                                        static_cast<Eigen::Index>(dims[1]));
  return FlatFeatures(std::move(m));
}

Tensor read_tensor(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io_failure, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::io_failure, "read failed for " + path.string());
  return decode_tensor(bytes);
}

void write_tensor(const Tensor &tensor, const std::filesystem::path &path) {
  const auto bytes = encode_tensor(tensor);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io_failure, "cannot create " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) fail(ErrorCode::io_failure, "write failed for " + path.string());
}

FeatureMap read_feature_map(const std::filesystem::path &path) {
  auto t = read_tensor(path);
  if (auto *map = std::get_if<FeatureMap>(&t)) return std::move(*map);
  fail(ErrorCode::invalid_input, path.string() + " is rank 2, expected an h x w x c map");
}

FlatFeatures read_flat_features(const std::filesystem::path &path) {
  auto t = read_tensor(path);
  if (auto *flat = std::get_if<FlatFeatures>(&t)) return std::move(*flat);
  fail(ErrorCode::invalid_input, path.string() + " is rank 3, expected an n x c matrix");
}

}  // namespace fastref
