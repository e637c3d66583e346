#pragma once

#include "fastref/tensor_io.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace fastref {

enum class StartRule { seeded_random, index_zero };

struct CoresetConfig {
  double ratio = 0.05;
  std::uint64_t seed = 0;
  StartRule start_rule = StartRule::seeded_random;
};

struct CoresetResult {
  PrototypeBank bank;
  std::vector<std::size_t> indices;  // in selection order
};

// max(1, round(ratio * rows)); ratio must lie in (0, 1].
std::size_t coreset_target_size(std::size_t rows, double ratio);

// Greedy farthest-first (k-center) selection under squared Euclidean
// distance. Ties go to the lowest index. In cosine mode rows are
// unit-normalized before selection and the bank holds the normalized rows.
CoresetResult select_coreset(const FlatFeatures &features, const CoresetConfig &config,
                             MetricMode metric = MetricMode::euclidean);

}  // namespace fastref
