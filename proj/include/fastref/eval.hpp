#pragma once

#include "fastref/linalg.hpp"
#include "fastref/refine.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fastref {

struct LabeledScores {
  std::vector<double> scores;
  std::vector<int> labels;  // 0 = normal, 1 = anomalous
};

// Mann-Whitney U / (#pos * #neg), ties counted 1/2. Single-class input is an
// undefined-metric error.
double auroc(const LabeledScores &data);

struct SynthSpec {
  std::uint64_t seed = 0;
  std::size_t query_rows = 64;   // m
  std::size_t bank_rows = 64;    // n
  std::size_t channels = 16;     // c
  std::size_t outliers = 4;
  double shift = 6.0;
};

struct SynthInstance {
  Matrix bank;   // n x c, N(0, I)
  Matrix query;  // m x c, N(0, I) with outlier rows shifted along axis 0
  std::vector<std::size_t> outlier_indices;  // ascending
};

// Deterministic in the seed; values are f32-representable.
SynthInstance synth_generate(const SynthSpec &spec);

struct BenchDims {
  std::size_t m = 1024;
  std::size_t n = 102;
  std::size_t c = 640;
};

struct StageStats {
  std::string name;
  double median_ms = 0.0;
  double p95_ms = 0.0;
};

struct BenchReport {
  BenchDims dims;
  int outer_iters = 0;
  int inner_iters = 0;
  int repeats = 0;
  // prepare (bank Gram inverse, per bank) is reported but excluded from
  // the per-image total.
  std::vector<StageStats> stages;
  StageStats total;
};

double median_of(std::vector<double> values);
double p95_of(std::vector<double> values);

// fastref_refine + factored scoring on seeded random instances; one warm-up
// round is excluded from the statistics. repeats must be >= 10.
BenchReport bench_refine(const BenchDims &dims, const RefineConfig &config, int repeats,
                         std::uint64_t seed = 0);

std::string bench_report_json(const BenchReport &report);

}  // namespace fastref
