#include "fastref/eval.hpp"

#include "fastref/error.hpp"
#include "fastref/scoring.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace fastref {

double auroc(const LabeledScores &data) {
  const auto &s = data.scores;
  const auto &y = data.labels;
  if (s.size() != y.size()) fail(ErrorCode::invalid_input, "scores and labels differ in length");
  std::size_t pos = 0;
  for (int label : y) {
    if (label != 0 && label != 1) fail(ErrorCode::invalid_input, "labels must be 0 or 1");
    pos += static_cast<std::size_t>(label);
  }
  const std::size_t neg = y.size() - pos;
  if (pos == 0 || neg == 0) {
    fail(ErrorCode::undefined_metric, "AUROC needs both positive and negative samples");
  }
  for (double v : s) {
    if (std::isnan(v)) fail(ErrorCode::invalid_input, "NaN score");
  }

  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });

  // Sum of 2 * midrank over positives keeps everything integral.
  double twice_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && s[order[j + 1]] == s[order[i]]) ++j;
    const double twice_midrank = static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      if (y[order[k]] == 1) twice_rank_sum += twice_midrank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(pos);
  const double twice_u = twice_rank_sum - p * (p + 1.0);
  return twice_u / (2.0 * p * static_cast<double>(neg));
}

SynthInstance synth_generate(const SynthSpec &spec) {
  if (spec.outliers >= spec.query_rows) {
    fail(ErrorCode::invalid_input, "outlier count must be below the query row count");
  }
  if (spec.bank_rows == 0 || spec.channels == 0) {
    fail(ErrorCode::invalid_input, "synthetic bank must be non-empty");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](std::size_t rows) {
    Matrix out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(spec.channels));
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      for (Eigen::Index k = 0; k < out.cols(); ++k) {
        out(i, k) = static_cast<double>(static_cast<float>(normal(rng)));
      }
    }
    return out;
  };

  SynthInstance inst;
  inst.bank = draw(spec.bank_rows);
  inst.query = draw(spec.query_rows);
  std::vector<std::size_t> rows(spec.query_rows);
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  inst.outlier_indices.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(spec.outliers));
  std::sort(inst.outlier_indices.begin(), inst.outlier_indices.end());
  for (std::size_t r : inst.outlier_indices) {
    auto &v = inst.query(static_cast<Eigen::Index>(r), 0);
    v = static_cast<double>(static_cast<float>(v + spec.shift));
  }
  return inst;
}

double median_of(std::vector<double> values) {
  if (values.empty()) fail(ErrorCode::invalid_input, "median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

double p95_of(std::vector<double> values) {
  if (values.empty()) fail(ErrorCode::invalid_input, "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(values.size())));
  return values[std::max<std::size_t>(rank, 1) - 1];
}

BenchReport bench_refine(const BenchDims &dims, const RefineConfig &config, int repeats,
                         std::uint64_t seed) {
  if (repeats < 10) fail(ErrorCode::invalid_input, "bench repeats must be >= 10");
  using Clock = std::chrono::steady_clock;
  auto ms_since = [](Clock::time_point t) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t).count();
  };

  const std::vector<std::string> names = {"prepare", "query_context", "init",
                                          "sinkhorn", "update", "scoring"};
  std::vector<std::vector<double>> samples(names.size());
  std::vector<double> totals;

  for (int r = 0; r <= repeats; ++r) {
    SynthSpec spec;
    spec.seed = seed + static_cast<std::uint64_t>(r);
    spec.query_rows = dims.m;
    spec.bank_rows = dims.n;
    spec.channels = dims.c;
    spec.outliers = 0;
    const SynthInstance inst = synth_generate(spec);

    auto t = Clock::now();
    const BankSystem bank(inst.bank, config.ridge, config.metric);
    const double prepare_ms = ms_since(t);

    t = Clock::now();
    const QueryContext query = make_query_context(inst.query, bank);
    const double context_ms = ms_since(t);

    t = Clock::now();
    const RefineResult refined = fastref_refine(query, bank, config);
    const double refine_ms = ms_since(t);

    t = Clock::now();
    const auto scores = patch_scores_factored(query.cross, query.sq_norms, refined.transform,
                                              refined.refined_sq_norms, config.metric);
    const double scoring_ms = ms_since(t);
    if (scores.empty()) fail(ErrorCode::invalid_input, "empty score vector");

    if (r == 0) continue;  // warm-up
    const auto &times = refined.trace.times;
    const double stage[] = {prepare_ms, context_ms, times.init_ms,
                            times.sinkhorn_ms, times.update_ms, scoring_ms};
    for (std::size_t s = 0; s < names.size(); ++s) samples[s].push_back(stage[s]);
    totals.push_back(context_ms + refine_ms + scoring_ms);
  }

  BenchReport report;
  report.dims = dims;
  report.outer_iters = config.outer_iters;
  report.inner_iters = config.sinkhorn.max_inner_iters;
  report.repeats = repeats;
  for (std::size_t s = 0; s < names.size(); ++s) {
    report.stages.push_back({names[s], median_of(samples[s]), p95_of(samples[s])});
  }
  report.total = {"refine_and_score", median_of(totals), p95_of(totals)};
  return report;
}

std::string bench_report_json(const BenchReport &report) {
  nlohmann::ordered_json j;
  j["dims"] = {{"m", report.dims.m}, {"n", report.dims.n}, {"c", report.dims.c}};
  j["outer_iters"] = report.outer_iters;
  j["inner_iters"] = report.inner_iters;
  j["repeats"] = report.repeats;
  nlohmann::ordered_json stages = nlohmann::ordered_json::object();
  for (const auto &s : report.stages) {
    stages[s.name] = {{"median_ms", s.median_ms}, {"p95_ms", s.p95_ms}};
  }
  j["stages"] = stages;
  j[report.total.name] = {{"median_ms", report.total.median_ms}, {"p95_ms", report.total.p95_ms}};
  return j.dump(2);
}

}  // namespace fastref
