#include "fastref/coreset.hpp"
#include "fastref/error.hpp"
#include "fastref/eval.hpp"
#include "fastref/manifest.hpp"
#include "fastref/refine.hpp"
#include "fastref/runtime.hpp"
#include "fastref/scoring.hpp"
#include "fastref/tensor_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;

// Flags shared by the refinement-driven subcommands.
struct PipelineOptions {
  std::string metric = "euclidean";
  std::optional<double> lambda;
  double ratio = 0.05;
  int outer_iters = 2;
  int sinkhorn_iters = 10;
  std::string epsilon = "auto";
  double ridge = 1e-6;
  double sigma = 4.0;
  std::uint64_t seed = 0;
  std::string baseline = "none";
  int threads = 1;
};

fastref::MetricMode parse_metric(const std::string &name) {
  return name == "cosine" ? fastref::MetricMode::cosine : fastref::MetricMode::euclidean;
}

fastref::RefineConfig refine_config(const PipelineOptions &opt) {
  auto config = fastref::default_refine_config(parse_metric(opt.metric));
  if (opt.lambda) config.lambda = *opt.lambda;
  config.outer_iters = opt.outer_iters;
  config.ridge = opt.ridge;
  config.sinkhorn.max_inner_iters = opt.sinkhorn_iters;
  if (opt.epsilon != "auto") {
    std::size_t used = 0;
    double eps = 0.0;
    try {
      eps = std::stod(opt.epsilon, &used);
    } catch (const std::exception &) {
      used = 0;
    }
    if (used != opt.epsilon.size() || !(eps > 0.0)) {
      throw CLI::ValidationError("--epsilon", "expected a positive number or 'auto'");
    }
    config.sinkhorn.epsilon = eps;
  }
  return config;
}

void add_refine_flags(CLI::App *cmd, PipelineOptions &opt) {
  cmd->add_option("--metric", opt.metric, "Distance mode")
      ->check(CLI::IsMember({"euclidean", "cosine"}));
  cmd->add_option("--lambda", opt.lambda, "OT balance coefficient (0.3 euclidean, 0.1 cosine)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--outer-iters", opt.outer_iters, "Outer refinement iterations")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--sinkhorn-iters", opt.sinkhorn_iters, "Sinkhorn iterations per outer step")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--epsilon", opt.epsilon, "Entropic regularizer, or 'auto'");
  cmd->add_option("--ridge", opt.ridge, "Relative ridge on the Gram matrix")
      ->check(CLI::NonNegativeNumber);
}

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fastref::fail(fastref::ErrorCode::io_failure, "cannot create " + path.string());
  out << text;
  if (!out) fastref::fail(fastref::ErrorCode::io_failure, "write failed: " + path.string());
}

void emit_json(const ordered_json &j, const std::string &out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
}

ordered_json read_json(const fs::path &path) {
  std::ifstream in(path);
  if (!in) fastref::fail(fastref::ErrorCode::io_failure, "cannot open " + path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    fastref::fail(fastref::ErrorCode::invalid_input, path.string() + ": " + e.what());
  }
}

// Runs job(i) for i in [0, count) on `threads` workers. The lowest-index
// failure is rethrown so errors do not depend on scheduling.
template <typename Job>
void parallel_for(std::size_t count, int threads, const Job &job) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto &t : pool) t.join();
  for (const auto &e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---- synth ----

struct SynthOptions {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t grid = 16;
  std::size_t channels = 16;
  std::size_t upscale = 4;
  std::size_t shots = 4;
  std::size_t normal = 8;
  std::size_t anomalous = 8;
  std::size_t defect = 3;
  double shift = 6.0;
};

// Normal images are N(0, I) feature grids. Anomalous images add `shift`
// along channel 0 inside a defect x defect patch square; the mask marks the
// matching pixels of the upscaled image.
int run_synth(const SynthOptions &opt) {
  if (opt.defect > opt.grid) {
    fastref::fail(fastref::ErrorCode::invalid_input, "defect size exceeds the grid");
  }
  const fs::path root(opt.out);
  fs::create_directories(root / "support");
  fs::create_directories(root / "query");
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const std::size_t g = opt.grid;
  const std::size_t hw = g * opt.upscale;

  auto draw_map = [&] {
    std::vector<float> data(g * g * opt.channels);
    for (auto &v : data) v = normal(rng);
    return data;
  };

  std::vector<fastref::ManifestRecord> support;
  for (std::size_t s = 0; s < opt.shots; ++s) {
    const std::string name = "support/" + std::to_string(s) + ".ftz";
    fastref::write_tensor(fastref::FeatureMap(g, g, opt.channels, draw_map()), root / name);
    support.push_back({name, 0, std::nullopt, {hw, hw}, std::nullopt});
  }
  fastref::write_manifest(support, root / "support.jsonl");

  std::vector<fastref::ManifestRecord> query;
  std::uniform_int_distribution<std::size_t> corner(0, g - opt.defect);
  for (std::size_t q = 0; q < opt.normal + opt.anomalous; ++q) {
    const bool anomalous = q >= opt.normal;
    auto data = draw_map();
    fastref::ManifestRecord rec;
    rec.tensor = "query/" + std::to_string(q) + ".ftz";
    rec.label = anomalous ? 1 : 0;
    rec.image_hw = {hw, hw};
    if (anomalous) {
      const std::size_t y0 = corner(rng);
      const std::size_t x0 = corner(rng);
      fastref::RowMatrixF mask = fastref::RowMatrixF::Zero(static_cast<Eigen::Index>(hw),
                                                           static_cast<Eigen::Index>(hw));
      for (std::size_t y = y0; y < y0 + opt.defect; ++y) {
        for (std::size_t x = x0; x < x0 + opt.defect; ++x) {
          data[(y * g + x) * opt.channels] += static_cast<float>(opt.shift);
          mask.block(static_cast<Eigen::Index>(y * opt.upscale),
                     static_cast<Eigen::Index>(x * opt.upscale),
                     static_cast<Eigen::Index>(opt.upscale),
                     static_cast<Eigen::Index>(opt.upscale))
              .setOnes();
        }
      }
      rec.mask = "query/" + std::to_string(q) + "_mask.ftz";
      fastref::write_tensor(fastref::FlatFeatures(std::move(mask)), root / *rec.mask);
    }
    fastref::write_tensor(fastref::FeatureMap(g, g, opt.channels, std::move(data)),
                          root / rec.tensor);
    query.push_back(std::move(rec));
  }
  fastref::write_manifest(query, root / "query.jsonl");
  return 0;
}

// ---- build-prototypes ----

fastref::FlatFeatures read_rows(const fs::path &path) {
  const auto tensor = fastref::read_tensor(path);
  if (const auto *map = std::get_if<fastref::FeatureMap>(&tensor)) return fastref::flatten_map(*map);
  return std::get<fastref::FlatFeatures>(tensor);
}

int run_build(const std::vector<std::string> &inputs, const std::string &manifest_path,
              const PipelineOptions &opt, const std::string &out) {
  std::vector<fs::path> paths(inputs.begin(), inputs.end());
  if (!manifest_path.empty()) {
    const auto manifest = fastref::read_manifest(manifest_path);
    fastref::check_manifest_files(manifest);
    for (const auto &rec : manifest.records) paths.push_back(manifest.resolve(rec.tensor));
  }
  if (paths.empty()) fastref::fail(fastref::ErrorCode::invalid_input, "no support tensors given");

  std::vector<fastref::FlatFeatures> parts;
  Eigen::Index rows = 0;
  for (const auto &p : paths) {
    parts.push_back(read_rows(p));
    if (parts.back().channels() != parts.front().channels()) {
      fastref::fail(fastref::ErrorCode::invalid_input,
                    p.string() + " has " + std::to_string(parts.back().channels()) +
                        " channels, expected " + std::to_string(parts.front().channels()));
    }
    rows += static_cast<Eigen::Index>(parts.back().rows());
  }
  fastref::RowMatrixF all(rows, static_cast<Eigen::Index>(parts.front().channels()));
  Eigen::Index offset = 0;
  for (const auto &part : parts) {
    all.middleRows(offset, part.matrix().rows()) = part.matrix();
    offset += part.matrix().rows();
  }

  fastref::CoresetConfig config;
  config.ratio = opt.ratio;
  config.seed = opt.seed;
  const auto result =
      fastref::select_coreset(fastref::FlatFeatures(std::move(all)), config, parse_metric(opt.metric));
  fastref::write_tensor(fastref::FlatFeatures(result.bank.matrix()), out);
  return 0;
}

// ---- score / baseline ----

struct ScoredImage {
  double image_score = 0.0;
  fastref::ScoreMap pixels{1, 1, {0.0}};
};

ScoredImage score_image(const fastref::FeatureMap &map, const fastref::ManifestRecord &rec,
                        const fastref::BankSystem &bank, const fastref::RefineConfig &config,
                        const std::string &baseline, double sigma) {
  const auto h = map.height();
  const auto w = map.width();
  const fastref::Matrix query = fastref::to_matrix(fastref::flatten_map(map));
  const auto ctx = fastref::make_query_context(query, bank);

  std::vector<double> patch;
  if (baseline == "ttt") {
    fastref::TttConfig ttt;
    ttt.lambda = config.lambda;
    const auto refined = fastref::ttt_refine(ctx, bank, ttt);
    patch = fastref::score_map(query, refined.refined, config.metric, h, w).values();
  } else if (baseline == "lstsq") {
    const auto w0 = fastref::init_transform(ctx, bank);
    patch = fastref::patch_scores_factored(ctx.cross, ctx.sq_norms, w0, config.metric, bank.gram());
  } else {
    const auto refined = fastref::fastref_refine(ctx, bank, config);
    patch = fastref::patch_scores_factored(ctx.cross, ctx.sq_norms, refined.transform,
                                           refined.refined_sq_norms, config.metric);
  }
  const fastref::ScoreMap patch_map(h, w, std::move(patch));

  ScoredImage out;
  if (rec.zero_shot) {
    if (config.metric != fastref::MetricMode::cosine) {
      fastref::fail(fastref::ErrorCode::invalid_input,
                    rec.tensor + ": zero_shot scores need --metric cosine");
    }
    out.image_score = fastref::combine_zero_shot(*rec.zero_shot, patch_map);
  } else {
    out.image_score = fastref::image_score(patch_map);
  }
  out.pixels = fastref::pixel_map(patch_map, rec.image_hw[0], rec.image_hw[1], sigma);
  return out;
}

ordered_json config_json(const PipelineOptions &opt, const fastref::RefineConfig &config) {
  ordered_json j;
  j["metric"] = opt.metric;
  j["baseline"] = opt.baseline;
  j["lambda"] = config.lambda;
  j["outer_iters"] = config.outer_iters;
  j["sinkhorn_iters"] = config.sinkhorn.max_inner_iters;
  j["epsilon"] = config.sinkhorn.epsilon ? ordered_json(*config.sinkhorn.epsilon)
                                         : ordered_json("auto");
  j["ridge"] = config.ridge;
  j["sigma"] = opt.sigma;
  return j;
}

int run_score(const std::string &bank_path, const std::string &manifest_path,
              const PipelineOptions &opt, const std::string &out_dir) {
  const auto config = refine_config(opt);
  const auto manifest = fastref::read_manifest(manifest_path);
  fastref::check_manifest_files(manifest);
  if (manifest.records.empty()) fastref::fail(fastref::ErrorCode::invalid_input, "empty manifest");

  const fastref::PrototypeBank prototypes(fastref::read_flat_features(bank_path).matrix(),
                                          config.metric);
  const fastref::BankSystem bank(prototypes, config.ridge);

  const fs::path root(out_dir);
  fs::create_directories(root / "maps");
  const auto &records = manifest.records;
  std::vector<double> image_scores(records.size());
  std::vector<std::string> map_names(records.size());
  parallel_for(records.size(), opt.threads, [&](std::size_t i) {
    const auto &rec = records[i];
    const auto map = fastref::read_feature_map(manifest.resolve(rec.tensor));
    const auto scored = score_image(map, rec, bank, config, opt.baseline, opt.sigma);
    image_scores[i] = scored.image_score;

    const auto &px = scored.pixels;
    fastref::RowMatrixF pixels(static_cast<Eigen::Index>(px.height()),
                               static_cast<Eigen::Index>(px.width()));
    for (Eigen::Index y = 0; y < pixels.rows(); ++y) {
      for (Eigen::Index x = 0; x < pixels.cols(); ++x) {
        pixels(y, x) = static_cast<float>(px.at(static_cast<std::size_t>(y),
                                                 static_cast<std::size_t>(x)));
      }
    }
    map_names[i] = "maps/" + std::to_string(i) + ".ftz";
    fastref::write_tensor(fastref::FlatFeatures(std::move(pixels)), root / map_names[i]);
  });

  ordered_json j;
  j["config"] = config_json(opt, config);
  j["images"] = ordered_json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    j["images"].push_back({{"tensor", records[i].tensor},
                           {"label", records[i].label},
                           {"image_score", image_scores[i]},
                           {"map", map_names[i]}});
  }
  write_text(root / "scores.json", j.dump(2) + "\n");
  return 0;
}

// ---- eval ----

int run_eval(const std::string &scores_path, const std::string &manifest_path,
             const std::string &out) {
  const auto manifest = fastref::read_manifest(manifest_path);
  fastref::check_manifest_files(manifest);
  const auto scores = read_json(scores_path);
  const fs::path scores_dir = fs::path(scores_path).parent_path();

  fastref::LabeledScores image;
  fastref::LabeledScores pixel;
  try {
    const auto &images = scores.at("images");
    if (images.size() != manifest.records.size()) {
      fastref::fail(fastref::ErrorCode::invalid_input,
                    "scores list " + std::to_string(images.size()) + " images, manifest has " +
                        std::to_string(manifest.records.size()));
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto &rec = manifest.records[i];
      const auto &entry = images[i];
      if (entry.at("tensor").get<std::string>() != rec.tensor) {
        fastref::fail(fastref::ErrorCode::invalid_input,
                      "scores entry " + std::to_string(i) + " does not match " + rec.tensor);
      }
      image.scores.push_back(entry.at("image_score").get<double>());
      image.labels.push_back(rec.label);

      const auto map = fastref::read_flat_features(scores_dir / entry.at("map").get<std::string>());
      const auto h = static_cast<Eigen::Index>(rec.image_hw[0]);
      const auto w = static_cast<Eigen::Index>(rec.image_hw[1]);
      if (map.matrix().rows() != h || map.matrix().cols() != w) {
        fastref::fail(fastref::ErrorCode::invalid_input, "score map size differs from image_hw for " + rec.tensor);
      }
      fastref::RowMatrixF mask = fastref::RowMatrixF::Zero(h, w);
      if (rec.mask) {
        mask = fastref::read_flat_features(manifest.resolve(*rec.mask)).matrix();
        if (mask.rows() != h || mask.cols() != w) {
          fastref::fail(fastref::ErrorCode::invalid_input, "mask size differs from image_hw for " + rec.tensor);
        }
      }
      for (Eigen::Index y = 0; y < h; ++y) {
        for (Eigen::Index x = 0; x < w; ++x) {
          pixel.scores.push_back(map.matrix()(y, x));
          pixel.labels.push_back(mask(y, x) > 0.5f ? 1 : 0);
        }
      }
    }
  } catch (const nlohmann::json::exception &e) {
    fastref::fail(fastref::ErrorCode::invalid_input, scores_path + ": " + e.what());
  }

  ordered_json j;
  j["images"] = image.scores.size();
  j["pixels"] = pixel.scores.size();
  j["image_auroc"] = fastref::auroc(image);
  j["pixel_auroc"] = fastref::auroc(pixel);
  emit_json(j, out);
  return 0;
}

// ---- bench ----

int run_bench(const PipelineOptions &opt, const fastref::BenchDims &dims, int repeats,
              const std::string &out) {
  const auto report = fastref::bench_refine(dims, refine_config(opt), repeats, opt.seed);
  const std::string text = fastref::bench_report_json(report) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  fastref::retain_freed_memory();

  CLI::App app{"FastRef prototype refinement for few-shot anomaly detection"};
  app.require_subcommand(1);

  PipelineOptions opt;
  std::string out;

  SynthOptions synth;
  auto *synth_cmd = app.add_subcommand("synth", "Write a synthetic FTZ dataset with manifests");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--seed", synth.seed, "Random seed");
  synth_cmd->add_option("--grid", synth.grid, "Patch grid side")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--channels", synth.channels, "Feature channels")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--upscale", synth.upscale, "Pixels per patch side")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--shots", synth.shots, "Support images")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--normal", synth.normal, "Normal query images");
  synth_cmd->add_option("--anomalous", synth.anomalous, "Anomalous query images");
  synth_cmd->add_option("--defect", synth.defect, "Defect side in patches")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--shift", synth.shift, "Defect offset along channel 0");

  std::vector<std::string> support_inputs;
  std::string support_manifest;
  auto *build_cmd = app.add_subcommand("build-prototypes", "Coreset a prototype bank from support tensors");
  build_cmd->add_option("inputs", support_inputs, "Support FTZ tensors");
  build_cmd->add_option("--manifest", support_manifest, "Support manifest (JSON lines)");
  build_cmd->add_option("--metric", opt.metric, "Distance mode")
      ->check(CLI::IsMember({"euclidean", "cosine"}));
  build_cmd->add_option("--ratio", opt.ratio, "Coreset sampling ratio")
      ->check(CLI::Range(0.0, 1.0) & !CLI::IsMember({0.0}));
  build_cmd->add_option("--seed", opt.seed, "Seed for the coreset start point");
  build_cmd->add_option("--out", out, "Bank FTZ path")->required();

  std::string bank_path;
  std::string query_manifest;
  auto add_score_flags = [&](CLI::App *cmd) {
    cmd->add_option("--bank", bank_path, "Prototype bank FTZ")->required();
    cmd->add_option("--manifest", query_manifest, "Query manifest (JSON lines)")->required();
    add_refine_flags(cmd, opt);
    cmd->add_option("--sigma", opt.sigma, "Gaussian smoothing sigma in pixels")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--threads", opt.threads, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--out", out, "Output directory")->required();
  };
  auto *score_cmd = app.add_subcommand("score", "Refine and score every query image");
  add_score_flags(score_cmd);
  score_cmd->add_option("--baseline", opt.baseline, "Replace refinement by a baseline")
      ->check(CLI::IsMember({"none", "lstsq", "ttt"}));
  auto *baseline_cmd = app.add_subcommand("baseline", "Score with least squares (lambda 0) or TTT");
  add_score_flags(baseline_cmd);
  baseline_cmd->add_option("--baseline", opt.baseline, "Baseline method")
      ->check(CLI::IsMember({"none", "lstsq", "ttt"}));

  std::string scores_path;
  std::string eval_manifest;
  auto *eval_cmd = app.add_subcommand("eval", "Image and pixel AUROC of a score run");
  eval_cmd->add_option("--scores", scores_path, "scores.json written by score")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "Query manifest with labels and masks")->required();
  eval_cmd->add_option("--out", out, "JSON output path (default stdout)");

  fastref::BenchDims dims;
  int repeats = 50;
  auto *bench_cmd = app.add_subcommand("bench", "Time refinement and scoring");
  add_refine_flags(bench_cmd, opt);
  bench_cmd->add_option("--m", dims.m, "Query patches")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--n", dims.n, "Prototypes")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--c", dims.c, "Channels")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--repeats", repeats, "Timed repeats (>= 10)");
  bench_cmd->add_option("--seed", opt.seed, "First instance seed");
  bench_cmd->add_option("--out", out, "JSON output path (default stdout)");

  try {
    app.parse(argc, argv);
    if (baseline_cmd->parsed() && opt.baseline == "none") opt.baseline = "lstsq";
    if (synth_cmd->parsed()) return run_synth(synth);
    if (build_cmd->parsed()) return run_build(support_inputs, support_manifest, opt, out);
    if (score_cmd->parsed() || baseline_cmd->parsed()) {
      return run_score(bank_path, query_manifest, opt, out);
    }
    if (eval_cmd->parsed()) return run_eval(scores_path, eval_manifest, out);
    if (bench_cmd->parsed()) return run_bench(opt, dims, repeats, out);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fastref::Error &e) {
    std::cerr << "error: " << fastref::error_code_name(e.code()) << ": " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error &e) {
    std::cerr << "error: io-failure: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception &e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
