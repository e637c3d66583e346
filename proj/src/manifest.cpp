#include "fastref/manifest.hpp"

#include "fastref/error.hpp"

#include <json.hpp>

#include <fstream>

namespace fastref {

using nlohmann::json;

std::filesystem::path RunManifest::resolve(const std::string &path) const {
  std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

namespace {

ManifestRecord parse_record(const json &j, std::size_t line_no) {
  const auto where = " (line " + std::to_string(line_no) + ")";
  if (!j.is_object()) fail(ErrorCode::bad_manifest, "record is not an object" + where);
  ManifestRecord rec;
  try {
    rec.tensor = j.at("tensor").get<std::string>();
    rec.label = j.at("label").get<int>();
    if (j.contains("mask") && !j.at("mask").is_null()) rec.mask = j.at("mask").get<std::string>();
    const auto &hw = j.at("image_hw");
    if (!hw.is_array() || hw.size() != 2) {
      fail(ErrorCode::bad_manifest, "image_hw must be [H, W]" + where);
    }
    rec.image_hw = {hw[0].get<std::size_t>(), hw[1].get<std::size_t>()};
    if (j.contains("zero_shot") && !j.at("zero_shot").is_null()) {
      rec.zero_shot = j.at("zero_shot").get<double>();
    }
  } catch (const json::exception &e) {
    fail(ErrorCode::bad_manifest, std::string(e.what()) + where);
  }
  if (rec.label != 0 && rec.label != 1) fail(ErrorCode::bad_manifest, "label must be 0 or 1" + where);
  if (rec.image_hw[0] == 0 || rec.image_hw[1] == 0) {
    fail(ErrorCode::bad_manifest, "image_hw must be positive" + where);
  }
  return rec;
}

}  // namespace

RunManifest read_manifest(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io_failure, "cannot open manifest " + path.string());
  RunManifest manifest;
  manifest.base_dir = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error &e) {
      fail(ErrorCode::bad_manifest, "line " + std::to_string(line_no) + ": " + e.what());
    }
    manifest.records.push_back(parse_record(j, line_no));
  }
  return manifest;
}

void write_manifest(const std::vector<ManifestRecord> &records,
                    const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io_failure, "cannot create " + path.string());
  for (const auto &rec : records) {
    json j;
    j["tensor"] = rec.tensor;
    j["label"] = rec.label;
    j["mask"] = rec.mask ? json(*rec.mask) : json(nullptr);
    j["image_hw"] = {rec.image_hw[0], rec.image_hw[1]};
    if (rec.zero_shot) j["zero_shot"] = *rec.zero_shot;
    out << j.dump() << '\n';
  }
  if (!out) fail(ErrorCode::io_failure, "write failed for " + path.string());
}

void check_manifest_files(const RunManifest &manifest) {
  for (const auto &rec : manifest.records) {
    if (!std::filesystem::exists(manifest.resolve(rec.tensor))) {
      fail(ErrorCode::io_failure, "missing tensor " + rec.tensor);
    }
    if (rec.mask && !std::filesystem::exists(manifest.resolve(*rec.mask))) {
      fail(ErrorCode::io_failure, "missing mask " + *rec.mask);
    }
  }
}

}  // namespace fastref
