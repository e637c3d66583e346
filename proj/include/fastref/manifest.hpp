#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fastref {

// One JSON-lines record:
//   {"tensor": path, "label": 0|1, "mask": path|null, "image_hw": [H, W]}
// plus an optional "zero_shot": s0 in [0, 1].
struct ManifestRecord {
  std::string tensor;
  int label = 0;
  std::optional<std::string> mask;
  std::array<std::size_t, 2> image_hw{0, 0};
  std::optional<double> zero_shot;
};

struct RunManifest {
  std::vector<ManifestRecord> records;
  // Relative paths in records resolve against this directory.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string &path) const;
};

RunManifest read_manifest(const std::filesystem::path &path);
void write_manifest(const std::vector<ManifestRecord> &records,
                    const std::filesystem::path &path);

// Fails with io-failure if a referenced tensor or mask does not exist.
void check_manifest_files(const RunManifest &manifest);

}  // namespace fastref
