#include "fastref/manifest.hpp"

#include "support/fixtures.hpp"

#include <fstream>

using namespace fastref;

namespace {

void write_text(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_CASE("manifest records round-trip through JSON lines") {
  const auto dir = fixtures::scratch_dir("manifest_roundtrip");
  std::vector<ManifestRecord> records(3);
  records[0] = {"a.ftz", 0, std::nullopt, {64, 48}, std::nullopt};
  records[1] = {"b.ftz", 1, std::string("b_mask.ftz"), {32, 32}, 0.25};
  records[2] = {"/abs/c.ftz", 1, std::nullopt, {1, 1}, 1.0};
  write_manifest(records, dir / "m.jsonl");

  const RunManifest manifest = read_manifest(dir / "m.jsonl");
  REQUIRE(manifest.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(manifest.records[i].tensor == records[i].tensor);
    CHECK(manifest.records[i].label == records[i].label);
    CHECK(manifest.records[i].mask == records[i].mask);
    CHECK(manifest.records[i].image_hw == records[i].image_hw);
    CHECK(manifest.records[i].zero_shot == records[i].zero_shot);
  }
  CHECK(manifest.resolve("a.ftz") == dir / "a.ftz");
  CHECK(manifest.resolve("/abs/c.ftz") == std::filesystem::path("/abs/c.ftz"));
}

TEST_CASE("manifest lines use the documented keys") {
  const auto dir = fixtures::scratch_dir("manifest_keys");
  write_manifest({{"x.ftz", 1, std::nullopt, {10, 20}, std::nullopt}}, dir / "m.jsonl");
  std::ifstream in(dir / "m.jsonl");
  std::string line;
  std::getline(in, line);
  CHECK(line == R"({"image_hw":[10,20],"label":1,"mask":null,"tensor":"x.ftz"})");
}

TEST_CASE("malformed manifests are bad-manifest errors") {
  const auto dir = fixtures::scratch_dir("manifest_bad");
  const auto path = dir / "m.jsonl";
  const char *cases[] = {
      "not json\n",
      R"({"label": 0, "image_hw": [1, 1]})" "\n",
      R"({"tensor": "a", "label": 2, "image_hw": [1, 1]})" "\n",
      R"({"tensor": "a", "label": 0, "image_hw": [1]})" "\n",
      R"({"tensor": "a", "label": 0, "image_hw": [0, 4]})" "\n",
      R"({"tensor": 5, "label": 0, "image_hw": [1, 1]})" "\n",
      "[1, 2]\n",
  };
  for (const char *text : cases) {
    write_text(path, text);
    CHECK_ERROR_CODE(read_manifest(path), ErrorCode::bad_manifest);
  }
}

TEST_CASE("blank lines are skipped") {
  const auto dir = fixtures::scratch_dir("manifest_blank");
  write_text(dir / "m.jsonl",
             "\n" R"({"tensor": "a", "label": 0, "mask": null, "image_hw": [2, 3]})" "\n\n");
  CHECK(read_manifest(dir / "m.jsonl").records.size() == 1);
}

TEST_CASE("missing referenced files are io-failure errors") {
  const auto dir = fixtures::scratch_dir("manifest_files");
  write_manifest({{"present.ftz", 0, std::string("absent_mask.ftz"), {1, 1}, std::nullopt}},
                 dir / "m.jsonl");
  write_text(dir / "present.ftz", "x");
  const RunManifest manifest = read_manifest(dir / "m.jsonl");
  CHECK_ERROR_CODE(check_manifest_files(manifest), ErrorCode::io_failure);
  write_text(dir / "absent_mask.ftz", "x");
  CHECK_NOTHROW(check_manifest_files(manifest));
  CHECK_ERROR_CODE(read_manifest(dir / "nope.jsonl"), ErrorCode::io_failure);
}
