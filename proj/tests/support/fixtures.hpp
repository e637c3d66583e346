#pragma once

#include "fastref/error.hpp"
#include "fastref/linalg.hpp"
#include "fastref/tensor_io.hpp"

#include <doctest.h>

#include <filesystem>
#include <string>

namespace fixtures {

inline fastref::FlatFeatures flat(const fastref::Matrix &m) {
  return fastref::FlatFeatures(fastref::to_row_float(m));
}

// Fresh empty directory under the system temp dir, unique per test name.
inline std::filesystem::path scratch_dir(const std::string &name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fastref_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures

// Asserts that `expr` throws fastref::Error carrying `expected`.
#define CHECK_ERROR_CODE(expr, expected)                                  \
  do {                                                                    \
    bool thrown_ = false;                                                 \
    try {                                                                 \
      (void)(expr);                                                       \
    } catch (const fastref::Error &e_) {                                  \
      thrown_ = true;                                                     \
      CHECK_MESSAGE(e_.code() == (expected), "got " << e_.what());        \
    }                                                                     \
    CHECK_MESSAGE(thrown_, "expected an error from " #expr);              \
  } while (false)
