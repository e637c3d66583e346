#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fastref {

enum class ErrorCode {
  invalid_input,
  io_failure,
  bad_magic,
  unsupported_version,
  unsupported_dtype,
  unsupported_rank,
  truncated_payload,
  trailing_bytes,
  dims_overflow,
  non_finite,
  bad_manifest,
  singular_matrix,
  degenerate_kernel,
  unsupported_size,
  non_convergence,
  undefined_metric,
};

// Stable kebab-case identifier, used in the CLI's machine-readable error line.
std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string &message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by ttt_refine when the fixed point does not settle in the budget.
class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string &message, double residual)
      : Error(ErrorCode::non_convergence, message), residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string &message) {
  throw Error(code, message);
}

}  // namespace fastref
