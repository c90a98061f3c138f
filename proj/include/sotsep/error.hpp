// SPDX-License-Identifier: Apache-2.0

#ifndef SOTSEP_ERROR_HPP
#define SOTSEP_ERROR_HPP

#include <stdexcept>
#include <string>

namespace sotsep {

enum class ErrorCode {
  kInvalidArgument,
  kDimension,
  kInfeasible,
  kNumeric,
  kIo,
  kFormat,
  kMismatch,
};

const char* error_code_name(ErrorCode code) noexcept;

// Single exception type for the core; the C API maps `code()` onto status
// values.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace sotsep

#endif  // SOTSEP_ERROR_HPP
