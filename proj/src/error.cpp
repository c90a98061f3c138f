// SPDX-License-Identifier: Apache-2.0

#include "sotsep/error.hpp"

namespace sotsep {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kInfeasible: return "infeasible";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kMismatch: return "mismatch";
  }
  return "unknown";
}

}  // namespace sotsep
