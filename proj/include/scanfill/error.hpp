#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace scanfill {

enum class ErrorCode {
  kInvalidArgument,
  kInsufficientData,
  kNoPlaneFound,
  kDegenerateElevationAxis,
  kEmptyObservation,
  kFormatError,
  kGuidanceUnavailable,
  kProtocolError,
  kIoError,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; `code()` distinguishes the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kInsufficientData: return "insufficient-data";
    case ErrorCode::kNoPlaneFound: return "no-plane-found";
    case ErrorCode::kDegenerateElevationAxis: return "degenerate-elevation-axis";
    case ErrorCode::kEmptyObservation: return "empty-observation";
    case ErrorCode::kFormatError: return "format-error";
    case ErrorCode::kGuidanceUnavailable: return "guidance-unavailable";
    case ErrorCode::kProtocolError: return "protocol-error";
    case ErrorCode::kIoError: return "io-error";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace scanfill
