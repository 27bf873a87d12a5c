#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tdse {

enum class ErrorCode {
  kSignalTooShort,
  kInvalidConfig,
  kDimensionMismatch,
  kLengthMismatch,
  kOutOfRange,
  kRateMismatch,
  kEmptyBand,
  kNyquistExceeded,
  kZeroReference,
  kZeroSignal,
  kUnimplemented,
  kUnsupportedFormat,
  kIo,
  kUnstableFilter,
  kCorpusTooSmall,
  kShapeMismatch,
  kStaleCache,
  kChecksum,
  kParse,
};

inline std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSignalTooShort: return "signal-too-short";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kDimensionMismatch: return "dimension-mismatch";
    case ErrorCode::kLengthMismatch: return "length-mismatch";
    case ErrorCode::kOutOfRange: return "out-of-range";
    case ErrorCode::kRateMismatch: return "rate-mismatch";
    case ErrorCode::kEmptyBand: return "empty-band";
    case ErrorCode::kNyquistExceeded: return "nyquist-exceeded";
    case ErrorCode::kZeroReference: return "zero-reference";
    case ErrorCode::kZeroSignal: return "zero-signal";
    case ErrorCode::kUnimplemented: return "unimplemented";
    case ErrorCode::kUnsupportedFormat: return "unsupported-format";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kUnstableFilter: return "unstable-filter";
    case ErrorCode::kCorpusTooSmall: return "corpus-too-small";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kStaleCache: return "stale-cache";
    case ErrorCode::kChecksum: return "checksum";
    case ErrorCode::kParse: return "parse";
  }
  return "unknown";
}

// All library failures are reported as tdse::Error; code() identifies the
// condition so callers (and tests) need not parse messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void Fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void Require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) Fail(code, what);
}

}  // namespace tdse
