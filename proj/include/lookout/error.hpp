#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lookout {

enum class ErrorCode {
  kDegenerateRotation,
  kInvalidRotation,
  kGimbalDegenerate,
  kFrameMismatch,
  kConfigInvalid,
  kNoFreePath,
  kSequenceTooShort,
  kShapeMismatch,
  kNonFinite,
  kNonFiniteGradient,
  kNonFiniteLoss,
  kStepOutOfRange,
  kGridMismatch,
  kTooFewSteps,
  kStartBlocked,
  kEmptyGrid,
  kEmptyCloud,
  kMissingDynamicData,
  kLengthMismatch,
  kInconsistentClipSets,
  kIo,
  kParse,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDegenerateRotation: return "DegenerateRotation";
    case ErrorCode::kInvalidRotation: return "InvalidRotation";
    case ErrorCode::kGimbalDegenerate: return "GimbalDegenerate";
    case ErrorCode::kFrameMismatch: return "FrameMismatch";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kNoFreePath: return "NoFreePath";
    case ErrorCode::kSequenceTooShort: return "SequenceTooShort";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kStepOutOfRange: return "StepOutOfRange";
    case ErrorCode::kGridMismatch: return "GridMismatch";
    case ErrorCode::kTooFewSteps: return "TooFewSteps";
    case ErrorCode::kStartBlocked: return "StartBlocked";
    case ErrorCode::kEmptyGrid: return "EmptyGrid";
    case ErrorCode::kEmptyCloud: return "EmptyCloud";
    case ErrorCode::kMissingDynamicData: return "MissingDynamicData";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kInconsistentClipSets: return "InconsistentClipSets";
    case ErrorCode::kIo: return "Io";
    case ErrorCode::kParse: return "Parse";
  }
  return "Unknown";
}

/// Single exception type for the library; `code()` distinguishes failure kinds.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace lookout
