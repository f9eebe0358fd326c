#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nrfu {

enum class ErrorCode {
  NotPositiveDefinite,
  InvalidDof,
  AllZeroWeights,
  DimensionMismatch,
  LastStickNotOne,
  EmptyChain,
  NoObservedValues,
  ModeMismatch,
  DegeneratePiK,
  SaturationAbort,
  DegenerateData,
  AllComponentsEmpty,
  AllZeroAfterTilt,
  InsufficientChainStates,
  ZeroTruthMean,
  DegenerateVariance,
  UnknownRowId,
  ProbNotNormalized,
  ParseError,
  InconsistentColumns,
  ValidationError,
  NegativeValueUnderLog,
  ConstantVariable,
  MetadataMissing,
  IoError,
  InvalidConfig,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::InvalidDof: return "InvalidDof";
    case ErrorCode::AllZeroWeights: return "AllZeroWeights";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::LastStickNotOne: return "LastStickNotOne";
    case ErrorCode::EmptyChain: return "EmptyChain";
    case ErrorCode::NoObservedValues: return "NoObservedValues";
    case ErrorCode::ModeMismatch: return "ModeMismatch";
    case ErrorCode::DegeneratePiK: return "DegeneratePiK";
    case ErrorCode::SaturationAbort: return "SaturationAbort";
    case ErrorCode::DegenerateData: return "DegenerateData";
    case ErrorCode::AllComponentsEmpty: return "AllComponentsEmpty";
    case ErrorCode::AllZeroAfterTilt: return "AllZeroAfterTilt";
    case ErrorCode::InsufficientChainStates: return "InsufficientChainStates";
    case ErrorCode::ZeroTruthMean: return "ZeroTruthMean";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::UnknownRowId: return "UnknownRowId";
    case ErrorCode::ProbNotNormalized: return "ProbNotNormalized";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::InconsistentColumns: return "InconsistentColumns";
    case ErrorCode::ValidationError: return "ValidationError";
    case ErrorCode::NegativeValueUnderLog: return "NegativeValueUnderLog";
    case ErrorCode::ConstantVariable: return "ConstantVariable";
    case ErrorCode::MetadataMissing: return "MetadataMissing";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (CLI, HTTP layer) can map it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace nrfu
