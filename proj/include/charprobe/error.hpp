#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace charprobe {

enum class ErrorCode {
  BadMagic,
  TruncatedFile,
  NonFiniteValue,
  ZeroSize,
  IoError,
  DuplicateId,
  MalformedRow,
  EmptyAlphabet,
  NoPositives,
  NoNegatives,
  UnsatisfiableRatio,
  InvalidArgument,
  NonFiniteLoss,
  EmptySplit,
  LengthMismatch,
  DegenerateX,
  UnknownLabel,
  EmptyCoNLL,
  FeatureCoverageGap,
  UnencodableByte,
  UnknownId,
  EmptyCorpusAfterFiltering,
  ConfigError,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::ZeroSize: return "ZeroSize";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::MalformedRow: return "MalformedRow";
    case ErrorCode::EmptyAlphabet: return "EmptyAlphabet";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::NoNegatives: return "NoNegatives";
    case ErrorCode::UnsatisfiableRatio: return "UnsatisfiableRatio";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DegenerateX: return "DegenerateX";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::EmptyCoNLL: return "EmptyCoNLL";
    case ErrorCode::FeatureCoverageGap: return "FeatureCoverageGap";
    case ErrorCode::UnencodableByte: return "UnencodableByte";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::EmptyCorpusAfterFiltering: return "EmptyCorpusAfterFiltering";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace charprobe
