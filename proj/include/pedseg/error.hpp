#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pedseg {

enum class ErrorCode {
  MissingFile,
  ShapeMismatch,
  HeaderMismatch,
  UnknownLabel,
  NestingViolation,
  InvalidMapping,
  MisalignedPair,
  UnknownVariant,
  InvalidSpec,
  IndivisibleShape,
  EmptyDataset,
  DivergedLoss,
  EmptyGroup,
  OOMShape,
  EmptyMask,
  EmptyCohort,
  InvalidConfig,
  CorruptFile,
  MissingCheckpoint,
  CaseMismatch,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::HeaderMismatch: return "HeaderMismatch";
    case ErrorCode::UnknownLabel: return "UnknownLabel";
    case ErrorCode::NestingViolation: return "NestingViolation";
    case ErrorCode::InvalidMapping: return "InvalidMapping";
    case ErrorCode::MisalignedPair: return "MisalignedPair";
    case ErrorCode::UnknownVariant: return "UnknownVariant";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::IndivisibleShape: return "IndivisibleShape";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::EmptyGroup: return "EmptyGroup";
    case ErrorCode::OOMShape: return "OOMShape";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::EmptyCohort: return "EmptyCohort";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::CaseMismatch: return "CaseMismatch";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can dispatch without string
/// matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace pedseg
