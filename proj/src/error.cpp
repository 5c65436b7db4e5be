#include "filterbench/error.hpp"

namespace filterbench {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Parse: return "ParseError";
    case ErrorKind::Validation: return "ValidationError";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::DuplicateKey: return "DuplicateKey";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::MissingInput: return "MissingInput";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::OutOfRange: return "OutOfRange";
    case ErrorKind::NoEligibleBin: return "NoEligibleBin";
    case ErrorKind::TooFewSubjects: return "TooFewSubjects";
    case ErrorKind::ZeroNorm: return "ZeroNorm";
    case ErrorKind::MissingEmbedding: return "MissingEmbedding";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::EmptyScores: return "EmptyScores";
    case ErrorKind::MissingClass: return "MissingClass";
    case ErrorKind::DivergenceDetected: return "DivergenceDetected";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::MissingMap: return "MissingMap";
  }
  return "Error";
}

int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Io:
    case ErrorKind::MissingInput:
    case ErrorKind::MissingEmbedding:
    case ErrorKind::MissingMap:
      return 2;
    case ErrorKind::NonFiniteValue:
    case ErrorKind::ZeroNorm:
    case ErrorKind::InsufficientData:
    case ErrorKind::DivergenceDetected:
    case ErrorKind::SingularSystem:
      return 3;
    default:
      return 1;
  }
}

}  // namespace filterbench
