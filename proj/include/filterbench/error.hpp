#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace filterbench {

enum class ErrorKind {
  Parse,
  Validation,
  DimMismatch,
  NonFiniteValue,
  DuplicateKey,
  Io,
  MissingInput,
  EmptyInput,
  OutOfRange,
  NoEligibleBin,
  TooFewSubjects,
  ZeroNorm,
  MissingEmbedding,
  InsufficientData,
  EmptyScores,
  MissingClass,
  DivergenceDetected,
  SingularSystem,
  MissingMap,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Every failure raised by the library carries a kind so the CLI can map it
// onto an exit code without string matching.
class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

// 1 validation, 2 missing input, 3 numeric failure.
int exit_code_for(ErrorKind kind) noexcept;

}  // namespace filterbench
