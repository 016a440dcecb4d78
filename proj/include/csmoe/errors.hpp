#pragma once

#include <stdexcept>
#include <string>

namespace csmoe {

// Base for every error raised by the library. Callers that only need to
// distinguish "our" failures from std ones catch this.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct DegenerateAffinityError : NumericError { using NumericError::NumericError; };
struct ComparisonError : Error { using Error::Error; };
struct ResolutionError : Error { using Error::Error; };
struct FitFailure : Error { using Error::Error; };

struct CheckpointError : Error { using Error::Error; };
struct CheckpointVersionError : CheckpointError { using CheckpointError::CheckpointError; };
struct CheckpointCorruptionError : CheckpointError { using CheckpointError::CheckpointError; };

}  // namespace csmoe
