#pragma once

#include <stdexcept>
#include <string>

namespace xmd {

// Base class for all toolkit errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch: incompatible operands, too-short conv input,
// sequence longer than the positional table.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid configuration or command usage (bad field values, unknown keys).
struct ConfigError : Error {
  using Error::Error;
};

// Problems with input data and files: parse failures, missing targets,
// classes with too few examples.
struct DataError : Error {
  using Error::Error;
};

// Numeric failure: non-finite values, singular systems, degenerate
// (zero-norm) embeddings.
struct NumericError : Error {
  using Error::Error;
};

// API contract violation: non-scalar loss, consumed tape reuse, empty
// metric input, schedule step out of range.
struct ContractError : Error {
  using Error::Error;
};

}  // namespace xmd
