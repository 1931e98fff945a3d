#pragma once

#include <stdexcept>
#include <string>

namespace mtl {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or unparsable user input (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

/// Tensor shape or flat-vector length mismatch.
struct ShapeError : Error {
  using Error::Error;
};

/// Bad argument value (out-of-range label, non-scalar loss, ...).
struct ValueError : Error {
  using Error::Error;
};

/// Malformed binary or CSV input; message carries the byte offset where known.
struct FormatError : Error {
  using Error::Error;
};

/// Cohort join problems: duplicate patients, empty intersection, missing labels.
struct CohortError : Error {
  using Error::Error;
};

/// Cross-validation split infeasible for the given cohort.
struct SplitError : Error {
  using Error::Error;
};

/// Degenerate metric input (single class, no positives, one cluster).
struct MetricError : Error {
  using Error::Error;
};

}  // namespace mtl
