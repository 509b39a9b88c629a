#pragma once

#include <stdexcept>
#include <string>

namespace falldet {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or extent disagreement between tensors.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid configuration value (bad kernel size, probability out of range, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Violated API precondition (non-scalar backward root, label out of range, ...).
struct ContractError : Error {
  using Error::Error;
};

// Non-finite value encountered where a finite one is required.
struct NumericError : Error {
  using Error::Error;
};

// Malformed input file or row.
struct ParseError : Error {
  using Error::Error;
};

// Dataset cannot be partitioned as requested.
struct SplitError : Error {
  using Error::Error;
};

// Resampling of the training partition failed (e.g. empty minority class).
struct RebalanceError : Error {
  using Error::Error;
};

// Checkpoint missing, malformed, or incompatible with the target model.
struct CheckpointError : Error {
  using Error::Error;
};

// Metric undefined for the given inputs (e.g. AUC with a single class).
struct MetricError : Error {
  using Error::Error;
};

}  // namespace falldet
