#pragma once

#include <stdexcept>
#include <string>

namespace kmat {

// Error taxonomy shared by every module. The CLI maps these onto process
// exit codes (config 2, data 3, numeric 4); library code throws and never
// exits on its own.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad configuration values, unknown/missing config keys, invalid flags.
struct ConfigError : Error {
  using Error::Error;
};

// Dimension or layout mismatches between otherwise valid objects.
struct ShapeError : Error {
  using Error::Error;
};

// Instance exceeds a documented size bound (e.g. the exact quadratic
// evaluator's n <= 16 contract).
struct SizeError : Error {
  using Error::Error;
};

// Invalid data content: empty classes, non-unit embeddings, bad labels.
struct DataError : Error {
  using Error::Error;
};

// Malformed fixture files; carries the 1-based offending line.
struct FormatError : DataError {
  FormatError(const std::string& msg, int line_no)
      : DataError(msg + " (line " + std::to_string(line_no) + ")"), line(line_no) {}
  int line;
};

// Low-end embeddings offered as training input. Training is zero-shot on the
// low-end modality by contract, so this is always a caller bug worth its own type.
struct ZeroShotViolation : DataError {
  using DataError::DataError;
};

// NaN/Inf encountered, degenerate norms, diverged solves.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace kmat
