#ifndef ICLSTREAMS_ERRORS_HPP
#define ICLSTREAMS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace icls {

// Error taxonomy used across the library. Everything derives from Error so
// callers can catch one type at the CLI boundary.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes (e.g. matmul inner dimensions).
struct ShapeError : Error {
  using Error::Error;
};

// Invalid numeric input (NaN where finite values are required).
struct NumericError : Error {
  using Error::Error;
};

// Out-of-range index (class id, token id, ...).
struct IndexError : Error {
  using Error::Error;
};

// API precondition broken (non-scalar backward seed, missing grad, ...).
struct ContractError : Error {
  using Error::Error;
};

// Bad user-supplied configuration value.
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem failure; message carries the path.
struct IoError : Error {
  using Error::Error;
};

// Recognizable file with wrong magic/version/field.
struct FormatError : Error {
  using Error::Error;
};

// File shorter than its own header promises.
struct CorruptionError : Error {
  using Error::Error;
};

}  // namespace icls

#endif  // ICLSTREAMS_ERRORS_HPP
