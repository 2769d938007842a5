#pragma once

#include <stdexcept>
#include <string>

namespace pclsr {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor/image shape disagreement.
struct DimensionError : Error {
  using Error::Error;
};

/// Bad run configuration (unknown key, invalid value, missing file).
struct ConfigError : Error {
  using Error::Error;
};

/// Invalid argument to a library call (non-positive tau, empty batch, ...).
struct ParamError : Error {
  using Error::Error;
};

/// Value outside its documented domain.
struct RangeError : Error {
  using Error::Error;
};

/// Dataset or file contents violate an expected layout.
struct IntegrityError : Error {
  using Error::Error;
};

/// Non-finite value where training must abort.
struct NumericError : Error {
  using Error::Error;
};

/// I/O failure (unreadable PNG, truncated checkpoint, ...).
struct IoError : Error {
  using Error::Error;
};

/// Checkpoint schema version does not match this build.
struct SchemaError : Error {
  using Error::Error;
};

}  // namespace pclsr
