#pragma once

#include <stdexcept>
#include <string>

namespace mslka {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or channel counts that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Hyperparameters that cannot describe a valid block or network.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. a second backward pass without clearing gradients.
class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Output/reference or input/gt directories whose filenames do not match.
class PairingError : public Error {
 public:
  using Error::Error;
};

class CorruptCheckpoint : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersion : public Error {
 public:
  using Error::Error;
};

}  // namespace mslka
