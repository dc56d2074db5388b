#pragma once

#include <stdexcept>
#include <string>

namespace cer {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or combination of values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Missing, unreadable or unwritable file.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input (manifests, config files).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Input that parses but violates a data contract.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or garbled checkpoint archive.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace cer
