#pragma once

#include <stdexcept>
#include <string>

namespace dpnas {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatchError : public Error {
 public:
  using Error::Error;
};

class NonPowerOfTwoRatioError : public ShapeMismatchError {
 public:
  using ShapeMismatchError::ShapeMismatchError;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class UnsupportedFormatError : public ParseError {
 public:
  using ParseError::ParseError;
};

class TruncatedFileError : public ParseError {
 public:
  using ParseError::ParseError;
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace dpnas
