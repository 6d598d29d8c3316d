#pragma once

#include <stdexcept>
#include <string>

namespace geclip {

// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not satisfy an operation's requirements.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition of an API call was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or undefined numeric quantities.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable input data (files, images, manifests).
class DataError : public Error {
 public:
  using Error::Error;
};

// Weight container could not be loaded.
class LoadError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace geclip
