#pragma once

#include <stdexcept>
#include <string>

namespace cwmerge {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: malformed files, violated preconditions, mismatched shapes.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or network failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cwmerge
