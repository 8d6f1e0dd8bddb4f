#pragma once

#include <stdexcept>
#include <string>

namespace dermagan {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-supplied value violates a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Filesystem or codec failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training or optimization produced a non-finite value.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace dermagan
