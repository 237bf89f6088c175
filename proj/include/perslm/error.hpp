#pragma once

#include <stdexcept>
#include <string>

namespace perslm {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad caller input: empty corpora, out-of-range weights, invalid configs.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Unreadable or unwritable files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or mismatched serialized data.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace perslm
