#pragma once

#include <stdexcept>
#include <string>

namespace tcprof {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller handed in something that violates an operation's preconditions.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, iteration caps, non-PSD input and similar numerical failures.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  enum class Kind { kBadMagic, kVersionMismatch, kTruncated, kMalformed };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace tcprof
