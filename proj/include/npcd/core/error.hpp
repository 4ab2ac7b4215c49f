// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace npcd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation expects.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong order (e.g. backward without a forward).
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Input data is degenerate (zero variance, coincident points, ...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared in a loss or parameter.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Request exceeds what an exact algorithm is allowed to handle.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace npcd
