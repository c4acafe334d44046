// Copyright 2026 The MoEKD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moekd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input data (corpus records, config files, checkpoints).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A precondition on arguments was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A persisted artifact no longer matches its recorded content hash.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace moekd
